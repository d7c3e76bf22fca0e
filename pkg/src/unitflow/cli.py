"""Command-line interface.

Usage:
    unitflow corpus build --out DIR [--config CFG] [--n-train N] [--force]
    unitflow mel extract --in FILE.wav --out FILE.mel [--force]
    unitflow vad trim --in FILE.wav --out FILE.wav [--force]
    unitflow kmeans fit --manifest M --out CB [--k K] [--seed S]
    unitflow units assign --features F --codebook CB --out U [--collapse]
    unitflow units collapse --in U --out U2
    unitflow train pretrain --config CFG --manifest M --codebook CB [--run-dir D]
    unitflow train finetune --config CFG --manifest M --codebook CB --init CKPT [--mode units|mel_input]
    unitflow generate --checkpoint CKPT --codebook CB --features F --out MEL [--manifest M]
    unitflow eval --checkpoint CKPT --codebook CB --manifest M --out-dir D [--mode ...]
    unitflow plot --run-dir D

Environment: UNITFLOW_RUN_ROOT sets the default run directory root (default
./runs); UNITFLOW_WORKERS caps torch CPU threads for train/generate/eval.

Exit codes: 0 success, 1 on any package error (one machine-readable line on
stderr), 2 on argument errors (argparse).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import benchkit, config, dsp, sampler, trainer, units, vfnet
from .errors import InvalidInput, IoError, UnitflowError


def _check_out(path, force: bool):
    path = Path(path)
    if path.exists() and not force:
        raise IoError(f"{path} exists (pass --force to overwrite)")
    return path


def _apply_workers():
    workers = os.environ.get("UNITFLOW_WORKERS")
    if workers:
        try:
            import torch

            torch.set_num_threads(max(1, int(workers)))
        except ValueError as e:
            raise InvalidInput(f"UNITFLOW_WORKERS must be an integer: {workers!r}") from e


def _run_root() -> Path:
    return Path(os.environ.get("UNITFLOW_RUN_ROOT", "runs"))


def _load_cfg(args) -> config.RunConfig:
    overrides = {}
    for section, key, attr in (
        ("run", "seed", "seed"),
        ("run", "k", "k"),
        ("corpus", "n_train", "n_train"),
        ("corpus", "n_test", "n_test"),
        ("degrade", "severity", "severity"),
    ):
        val = getattr(args, attr, None)
        if val is not None:
            overrides[(section, key)] = val
    return config.load_config(getattr(args, "config", None), overrides)


def cmd_corpus_build(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    manifest = out / "manifest.jsonl"
    if manifest.exists() and not args.force:
        raise IoError(f"{manifest} exists (pass --force to overwrite)")
    path = benchkit.build_corpus(
        out,
        n_train=cfg.get("corpus", "n_train"),
        n_test=cfg.get("corpus", "n_test"),
        script_len=(cfg.get("corpus", "script_min"), cfg.get("corpus", "script_max")),
        degrade_cfg=cfg.degrade_config(),
        seed=cfg.get("run", "seed"),
        force=args.force,
    )
    print(path)
    return 0


def cmd_mel_extract(args) -> int:
    out = _check_out(args.out, args.force)
    w = dsp.read_wav(args.infile)
    if w.sample_rate != dsp.SAMPLE_RATE:
        w = dsp.resample(w, dsp.SAMPLE_RATE)
    m = dsp.log_mel(w)
    dsp.write_mel(out, m)
    print(f"{out} frames={m.n_frames}")
    return 0


def cmd_vad_trim(args) -> int:
    out = _check_out(args.out, args.force)
    w = dsp.read_wav(args.infile)
    cfg = dsp.VadConfig(
        energy_threshold_db=args.energy_db, edge_threshold_db=args.edge_db
    )
    trimmed = dsp.trim_silence(w, cfg)
    dsp.write_wav(out, trimmed)
    print(f"{out} kept={trimmed.samples.size}/{w.samples.size}")
    return 0


def cmd_kmeans_fit(args) -> int:
    out = _check_out(args.out, args.force)
    cfg = _load_cfg(args)
    if args.features:
        mats = [units.read_features(f) for f in args.features]
    elif args.manifest:
        manifest = benchkit.load_manifest(args.manifest)
        bank = benchkit.default_bank()
        mats = []
        for e in manifest.split("train"):
            mel = dsp.read_mel(manifest.abspath(e.clean_mel))
            mats.append(benchkit.mel_to_features(mel.frames, bank))
    else:
        raise InvalidInput("kmeans fit needs --features or --manifest")
    stacked = np.vstack(mats)
    cb = units.fit_kmeans(
        stacked,
        cfg.get("run", "k"),
        cfg.get("run", "seed"),
        n_init=cfg.get("run", "kmeans_n_init"),
    )
    units.write_codebook(out, cb)
    meta = cb.training_meta
    print(f"{out} k={cb.k} inertia={meta.inertia:.4f} iters={meta.iterations}")
    return 0


def cmd_units_assign(args) -> int:
    out = _check_out(args.out, args.force)
    cb = units.read_codebook(args.codebook)
    feats = units.read_features(args.features)
    seq = units.assign(feats, cb)
    if args.collapse:
        seq = units.collapse(seq)
    units.write_units(out, seq, cb.k)
    print(f"{out} n={len(seq)} collapsed={seq.collapsed}")
    return 0


def cmd_units_collapse(args) -> int:
    out = _check_out(args.out, args.force)
    seq, k = units.read_units(args.infile)
    collapsed = units.collapse(seq)
    units.write_units(out, collapsed, k)
    print(f"{out} n={len(collapsed)}")
    return 0


def _train_common(args, stage: str) -> int:
    _apply_workers()
    cfg = _load_cfg(args)
    manifest = benchkit.load_manifest(args.manifest)
    codebook = units.read_codebook(args.codebook)
    mode = getattr(args, "mode", "units")
    tcfg = cfg.train_config(
        stage,
        ablation_mode=mode,
        allow_scratch_finetune=getattr(args, "from_scratch", False),
    )
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = _run_root() / f"{stage}-{cfg.config_hash()}-{stamp}"
    if (run_dir / "metrics.csv").exists() and not args.resume and not args.force:
        raise IoError(f"{run_dir} already holds a run (pass --force or --resume)")
    final = trainer.run_stage(
        manifest,
        run_dir,
        cfg.model_config(),
        tcfg,
        codebook,
        init_checkpoint=getattr(args, "init", None),
        resume=args.resume,
    )
    print(final)
    return 0


def cmd_train_pretrain(args) -> int:
    return _train_common(args, "pretrain")


def cmd_train_finetune(args) -> int:
    return _train_common(args, "finetune")


def _field_model(checkpoint) -> vfnet.FieldModel:
    ck = vfnet.load_checkpoint(checkpoint)
    return vfnet.FieldModel(vfnet.net_from_checkpoint(ck))


def cmd_generate(args) -> int:
    _apply_workers()
    out = _check_out(args.out, args.force)
    cfg = _load_cfg(args)
    model = _field_model(args.checkpoint)
    cb = units.read_codebook(args.codebook)
    bank = benchkit.default_bank()
    feats = units.read_features(args.features)
    useq = units.collapse(units.assign(feats, cb))
    if args.target_frames:
        target = args.target_frames
    elif args.manifest:
        manifest = benchkit.load_manifest(args.manifest)
        dup = sampler.median_duplication_factor(manifest, cb, bank)
        target = max(len(useq), int(round(len(useq) * dup)))
    else:
        raise InvalidInput("generate needs --target-frames or --manifest")
    ref = dsp.read_mel(args.ref_mel) if args.ref_mel else None
    cond_mel = (
        benchkit.features_to_mel(feats, bank).astype(np.float32)
        if args.mode == "mel_input"
        else None
    )
    req = sampler.GenerationRequest(
        units=useq,
        target_frames=target,
        seed=args.seed,
        ref_mel=ref,
        cond_mel=cond_mel,
    )
    mel = sampler.generate(req, model, cfg.sway_config(), cfg.path_config())
    dsp.write_mel(out, mel)
    print(f"{out} frames={mel.n_frames} units={len(useq)}")
    return 0


def cmd_eval(args) -> int:
    _apply_workers()
    cfg = _load_cfg(args)
    out_dir = Path(args.out_dir)
    report_path = out_dir / "report.json"
    if report_path.exists() and not args.force:
        raise IoError(f"{report_path} exists (pass --force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = benchkit.load_manifest(args.manifest)
    cb = units.read_codebook(args.codebook)
    model = _field_model(args.checkpoint)
    report = sampler.evaluate_conversion(
        manifest,
        model,
        cb,
        mode=args.mode,
        sway_cfg=cfg.sway_config(),
        path_cfg=cfg.path_config(),
        ref_frames=cfg.get("run", "ref_frames"),
        seed=args.seed,
        out_dir=out_dir,
    )
    with open(report_path, "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
    print(
        f"{report_path} pseudo_wer={report['pseudo_wer']:.4f} "
        f"mel_mse_dtw={report['mel_mse_dtw']:.4f} "
        f"baseline_mse_dtw={report['baseline_mse_dtw']:.4f}"
    )
    return 0


def cmd_plot(args) -> int:
    written = benchkit.emit_plots(args.run_dir)
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unitflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="synthetic corpus tools")
    corpus_sub = corpus.add_subparsers(dest="subcommand", required=True)
    cb = corpus_sub.add_parser("build", help="build a paired corpus")
    cb.add_argument("--out", required=True)
    cb.add_argument("--config")
    cb.add_argument("--seed", type=int)
    cb.add_argument("--n-train", dest="n_train", type=int)
    cb.add_argument("--n-test", dest="n_test", type=int)
    cb.add_argument("--severity", type=float)
    cb.add_argument("--force", action="store_true")
    cb.set_defaults(func=cmd_corpus_build)

    mel = sub.add_parser("mel", help="mel spectrogram tools")
    mel_sub = mel.add_subparsers(dest="subcommand", required=True)
    me = mel_sub.add_parser("extract", help="WAV to mel file")
    me.add_argument("--in", dest="infile", required=True)
    me.add_argument("--out", required=True)
    me.add_argument("--force", action="store_true")
    me.set_defaults(func=cmd_mel_extract)

    vad = sub.add_parser("vad", help="energy VAD")
    vad_sub = vad.add_subparsers(dest="subcommand", required=True)
    vt = vad_sub.add_parser("trim", help="trim leading/trailing silence")
    vt.add_argument("--in", dest="infile", required=True)
    vt.add_argument("--out", required=True)
    vt.add_argument("--energy-db", dest="energy_db", type=float, default=-45.0)
    vt.add_argument("--edge-db", dest="edge_db", type=float, default=-35.0)
    vt.add_argument("--force", action="store_true")
    vt.set_defaults(func=cmd_vad_trim)

    km = sub.add_parser("kmeans", help="codebook tools")
    km_sub = km.add_subparsers(dest="subcommand", required=True)
    kf = km_sub.add_parser("fit", help="fit a codebook")
    kf.add_argument("--features", nargs="*", default=None)
    kf.add_argument("--manifest")
    kf.add_argument("--config")
    kf.add_argument("--k", type=int)
    kf.add_argument("--seed", type=int)
    kf.add_argument("--out", required=True)
    kf.add_argument("--force", action="store_true")
    kf.set_defaults(func=cmd_kmeans_fit)

    un = sub.add_parser("units", help="unit sequence tools")
    un_sub = un.add_subparsers(dest="subcommand", required=True)
    ua = un_sub.add_parser("assign", help="features to unit ids")
    ua.add_argument("--features", required=True)
    ua.add_argument("--codebook", required=True)
    ua.add_argument("--out", required=True)
    ua.add_argument("--collapse", action="store_true")
    ua.add_argument("--force", action="store_true")
    ua.set_defaults(func=cmd_units_assign)
    uc = un_sub.add_parser("collapse", help="collapse consecutive duplicates")
    uc.add_argument("--in", dest="infile", required=True)
    uc.add_argument("--out", required=True)
    uc.add_argument("--force", action="store_true")
    uc.set_defaults(func=cmd_units_collapse)

    tr = sub.add_parser("train", help="training stages")
    tr_sub = tr.add_subparsers(dest="subcommand", required=True)
    for stage, fn in (("pretrain", cmd_train_pretrain), ("finetune", cmd_train_finetune)):
        tp = tr_sub.add_parser(stage, help=f"run the {stage} stage")
        tp.add_argument("--config")
        tp.add_argument("--manifest", required=True)
        tp.add_argument("--codebook", required=True)
        tp.add_argument("--run-dir", dest="run_dir")
        tp.add_argument("--resume")
        tp.add_argument("--seed", type=int)
        tp.add_argument("--force", action="store_true")
        if stage == "finetune":
            tp.add_argument("--init")
            tp.add_argument("--mode", choices=trainer.ABLATION_MODES, default="units")
            tp.add_argument("--from-scratch", dest="from_scratch", action="store_true")
        tp.set_defaults(func=fn)

    gen = sub.add_parser("generate", help="convert degraded features to mel")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--codebook", required=True)
    gen.add_argument("--features", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--ref-mel", dest="ref_mel")
    gen.add_argument("--target-frames", dest="target_frames", type=int)
    gen.add_argument("--manifest")
    gen.add_argument("--config")
    gen.add_argument("--mode", choices=trainer.ABLATION_MODES, default="units")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help="score conversions on the test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--codebook", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out-dir", dest="out_dir", required=True)
    ev.add_argument("--config")
    ev.add_argument("--mode", choices=trainer.ABLATION_MODES, default="units")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render diagnostic plots for a run")
    pl.add_argument("--run-dir", dest="run_dir", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except UnitflowError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - last-resort guard
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
