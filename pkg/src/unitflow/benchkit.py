"""Synthetic paired corpus and evaluation kit.

A desk-scale stand-in for paired clean/degraded speech. A fixed random
orthonormal basis W (80 x 16) defines a 16-dim feature space inside the mel
space; each symbol of a small alphabet owns a feature code and a base
duration, and its mel pattern is the code lifted through W. Utterances are
rendered from symbol scripts with one jitter draw per segment, so every
frame within a segment is identical and unit collapsing is exact.

Degradation acts on the feature sequence only: blockwise additive drift,
per-segment tempo stretch (factors >= 1, frames only repeat), and random
per-frame repetition. Severity 0 is the identity.

Metrics: frame-wise symbol decoding for a pseudo word error rate, and mel
MSE with optional DTW alignment.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dsp
from .errors import DegenerateData, InvalidInput, IoError
from .units import write_features

MASTER_SEED = 20260816
N_SYMBOLS = 12
FEATURE_DIM = 16
CODE_STD = 2.0
SEGMENT_JITTER_STD = 0.1
DURATION_LO = 3
DURATION_HI = 4
MIN_CODE_SEPARATION = 4.0


@dataclass(frozen=True)
class SymbolBank:
    """Fixed alphabet: mel patterns, feature codes, durations, basis W."""

    patterns: np.ndarray   # (S, 80)
    codes: np.ndarray      # (S, 16)
    durations: np.ndarray  # (S,) frames
    basis: np.ndarray      # (80, 16), orthonormal columns

    @property
    def n_symbols(self) -> int:
        return int(self.patterns.shape[0])


@dataclass(frozen=True)
class SymbolScript:
    symbols: tuple

    def __post_init__(self):
        syms = tuple(int(s) for s in self.symbols)
        if not syms:
            raise InvalidInput("script must contain at least one symbol")
        if min(syms) < 0:
            raise InvalidInput("symbols must be non-negative")
        object.__setattr__(self, "symbols", syms)

    def __len__(self) -> int:
        return len(self.symbols)


@dataclass(frozen=True)
class DegradeConfig:
    severity: float = 0.5
    stretch_lo: float = 1.0
    stretch_hi: float = 1.4
    repeat_prob: float = 0.3
    jitter_std: float = 2.0
    jitter_block: int = 6
    segment_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise InvalidInput(f"severity must be in [0, 1], got {self.severity}")
        if not 0.0 < self.stretch_lo <= self.stretch_hi:
            raise InvalidInput("need 0 < stretch_lo <= stretch_hi")
        if not 0.0 <= self.repeat_prob <= 1.0:
            raise InvalidInput("repeat_prob must be in [0, 1]")
        if self.jitter_std < 0:
            raise InvalidInput("jitter_std must be >= 0")
        if self.jitter_block < 1 or self.segment_len < 1:
            raise InvalidInput("jitter_block and segment_len must be >= 1")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    clean_mel: str
    degraded_features: str
    script: tuple
    severity: float
    split: str

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise InvalidInput(f"unknown split {self.split!r}")
        object.__setattr__(self, "script", tuple(int(s) for s in self.script))


@dataclass
class CorpusManifest:
    root: Path
    entries: list

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidInput("duplicate sample ids in manifest")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def abspath(self, rel: str) -> Path:
        return self.root / rel


_DEFAULT_BANK = None


def default_bank() -> SymbolBank:
    """The fixed bank every corpus and evaluation in this package shares."""
    global _DEFAULT_BANK
    if _DEFAULT_BANK is None:
        _DEFAULT_BANK = make_symbol_bank()
    return _DEFAULT_BANK


def make_symbol_bank(
    n_symbols: int = N_SYMBOLS,
    feature_dim: int = FEATURE_DIM,
    seed: int = MASTER_SEED,
) -> SymbolBank:
    """Draw the shared basis, symbol codes, and base durations.

    The basis comes from a QR decomposition of a Gaussian matrix, so
    patterns lie exactly in span(W) and the feature projection loses
    nothing on clean patterns. Raises DegenerateData if two codes land
    closer than MIN_CODE_SEPARATION (does not happen for the shipped seed).
    """
    if not 2 <= feature_dim <= dsp.N_MELS:
        raise InvalidInput(f"feature_dim must be in [2, {dsp.N_MELS}]")
    if n_symbols < 2:
        raise InvalidInput("need at least two symbols")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dsp.N_MELS, feature_dim))
    w, _ = np.linalg.qr(g)
    codes = rng.normal(0.0, CODE_STD, (n_symbols, feature_dim))
    dists = np.sqrt(((codes[:, None, :] - codes[None]) ** 2).sum(axis=2))
    np.fill_diagonal(dists, np.inf)
    if dists.min() < MIN_CODE_SEPARATION:
        raise DegenerateData(
            f"symbol codes too close ({dists.min():.2f} < {MIN_CODE_SEPARATION})"
        )
    durations = rng.integers(DURATION_LO, DURATION_HI + 1, n_symbols)
    patterns = codes @ w.T
    return SymbolBank(patterns, codes, durations, w)


def mel_to_features(frames, bank: SymbolBank) -> np.ndarray:
    """Project mel frames onto the basis; one feature row per mel frame."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dsp.N_MELS:
        raise InvalidInput(f"expected (T, {dsp.N_MELS}) mel frames, got {x.shape}")
    return x @ bank.basis


def features_to_mel(features, bank: SymbolBank) -> np.ndarray:
    """Lift features back to mel space (exact on clean patterns)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bank.basis.shape[1]:
        raise InvalidInput(
            f"expected (T, {bank.basis.shape[1]}) features, got {x.shape}"
        )
    return x @ bank.basis.T


def make_clean_sample(script: SymbolScript, seed, bank: SymbolBank):
    """Render a script to (MelSpectrogram, feature matrix).

    One jitter vector per segment; all frames of a segment are identical.
    Features are computed from the stored f32 mel so the two stay exactly
    consistent. Total frames equal the sum of base durations.
    """
    if max(script.symbols) >= bank.n_symbols:
        raise InvalidInput("script symbol outside the bank alphabet")
    rng = np.random.default_rng(seed)
    blocks = []
    for sym in script.symbols:
        frame = bank.patterns[sym] + rng.normal(0.0, SEGMENT_JITTER_STD, dsp.N_MELS)
        blocks.append(np.tile(frame, (int(bank.durations[sym]), 1)))
    frames = np.vstack(blocks)
    frames = np.maximum(frames, np.log(dsp.LOG_FLOOR_POWER))
    mel = dsp.MelSpectrogram(frames.astype(np.float32))
    feats = mel.frames.astype(np.float64) @ bank.basis
    return mel, feats


def degrade(features, cfg: DegradeConfig) -> np.ndarray:
    """Impaired-articulation feature corruption; length only grows.

    Order matters: additive drift is drawn per block of consecutive source
    frames first, so the stretch and repetition stages duplicate rows
    verbatim and consecutive-duplicate collapsing stays rate-invariant.
    Severity scales every stage; severity 0 returns the input bitwise.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidInput(f"features must be nonempty (T, D), got shape {x.shape}")
    if cfg.severity == 0.0:
        return x.copy()
    rng = np.random.default_rng(cfg.seed)
    t, d = x.shape
    n_blocks = math.ceil(t / cfg.jitter_block)
    drift = rng.normal(0.0, cfg.jitter_std * cfg.severity, (n_blocks, d))
    x = x + np.repeat(drift, cfg.jitter_block, axis=0)[:t]
    pieces = []
    for s in range(0, t, cfg.segment_len):
        idx = np.arange(s, min(s + cfg.segment_len, t))
        f = rng.uniform(cfg.stretch_lo, cfg.stretch_hi)
        factor = 1.0 + cfg.severity * (f - 1.0)
        new_len = max(idx.size, int(round(idx.size * factor)))
        pick = np.round(np.linspace(0, idx.size - 1, new_len)).astype(int)
        pieces.append(idx[pick])
    order = np.concatenate(pieces)
    reps = 1 + (rng.random(order.size) < cfg.repeat_prob * cfg.severity).astype(int)
    order = np.repeat(order, reps)
    return x[order]


def _script_text(script: SymbolScript) -> str:
    return ",".join(str(s) for s in script.symbols)


def _draw_script(rng, n_symbols: int, lo: int, hi: int) -> SymbolScript:
    # No adjacent repeats, so the symbol sequence survives unit collapsing.
    length = int(rng.integers(lo, hi + 1))
    syms = [int(rng.integers(n_symbols))]
    for _ in range(length - 1):
        step = 1 + int(rng.integers(n_symbols - 1))
        syms.append((syms[-1] + step) % n_symbols)
    return SymbolScript(tuple(syms))


def build_corpus(
    out_dir,
    *,
    n_train: int = 200,
    n_test: int = 20,
    script_len: tuple = (6, 10),
    degrade_cfg: DegradeConfig = DegradeConfig(),
    seed: int = 0,
    bank: SymbolBank | None = None,
    force: bool = False,
) -> Path:
    """Write a paired corpus and return the manifest path.

    Scripts are unique across the corpus and the test split is disjoint
    from training. All randomness descends from `seed`, and manifest paths
    are relative, so two builds with the same arguments are byte-identical.
    """
    if n_train < 1 or n_test < 0:
        raise InvalidInput("need n_train >= 1 and n_test >= 0")
    lo, hi = int(script_len[0]), int(script_len[1])
    if not 1 <= lo <= hi:
        raise InvalidInput(f"bad script length range {script_len}")
    out = Path(out_dir)
    manifest_path = out / "manifest.jsonl"
    if manifest_path.exists() and not force:
        raise IoError(f"{manifest_path} exists (use force to overwrite)")
    (out / "mel").mkdir(parents=True, exist_ok=True)
    (out / "feat").mkdir(parents=True, exist_ok=True)
    bank = bank or default_bank()

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    scripts = []
    seen = set()
    guard = 0
    while len(scripts) < n_train + n_test:
        s = _draw_script(rng, bank.n_symbols, lo, hi)
        if s.symbols not in seen:
            seen.add(s.symbols)
            scripts.append(s)
        guard += 1
        if guard > 50 * (n_train + n_test):
            raise DegenerateData("cannot draw enough distinct scripts")

    entries = []
    for i, script in enumerate(scripts):
        split = "train" if i < n_train else "test"
        local = i if split == "train" else i - n_train
        sid = f"{split}_{local:04d}"
        mel, feats = make_clean_sample(script, np.random.SeedSequence([seed, 1, i]), bank)
        dseed = int(np.random.SeedSequence([seed, 2, i]).generate_state(1, np.uint64)[0])
        deg = degrade(feats, replace(degrade_cfg, seed=dseed))
        mel_rel = f"mel/{sid}.mel"
        feat_rel = f"feat/{sid}.fea"
        dsp.write_mel(out / mel_rel, mel)
        write_features(out / feat_rel, deg)
        entries.append(
            ManifestEntry(
                sample_id=sid,
                clean_mel=mel_rel,
                degraded_features=feat_rel,
                script=script.symbols,
                severity=degrade_cfg.severity,
                split=split,
            )
        )
    with open(manifest_path, "w") as f:
        for e in entries:
            row = {
                "clean_mel": e.clean_mel,
                "degraded_features": e.degraded_features,
                "sample_id": e.sample_id,
                "script": list(e.script),
                "severity": e.severity,
                "split": e.split,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path) -> CorpusManifest:
    """Parse a manifest and verify every referenced file exists."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such manifest: {path}")
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                entries.append(
                    ManifestEntry(
                        sample_id=row["sample_id"],
                        clean_mel=row["clean_mel"],
                        degraded_features=row["degraded_features"],
                        script=tuple(row["script"]),
                        severity=float(row["severity"]),
                        split=row["split"],
                    )
                )
            except (KeyError, ValueError, TypeError) as e:
                raise IoError(f"{path}:{line_no}: malformed manifest row: {e}") from e
    manifest = CorpusManifest(root=path.parent, entries=entries)
    for e in entries:
        for rel in (e.clean_mel, e.degraded_features):
            if not manifest.abspath(rel).exists():
                raise IoError(f"manifest references missing file {rel}")
    return manifest


def levenshtein(a, b) -> int:
    """Edit distance between two sequences (insert, delete, substitute)."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, xa in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, xb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (xa != xb))
        prev = cur
    return prev[len(b)]


def pseudo_wer(hyp, ref) -> float:
    """Edit distance normalized by reference length; may exceed 1."""
    ref = list(ref)
    if not ref:
        raise InvalidInput("reference script is empty")
    return levenshtein(hyp, ref) / len(ref)


def decode_symbols(frames, bank: SymbolBank, min_run: int = 2) -> tuple:
    """Frame-wise nearest pattern, then run-length filtering.

    Runs shorter than min_run are treated as transients and dropped;
    surviving adjacent equal runs merge. A pure clean sample decodes to its
    script exactly.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dsp.N_MELS:
        raise InvalidInput(f"expected (T, {dsp.N_MELS}) frames, got {x.shape}")
    if min_run < 1:
        raise InvalidInput("min_run must be >= 1")
    d2 = ((x[:, None, :] - bank.patterns[None]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    runs = []
    start = 0
    for i in range(1, labels.size + 1):
        if i == labels.size or labels[i] != labels[start]:
            runs.append((int(labels[start]), i - start))
            start = i
    out = []
    for sym, run in runs:
        if run >= min_run:
            if not out or out[-1] != sym:
                out.append(sym)
    return tuple(out)


def _dtw_path(a: np.ndarray, b: np.ndarray) -> list:
    ta, tb = a.shape[0], b.shape[0]
    cost = ((a[:, None, :] - b[None]) ** 2).mean(axis=2)
    acc = np.full((ta, tb), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(ta):
        for j in range(tb):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            acc[i, j] = cost[i, j] + best
    path = [(ta - 1, tb - 1)]
    i, j = ta - 1, tb - 1
    while (i, j) != (0, 0):
        cands = []
        if i > 0 and j > 0:
            cands.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            cands.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            cands.append((acc[i, j - 1], (i, j - 1)))
        _, (i, j) = min(cands, key=lambda c: c[0])
        path.append((i, j))
    path.reverse()
    return path


def mel_mse(a, b, align: bool = False) -> float:
    """Per-entry mean squared error; align=True uses a DTW warping path."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidInput(f"incompatible shapes {a.shape} vs {b.shape}")
    if not align:
        if a.shape != b.shape:
            raise InvalidInput("unaligned mel_mse requires equal lengths")
        return float(((a - b) ** 2).mean())
    path = _dtw_path(a, b)
    total = 0.0
    for i, j in path:
        total += float(((a[i] - b[j]) ** 2).mean())
    return total / len(path)


def _read_metrics_csv(path: Path):
    steps, losses = [], []
    with open(path) as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise IoError(f"{path}: not a metrics csv")
        for row in reader:
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    return np.array(steps), np.array(losses)


def emit_plots(run_dir) -> list:
    """Render diagnostic PNGs under <run_dir>/plots.

    Always writes loss_curve.png from every metrics*.csv found below
    run_dir (missing metrics raise IoError). With two or more metrics
    files, also writes ablation_compare.png overlaying them. If generated
    mel files exist under <run_dir>/gen, writes mel_examples.png showing
    up to three. Returns the written paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    metric_files = sorted(set(run_dir.rglob("metrics*.csv")))
    if not metric_files:
        raise IoError(f"no metrics*.csv under {run_dir}")
    plots = run_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []

    curves = []
    for p in metric_files:
        label = p.parent.name if p.name == "metrics.csv" else p.stem
        curves.append((label, *_read_metrics_csv(p)))

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, steps, losses in curves:
        ax.plot(steps, losses, label=label, linewidth=1.0)
    ax.set_xlabel("update")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = plots / "loss_curve.png"
    fig.savefig(out, dpi=110)
    plt.close(fig)
    written.append(out)

    if len(curves) >= 2:
        fig, ax = plt.subplots(figsize=(7, 4))
        for label, steps, losses in curves:
            w = max(1, len(losses) // 50)
            smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
            ax.plot(steps[: smooth.size], smooth, label=label, linewidth=1.2)
        ax.set_xlabel("update")
        ax.set_ylabel("loss (smoothed)")
        ax.set_yscale("log")
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = plots / "ablation_compare.png"
        fig.savefig(out, dpi=110)
        plt.close(fig)
        written.append(out)

    gen_dir = run_dir / "gen"
    mel_files = sorted(gen_dir.glob("*.mel")) if gen_dir.exists() else []
    if mel_files:
        picks = mel_files[:3]
        fig, axes = plt.subplots(len(picks), 1, figsize=(7, 2.2 * len(picks)))
        axes = np.atleast_1d(axes)
        for ax, p in zip(axes, picks):
            m = dsp.read_mel(p)
            ax.imshow(m.frames.T, origin="lower", aspect="auto", cmap="magma")
            ax.set_title(p.name, fontsize=8)
        fig.tight_layout()
        out = plots / "mel_examples.png"
        fig.savefig(out, dpi=110)
        plt.close(fig)
        written.append(out)
    return written
