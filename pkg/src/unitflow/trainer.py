"""Two-stage training loop.

Pretraining conditions on units extracted from the clean target itself;
finetuning conditions on units from the degraded features (or on the
degraded mel directly, in the continuous-conditioning ablation) while the
regression target stays the clean mel. Finetuning initializes from a
pretraining checkpoint unless explicitly allowed to start from scratch.

Batches are packed by a frame budget, utterances are never split, and all
stochastic draws flow through one numpy generator whose state is stored in
every checkpoint, so a resumed run reproduces the original bit for bit.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import benchkit, cfm, dsp, vfnet
from .errors import DivergenceError, IncompatibleCheckpoint, InvalidInput
from .units import Codebook, PaddedUnits, UnitSequence, assign, batch_pad_id, collapse, pad_to_frames, read_features

STAGES = ("pretrain", "finetune")
ABLATION_MODES = ("units", "mel_input")


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    total_updates: int
    warmup_steps: int
    peak_lr: float
    batch_frames: int = 4096
    seed: int = 0
    ablation_mode: str = "units"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    log_every: int = 1
    allow_scratch_finetune: bool = False
    mask: cfm.MaskSpec = field(default_factory=cfm.MaskSpec)
    path: cfm.PathConfig = field(default_factory=cfm.PathConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidInput(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.ablation_mode not in ABLATION_MODES:
            raise InvalidInput(f"unknown ablation mode {self.ablation_mode!r}")
        if self.total_updates < 1:
            raise InvalidInput("total_updates must be >= 1")
        if not 0 <= self.warmup_steps < self.total_updates:
            raise InvalidInput("need 0 <= warmup_steps < total_updates")
        if self.peak_lr <= 0:
            raise InvalidInput("peak_lr must be positive")
        if self.batch_frames < 1:
            raise InvalidInput("batch_frames must be >= 1")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise InvalidInput("need weight_decay >= 0 and grad_clip > 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise InvalidInput("checkpoint_every and log_every must be >= 1")


@dataclass(frozen=True)
class TrainSample:
    """One utterance prepared for a stage; cond_mel only in the ablation."""

    sample_id: str
    x1: np.ndarray
    units: PaddedUnits
    cond_mel: np.ndarray | None = None


class TrainState:
    """Mutable training state: network, moments, step, RNG, loss history."""

    def __init__(self, net, moments, step, rng, loss_history=None):
        self.net = net
        self.moments = moments
        self.step = int(step)
        self.rng = rng
        self.loss_history = list(loss_history or [])


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero to peak, then linear decay back to zero."""
    if step < 0:
        raise InvalidInput(f"step must be >= 0, got {step}")
    if step >= cfg.total_updates:
        return 0.0
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_updates - step) / (cfg.total_updates - cfg.warmup_steps)


def fresh_moments(net) -> dict:
    return {
        name: (torch.zeros_like(p), torch.zeros_like(p))
        for name, p in net.named_parameters()
    }


def init_state(model_cfg: vfnet.ModelConfig, cfg: TrainConfig) -> TrainState:
    net = vfnet.init_params(model_cfg, cfg.seed)
    return TrainState(net, fresh_moments(net), 0, np.random.default_rng(cfg.seed))


def clip_gradients(net, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for p in net.parameters() if p.grad is not None]
    for g in grads:
        total += float((g.double() ** 2).sum())
    total = math.sqrt(total)
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        with torch.no_grad():
            for g in grads:
                g.mul_(scale)
    return total


def adamw_update(net, moments, *, lr, beta1, beta2, eps, weight_decay, t):
    """Decoupled-decay Adam step with bias correction at time index t (>= 1).

    With zero gradients and zero moments, n steps shrink every parameter by
    exactly (1 - lr * weight_decay)^n.
    """
    if t < 1:
        raise InvalidInput("bias-correction index t starts at 1")
    with torch.no_grad():
        for name, p in net.named_parameters():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = moments[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            mhat = m / (1.0 - beta1**t)
            vhat = v / (1.0 - beta2**t)
            p.sub_(lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p))


def train_step(batch, state: TrainState, cfg: TrainConfig) -> tuple:
    """One optimizer update over a packed batch; returns (loss, lr).

    Flow-matching draws happen per sample in batch order through state.rng.
    The loss is the masked mean over all real masked frames in the batch;
    batch-padding frames carry a reserved unit id, are excluded from
    attention keys, and never enter the loss. A non-finite loss raises
    DivergenceError before any state is touched.
    """
    if not batch:
        raise InvalidInput("empty batch")
    net = state.net
    # Update number is 1-indexed: the first update trains at peak/warmup,
    # not at the schedule's zero anchor.
    lr = lr_schedule(state.step + 1, cfg)
    flows = [
        cfm.make_flow_batch(s.x1, s.units, cfg.mask, cfg.path, state.rng)
        for s in batch
    ]
    b = len(flows)
    tmax = max(f.x1.shape[0] for f in flows)
    mel = flows[0].x1.shape[1]
    k = batch[0].units.k
    x_t = np.zeros((b, tmax, mel), np.float32)
    x_ctx = np.zeros((b, tmax, mel), np.float32)
    u_t = np.zeros((b, tmax, mel), np.float32)
    loss_mask = np.zeros((b, tmax), np.float32)
    valid = np.zeros((b, tmax), bool)
    ids = np.full((b, tmax), batch_pad_id(k), np.int64)
    tv = np.zeros(b, np.float32)
    for i, fb in enumerate(flows):
        n = fb.x1.shape[0]
        x_t[i, :n] = fb.x_t
        x_ctx[i, :n] = fb.x_ctx
        u_t[i, :n] = fb.u_t
        loss_mask[i, :n] = fb.mask
        valid[i, :n] = True
        ids[i, :n] = fb.units.ids
        tv[i] = fb.t

    if cfg.ablation_mode == "units":
        cond = vfnet.embed_units(ids, net)
    else:
        conds = []
        for s in batch:
            if s.cond_mel is None:
                raise InvalidInput(f"sample {s.sample_id} lacks conditioning mel")
            conds.append(vfnet.embed_cond_mel(s.cond_mel, tmax, net))
        cond = torch.stack(conds)

    net.zero_grad(set_to_none=True)
    v = net(
        torch.from_numpy(x_t),
        torch.from_numpy(x_ctx),
        cond,
        torch.from_numpy(tv),
        torch.from_numpy(valid),
    )
    loss = cfm.cfm_loss(
        v.reshape(-1, mel),
        torch.from_numpy(u_t).reshape(-1, mel),
        torch.from_numpy(loss_mask).reshape(-1),
    )
    loss_val = float(loss.detach())
    if not math.isfinite(loss_val):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    loss.backward()
    clip_gradients(net, cfg.grad_clip)
    adamw_update(
        net,
        state.moments,
        lr=lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        t=state.step + 1,
    )
    state.step += 1
    state.loss_history.append((state.step, loss_val))
    return loss_val, lr


def prepare_training_samples(
    manifest: benchkit.CorpusManifest,
    stage: str,
    codebook: Codebook,
    *,
    ablation_mode: str = "units",
    bank: benchkit.SymbolBank | None = None,
) -> list:
    """Adapt the training split of a corpus to a stage's conditioning.

    Pretraining: units come from the clean target's own features.
    Finetuning (units): units come from the degraded features.
    Finetuning (mel_input): conditioning is the mel reconstruction of the
    degraded features; the unit field is all-FILLER and unused.
    The target mel is always the clean one.
    """
    if stage not in STAGES:
        raise InvalidInput(f"stage must be one of {STAGES}")
    bank = bank or benchkit.default_bank()
    k = codebook.k
    samples = []
    for e in manifest.split("train"):
        melspec = dsp.read_mel(manifest.abspath(e.clean_mel))
        x1 = melspec.frames
        t = x1.shape[0]
        if stage == "pretrain":
            feats = benchkit.mel_to_features(x1, bank)
            padded = pad_to_frames(collapse(assign(feats, codebook)), t, k)
            samples.append(TrainSample(e.sample_id, x1, padded))
        elif ablation_mode == "units":
            feats = read_features(manifest.abspath(e.degraded_features))
            padded = pad_to_frames(collapse(assign(feats, codebook)), t, k)
            samples.append(TrainSample(e.sample_id, x1, padded))
        else:
            feats = read_features(manifest.abspath(e.degraded_features))
            cond = benchkit.features_to_mel(feats, bank).astype(np.float32)
            empty = UnitSequence(np.zeros(0, dtype=np.int64), collapsed=True)
            padded = pad_to_frames(empty, t, k)
            samples.append(TrainSample(e.sample_id, x1, padded, cond_mel=cond))
    if not samples:
        raise InvalidInput("manifest has no training entries")
    return samples


def pack_batches(samples, batch_frames: int) -> list:
    """Greedy length-sorted packing; an utterance is never split.

    Returns a list of index lists. A single utterance longer than the
    budget still forms its own batch.
    """
    order = sorted(range(len(samples)), key=lambda i: (samples[i].x1.shape[0], i))
    batches = []
    cur: list = []
    used = 0
    for i in order:
        n = samples[i].x1.shape[0]
        if cur and used + n > batch_frames:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        batches.append(cur)
    return batches


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    # Dedicated stream per epoch: resuming mid-epoch replays the same order
    # without rewinding the training RNG.
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 3, epoch])))
    return rng.permutation(n)


def run_stage(
    manifest: benchkit.CorpusManifest,
    run_dir,
    model_cfg: vfnet.ModelConfig,
    cfg: TrainConfig,
    codebook: Codebook,
    *,
    init_checkpoint=None,
    resume=None,
    bank: benchkit.SymbolBank | None = None,
) -> Path:
    """Run one stage to completion; returns the final checkpoint path.

    Writes metrics.csv (step,loss,lr,wall_s) and periodic checkpoints under
    run_dir. `resume` continues an interrupted run of the same stage and
    config; `init_checkpoint` seeds finetuning weights from pretraining.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    samples = prepare_training_samples(
        manifest, cfg.stage, codebook, ablation_mode=cfg.ablation_mode, bank=bank
    )
    plan = pack_batches(samples, cfg.batch_frames)

    if resume is not None:
        ck = vfnet.load_checkpoint(resume)
        if ck.cfg != model_cfg:
            raise IncompatibleCheckpoint("resume checkpoint has a different architecture")
        if ck.extra.get("stage") != cfg.stage:
            raise IncompatibleCheckpoint(
                f"resume checkpoint is from stage {ck.extra.get('stage')!r}, not {cfg.stage!r}"
            )
        net = vfnet.net_from_checkpoint(ck)
        moments = vfnet.moments_from_checkpoint(ck, net)
        rng = np.random.default_rng()
        if ck.rng_state is None:
            raise IncompatibleCheckpoint("resume checkpoint lacks RNG state")
        rng.bit_generator.state = ck.rng_state
        state = TrainState(net, moments, ck.step, rng, ck.extra.get("loss_history", []))
    elif cfg.stage == "finetune" and init_checkpoint is None:
        if not cfg.allow_scratch_finetune:
            raise IncompatibleCheckpoint(
                "finetune requires a pretraining checkpoint (or allow_scratch_finetune)"
            )
        state = init_state(model_cfg, cfg)
    elif cfg.stage == "finetune":
        ck = vfnet.load_checkpoint(init_checkpoint)
        if ck.cfg != model_cfg:
            raise IncompatibleCheckpoint("init checkpoint has a different architecture")
        net = vfnet.net_from_checkpoint(ck)
        state = TrainState(net, fresh_moments(net), 0, np.random.default_rng(cfg.seed))
    else:
        state = init_state(model_cfg, cfg)

    metrics_path = run_dir / "metrics.csv"
    mode = "a" if resume is not None and metrics_path.exists() else "w"
    final_path = run_dir / "final.ckpt"

    def save(path):
        vfnet.save_checkpoint(
            path,
            state.net,
            moments=state.moments,
            step=state.step,
            rng_state=state.rng.bit_generator.state,
            extra={
                "stage": cfg.stage,
                "ablation_mode": cfg.ablation_mode,
                "train_seed": cfg.seed,
                "loss_history": [[s, l] for s, l in state.loss_history],
            },
        )

    with open(metrics_path, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(["step", "loss", "lr", "wall_s"])
        perm = None
        perm_epoch = -1
        while state.step < cfg.total_updates:
            epoch = state.step // len(plan)
            idx = state.step % len(plan)
            if perm is None or epoch != perm_epoch:
                perm = _epoch_perm(cfg.seed, epoch, len(plan))
                perm_epoch = epoch
            batch = [samples[j] for j in plan[perm[idx]]]
            t0 = time.monotonic()
            loss, lr = train_step(batch, state, cfg)
            wall = time.monotonic() - t0
            if state.step % cfg.log_every == 0 or state.step == cfg.total_updates:
                writer.writerow([state.step, f"{loss:.8e}", f"{lr:.8e}", f"{wall:.4f}"])
                f.flush()
            if state.step % cfg.checkpoint_every == 0 and state.step < cfg.total_updates:
                save(run_dir / f"step-{state.step:06d}.ckpt")
    save(final_path)
    return final_path
