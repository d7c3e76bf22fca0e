"""Transformer vector-field network.

Predicts the flow-matching velocity for a whole utterance from three aligned
streams concatenated per frame: the path sample x_t, the clean context
x_ctx (masked frames zeroed), and a conditioning embedding (discrete unit
embeddings, or a projected mel for the continuous-conditioning ablation).
The flow time t enters through a sinusoidal embedding added to every frame.

Blocks are pre-LayerNorm with rotary-position attention and a 4x GELU MLP.
The output projection is zero-initialized, so an untrained network predicts
exactly the zero field and the first loss equals the mean squared target.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import IncompatibleCheckpoint, InvalidInput, IoError

CKPT_MAGIC = b"UFCKP1"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 128
    unit_vocab: int = 34
    unit_emb_dim: int = 64
    mel_dim: int = 80
    max_frames: int = 256

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 1:
                raise InvalidInput(f"{f.name} must be positive")
        if self.dim % self.heads != 0:
            raise InvalidInput(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2 != 0:
            raise InvalidInput("head dim must be even for rotary positions")
        if self.unit_vocab < 3:
            raise InvalidInput("unit vocab needs >= 1 codebook id plus 2 reserved ids")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**{k: int(v) for k, v in d.items()})


def _sinusoidal_time(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of flow time (scaled by 1000 for resolution)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half
    )
    ang = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


def _rotary_tables(n: int, head_dim: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    half = head_dim // 2
    inv = 1.0 / (10000.0 ** (torch.arange(half, dtype=dtype) / half))
    ang = torch.arange(n, dtype=dtype)[:, None] * inv[None, :]
    return torch.cos(ang), torch.sin(ang)


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, dh); tables: (T, dh/2)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, h, cos, sin, frame_valid):
        b, t, d = h.shape
        dh = d // self.heads
        x = self.ln1(h)
        qkv = self.qkv(x).view(b, t, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        q = _apply_rotary(qkv[0], cos, sin)
        k = _apply_rotary(qkv[1], cos, sin)
        v = qkv[2]
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        if frame_valid is not None:
            scores = scores.masked_fill(~frame_valid[:, None, None, :], float("-inf"))
        att = scores.softmax(dim=-1) @ v
        h = h + self.attn_out(att.permute(0, 2, 1, 3).reshape(b, t, d))
        h = h + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(h))))
        return h


class VectorFieldNet(nn.Module):
    """Batched velocity predictor; see module docstring for the layout."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.unit_emb = nn.Embedding(cfg.unit_vocab, cfg.unit_emb_dim)
        # Learned padding vector for the continuous-conditioning ablation.
        self.cond_pad = nn.Parameter(torch.zeros(cfg.unit_emb_dim))
        self.mel_cond_proj = nn.Linear(cfg.mel_dim, cfg.unit_emb_dim)
        self.in_proj = nn.Linear(2 * cfg.mel_dim + cfg.unit_emb_dim, cfg.dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.dim, cfg.dim), nn.SiLU(), nn.Linear(cfg.dim, cfg.dim)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.layers)
        )
        self.final_ln = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.mel_dim)

    def forward(self, x_t, x_ctx, cond, t, frame_valid=None):
        """x_t, x_ctx: (B,T,mel); cond: (B,T,emb); t: (B,); valid: (B,T) bool."""
        if x_t.ndim != 3 or x_t.shape != x_ctx.shape:
            raise InvalidInput(
                f"x_t {tuple(x_t.shape)} and x_ctx {tuple(x_ctx.shape)} must match (B,T,mel)"
            )
        b, n, _ = x_t.shape
        if x_t.shape[2] != self.cfg.mel_dim:
            raise InvalidInput(f"expected {self.cfg.mel_dim} mel channels")
        if cond.shape[:2] != (b, n) or cond.shape[2] != self.cfg.unit_emb_dim:
            raise InvalidInput(f"cond shape {tuple(cond.shape)} misaligned with inputs")
        if t.shape != (b,):
            raise InvalidInput(f"t must be shape ({b},), got {tuple(t.shape)}")
        if n > self.cfg.max_frames:
            raise InvalidInput(f"{n} frames exceed max_frames={self.cfg.max_frames}")
        h = self.in_proj(torch.cat([x_t, x_ctx, cond], dim=-1))
        h = h + self.time_mlp(_sinusoidal_time(t, self.cfg.dim))[:, None, :]
        cos, sin = _rotary_tables(n, self.cfg.dim // self.cfg.heads, h.dtype)
        for blk in self.blocks:
            h = blk(h, cos, sin, frame_valid)
        return self.head(self.final_ln(h))


def init_params(cfg: ModelConfig, seed: int) -> VectorFieldNet:
    """Deterministic initialization from a dedicated torch generator.

    Linear weights are fan-in scaled normals, embeddings and the ablation
    padding vector unit normals, LayerNorms identity. The output head is
    zeroed last so a fresh model predicts the zero field exactly.
    """
    net = VectorFieldNet(cfg)
    g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name in ("unit_emb.weight", "cond_pad"):
                p.normal_(0.0, 1.0, generator=g)
            elif name.endswith(".bias"):
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0)
            else:
                p.normal_(0.0, p.shape[1] ** -0.5, generator=g)
        net.head.weight.zero_()
        net.head.bias.zero_()
    return net


def param_count(net: VectorFieldNet) -> int:
    return sum(p.numel() for p in net.parameters())


def embed_units(ids, net: VectorFieldNet) -> torch.Tensor:
    """Embedding rows for unit ids of shape (T,) or (B, T).

    Valid ids cover the codebook plus both reserved ids; anything at or past
    the vocabulary size raises InvalidInput.
    """
    ids_t = torch.as_tensor(np.asarray(ids), dtype=torch.long)
    if ids_t.numel() == 0:
        raise InvalidInput("empty unit id array")
    if int(ids_t.min()) < 0 or int(ids_t.max()) >= net.cfg.unit_vocab:
        raise InvalidInput(
            f"unit ids must lie in [0, {net.cfg.unit_vocab}), "
            f"got range [{int(ids_t.min())}, {int(ids_t.max())}]"
        )
    return net.unit_emb.weight[ids_t]


def embed_cond_mel(cond_mel, target_len: int, net: VectorFieldNet) -> torch.Tensor:
    """Continuous-conditioning ablation stream, shape (target_len, emb).

    The conditioning mel is projected frame-wise; when shorter than the
    target it is extended with the learned padding vector, when longer it is
    truncated.
    """
    if target_len < 1:
        raise InvalidInput(f"target_len must be >= 1, got {target_len}")
    dtype = net.mel_cond_proj.weight.dtype
    mel = torch.as_tensor(np.asarray(cond_mel), dtype=dtype)
    if mel.ndim != 2 or mel.shape[1] != net.cfg.mel_dim:
        raise InvalidInput(f"cond mel must be (T, {net.cfg.mel_dim}), got {tuple(mel.shape)}")
    keep = min(int(mel.shape[0]), target_len)
    rows = net.mel_cond_proj(mel[:keep])
    if keep < target_len:
        pad = net.cond_pad[None, :].expand(target_len - keep, -1)
        rows = torch.cat([rows, pad], dim=0)
    return rows


def forward(x_t, x_ctx, cond_emb, t: float, net: VectorFieldNet) -> torch.Tensor:
    """Single-utterance convenience wrapper around the batched forward."""
    dtype = next(net.parameters()).dtype
    xt = torch.as_tensor(np.asarray(x_t), dtype=dtype)
    xc = torch.as_tensor(np.asarray(x_ctx), dtype=dtype)
    if xt.ndim != 2:
        raise InvalidInput(f"x_t must be (T, mel), got shape {tuple(xt.shape)}")
    cond = cond_emb if isinstance(cond_emb, torch.Tensor) else torch.as_tensor(
        np.asarray(cond_emb), dtype=dtype
    )
    tv = torch.tensor([float(t)], dtype=dtype)
    return net(xt[None], xc[None], cond.to(dtype)[None], tv)[0]


class FieldModel:
    """Trained network packaged as a numpy vector field for ODE integration."""

    def __init__(self, net: VectorFieldNet):
        self.net = net.eval()

    def make_field(self, x_ctx: np.ndarray, cond_emb: torch.Tensor):
        """Freeze context and conditioning; return field(x, t) -> velocity."""
        dtype = next(self.net.parameters()).dtype
        ctx = torch.as_tensor(np.ascontiguousarray(x_ctx), dtype=dtype)[None]
        cond = cond_emb.to(dtype)[None]

        def field(x: np.ndarray, t: float) -> np.ndarray:
            xt = torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)[None]
            tv = torch.tensor([float(t)], dtype=dtype)
            with torch.no_grad():
                v = self.net(xt, ctx, cond, tv)
            return v[0].numpy().astype(np.float64)

        return field


def save_checkpoint(
    path,
    net: VectorFieldNet,
    *,
    moments: dict | None = None,
    step: int = 0,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Binary checkpoint: magic, JSON header, then named f32 tensor blocks.

    The header carries the model config, step counter, numpy generator state,
    and free-form metadata; tensors cover parameters plus first and second
    optimizer moments under 'opt_m.'/'opt_v.' prefixes. Written atomically
    (temp file then rename).
    """
    path = Path(path)
    header = {
        "extra": extra or {},
        "model": net.cfg.to_dict(),
        "rng_state": rng_state,
        "step": int(step),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors: list[tuple[str, torch.Tensor]] = list(net.state_dict().items())
    if moments is not None:
        for name, (m, v) in moments.items():
            tensors.append((f"opt_m.{name}", m))
            tensors.append((f"opt_v.{name}", v))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors:
            arr = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    cfg: ModelConfig
    tensors: dict
    step: int
    rng_state: dict | None
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such checkpoint: {path}")
    with open(path, "rb") as f:
        if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise IoError(f"{path}: bad checkpoint magic")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4")
            if data.size != n:
                raise IoError(f"{path}: truncated tensor {name!r}")
            tensors[name] = data.reshape(shape).copy()
    return Checkpoint(
        cfg=ModelConfig.from_dict(header["model"]),
        tensors=tensors,
        step=int(header["step"]),
        rng_state=header.get("rng_state"),
        extra=header.get("extra", {}),
    )


def net_from_checkpoint(ck: Checkpoint) -> VectorFieldNet:
    """Rebuild the network; every parameter tensor must match exactly."""
    net = VectorFieldNet(ck.cfg)
    state = net.state_dict()
    for name, ref in state.items():
        if name not in ck.tensors:
            raise IncompatibleCheckpoint(f"checkpoint missing tensor {name!r}")
        arr = ck.tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise IncompatibleCheckpoint(
                f"tensor {name!r} shape {arr.shape} != expected {tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    return net


def moments_from_checkpoint(ck: Checkpoint, net: VectorFieldNet) -> dict:
    """Optimizer moments keyed by parameter name; all pairs must be present."""
    moments = {}
    for name, p in net.named_parameters():
        mk, vk = f"opt_m.{name}", f"opt_v.{name}"
        if mk not in ck.tensors or vk not in ck.tensors:
            raise IncompatibleCheckpoint(f"checkpoint lacks optimizer state for {name!r}")
        moments[name] = (
            torch.from_numpy(ck.tensors[mk].copy()),
            torch.from_numpy(ck.tensors[vk].copy()),
        )
    return moments
