"""Conditional flow matching over mel frames with masked infilling.

The probability path conditioned on a data sample x1 is

    p_t(x | x1) = N(x ; t * x1, (1 - (1 - sigma_min) * t)^2 I),

whose marginal vector field has the closed form

    u_t(x | x1) = (x1 - (1 - sigma_min) * x) / (1 - (1 - sigma_min) * t).

On a path sample x_t = t * x1 + (1 - (1 - sigma_min) * t) * x0 this reduces
to u_t = x1 - (1 - sigma_min) * x0, which is constant in t; with
sigma_min = 0 it is exactly the straight-line displacement x1 - x0.

Training regresses a network v(x_t) onto u_t on masked frames only. The
frame mask m selects the region to infill; the complement (1 - m) * x1 is
presented to the network as clean context.

All math here is array-library agnostic: inputs may be numpy arrays or torch
tensors and the result follows the input type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .units import PaddedUnits


@dataclass(frozen=True)
class PathConfig:
    """Gaussian path parameters; sigma_min is the terminal noise scale."""

    sigma_min: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise InvalidInput(f"sigma_min must be in [0, 1), got {self.sigma_min}")


@dataclass(frozen=True)
class MaskSpec:
    """Contiguous-span mask: span length is a uniform fraction of T."""

    min_frac: float = 0.7
    max_frac: float = 1.0
    mode: str = "contiguous_span"

    def __post_init__(self):
        if self.mode != "contiguous_span":
            raise InvalidInput(f"unknown mask mode {self.mode!r}")
        if not 0.0 < self.min_frac <= self.max_frac <= 1.0:
            raise InvalidInput(
                f"need 0 < min_frac <= max_frac <= 1, got ({self.min_frac}, {self.max_frac})"
            )


@dataclass(frozen=True)
class FlowBatch:
    """One utterance worth of flow-matching regression targets."""

    x1: np.ndarray
    x0: np.ndarray
    t: float
    x_t: np.ndarray
    u_t: np.ndarray
    mask: np.ndarray
    x_ctx: np.ndarray
    units: PaddedUnits


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise InvalidInput(f"t must be in [0, 1], got {t}")
    return t


def sample_conditional_path(x1, t: float, noise, cfg: PathConfig):
    """Draw x_t = t * x1 + (1 - (1 - sigma_min) * t) * noise.

    At t = 0 this is the pure noise sample; at t = 1 it is x1 plus
    sigma_min-scaled noise.
    """
    t = _check_t(t)
    if x1.shape != noise.shape:
        raise InvalidInput(f"shape mismatch: x1 {x1.shape} vs noise {noise.shape}")
    return t * x1 + (1.0 - (1.0 - cfg.sigma_min) * t) * noise


def target_vector_field(x, x1, t: float, cfg: PathConfig):
    """Regression target u_t(x | x1) of the conditional Gaussian path.

    The denominator 1 - (1 - sigma_min) * t is floored at sigma_min so the
    t -> 1 limit stays finite.
    """
    t = _check_t(t)
    if x.shape != x1.shape:
        raise InvalidInput(f"shape mismatch: x {x.shape} vs x1 {x1.shape}")
    denom = 1.0 - (1.0 - cfg.sigma_min) * t
    floor = max(cfg.sigma_min, 1e-12)
    if denom < floor:
        denom = floor
    return (x1 - (1.0 - cfg.sigma_min) * x) / denom


def sample_mask(num_frames: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Binary (T,) float32 mask with one contiguous run of ones.

    Run length is round(r * T) for r ~ U[min_frac, max_frac], clamped to at
    least one frame; the start position is uniform over valid offsets.
    """
    if num_frames < 1:
        raise InvalidInput(f"num_frames must be >= 1, got {num_frames}")
    r = rng.uniform(spec.min_frac, spec.max_frac)
    length = int(round(r * num_frames))
    length = min(max(length, 1), num_frames)
    start = int(rng.integers(0, num_frames - length + 1))
    mask = np.zeros(num_frames, dtype=np.float32)
    mask[start : start + length] = 1.0
    return mask


def cfm_loss(v_pred, u_target, mask):
    """Mean squared error restricted to masked frames.

    mask is a length-T binary vector; rows of v_pred and u_target where
    mask is nonzero contribute, all channels equally. Raises InvalidInput
    when the mask selects nothing.
    """
    if v_pred.shape != u_target.shape:
        raise InvalidInput(
            f"shape mismatch: v_pred {v_pred.shape} vs u_target {u_target.shape}"
        )
    if mask.shape[0] != v_pred.shape[0]:
        raise InvalidInput(
            f"mask length {mask.shape[0]} != frame count {v_pred.shape[0]}"
        )
    keep = mask != 0
    if not bool(keep.any()):
        raise InvalidInput("mask selects no frames")
    diff = v_pred - u_target
    return (diff * diff)[keep].mean()


def make_flow_batch(
    x1: np.ndarray,
    units: PaddedUnits,
    spec: MaskSpec,
    cfg: PathConfig,
    rng: np.random.Generator,
) -> FlowBatch:
    """Draw (t, noise, mask) and assemble one training example.

    Consumes exactly one uniform for t, one standard normal field for x0,
    and one mask draw, in that order, so a seeded generator reproduces the
    batch bit for bit. x_ctx is the target with masked frames zeroed.
    """
    x1 = np.asarray(x1, dtype=np.float32)
    if x1.ndim != 2:
        raise InvalidInput(f"x1 must be (T, n_mels), got shape {x1.shape}")
    if not isinstance(units, PaddedUnits) or units.target_len != x1.shape[0]:
        raise InvalidInput("units must be PaddedUnits matching x1 frame count")
    t = float(rng.uniform(0.0, 1.0))
    x0 = rng.standard_normal(x1.shape, dtype=np.float32)
    mask = sample_mask(x1.shape[0], spec, rng)
    x_t = sample_conditional_path(x1, t, x0, cfg)
    u_t = target_vector_field(x_t, x1, t, cfg)
    x_ctx = x1 * (1.0 - mask)[:, None]
    return FlowBatch(x1=x1, x0=x0, t=t, x_t=x_t, u_t=u_t, mask=mask, x_ctx=x_ctx, units=units)
