"""Discrete acoustic units: k-means codebook learning and sequence ops.

Units are nearest-centroid indices of feature frames. Two reserved ids sit
just past the codebook: FILLER (= k) pads collapsed sequences to a frame
budget, and BATCH_PAD (= k + 1) aligns variable-length utterances inside a
training batch and never contributes to the loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateData, InvalidInput, IoError, LengthOverflow

FEATURE_MAGIC = b"UFFEA1"
CODEBOOK_MAGIC = b"UFCBK1"

_CHUNK_ROWS = 2048


def filler_id(k: int) -> int:
    """Pad-to-frame-budget id, one past the last codebook entry."""
    return int(k)


def batch_pad_id(k: int) -> int:
    """Trainer-only batch alignment id; excluded from every loss."""
    return int(k) + 1


def unit_vocab_size(k: int) -> int:
    """Embedding vocabulary covering codebook ids plus both reserved ids."""
    return int(k) + 2


def _as_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInput(f"feature matrix must be 2-D, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidInput(f"feature matrix must be nonempty, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("feature matrix contains non-finite values")
    return x


@dataclass(frozen=True)
class KMeansMeta:
    seed: int
    iterations: int
    inertia: float
    inertia_history: tuple[float, ...] = ()


@dataclass(frozen=True)
class Codebook:
    """k-means centroids, shape (k, feature_dim), rows distinct."""

    centroids: np.ndarray
    training_meta: KMeansMeta | None = None

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise InvalidInput(f"codebook must be (k >= 2, d), got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInput("codebook contains non-finite centroids")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise DegenerateData("codebook has duplicate centroids")
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.centroids.shape[1])


@dataclass(frozen=True)
class UnitSequence:
    """Integer unit ids; collapsed=True means no two adjacent ids are equal."""

    ids: np.ndarray
    collapsed: bool

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1:
            raise InvalidInput(f"unit ids must be 1-D, got shape {ids.shape}")
        if ids.size and ids.min() < 0:
            raise InvalidInput("unit ids must be non-negative")
        if self.collapsed and ids.size > 1 and np.any(ids[1:] == ids[:-1]):
            raise InvalidInput("collapsed sequence has adjacent duplicates")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass(frozen=True)
class PaddedUnits:
    """Collapsed units extended to target_len with trailing FILLER ids."""

    ids: np.ndarray
    target_len: int
    k: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size != self.target_len:
            raise InvalidInput(
                f"padded ids must have length {self.target_len}, got {ids.size}"
            )
        fill = filler_id(self.k)
        if ids.size and (ids.min() < 0 or ids.max() > fill):
            raise InvalidInput("padded ids outside [0, filler]")
        fillers = np.flatnonzero(ids == fill)
        if fillers.size and not np.array_equal(
            fillers, np.arange(ids.size - fillers.size, ids.size)
        ):
            raise InvalidInput("filler ids must form a suffix")
        object.__setattr__(self, "ids", ids)

    @property
    def content_len(self) -> int:
        return int(np.sum(self.ids != filler_id(self.k)))


def _sq_dists(x: np.ndarray, cent: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, chunked to bound temporaries."""
    n = x.shape[0]
    out = np.empty((n, cent.shape[0]))
    for s in range(0, n, _CHUNK_ROWS):
        blk = x[s : s + _CHUNK_ROWS]
        out[s : s + blk.shape[0]] = ((blk[:, None, :] - cent[None]) ** 2).sum(axis=2)
    return out


def _assign_full(x: np.ndarray, cent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(x, cent)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(x.shape[0]), labels]


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total > 0:
            pick = int(rng.choice(n, p=d2 / total))
        else:
            # All mass sits on already-covered points; fall back to any unused index.
            unused = np.setdiff1d(np.arange(n), np.array(chosen))
            pick = int(rng.choice(unused)) if unused.size else int(rng.integers(n))
        chosen.append(pick)
        d2 = np.minimum(d2, ((x - x[pick]) ** 2).sum(axis=1))
    return x[np.array(chosen)].copy()


def _repair_empty(x, cent, labels, d2):
    # Empty clusters grab the point farthest from its current centroid.
    for _ in range(cent.shape[0]):
        counts = np.bincount(labels, minlength=cent.shape[0])
        empties = np.flatnonzero(counts == 0)
        if empties.size == 0:
            break
        far = int(np.argmax(d2))
        cent[empties[0]] = x[far]
        labels, d2 = _assign_full(x, cent)
    return labels, d2


def _lloyd(x, k, rng, max_iters, tol):
    cent = _kmeanspp_init(x, k, rng)
    history = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        labels, d2 = _assign_full(x, cent)
        labels, d2 = _repair_empty(x, cent, labels, d2)
        history.append(float(d2.sum()))
        sums = np.zeros_like(cent)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        new = sums / counts[:, None]
        shift = float(np.sqrt(((new - cent) ** 2).sum(axis=1)).max())
        cent = new
        if shift < tol:
            break
    labels, d2 = _assign_full(x, cent)
    labels, d2 = _repair_empty(x, cent, labels, d2)
    history.append(float(d2.sum()))
    return cent, iterations, history


def fit_kmeans(
    features,
    k: int,
    seed: int,
    *,
    n_init: int = 10,
    max_iters: int = 300,
    tol: float = 1e-4,
) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding and restarts.

    Runs n_init independent restarts from a spawned seed sequence and keeps
    the lowest final inertia. Assignment inertia is recorded once per Lloyd
    iteration (plus a final value at the converged centroids) and is
    non-increasing within a run. Empty clusters are repaired by reseeding at
    the point currently farthest from its centroid.
    """
    x = _as_features(features)
    if k < 2:
        raise InvalidInput(f"k must be >= 2, got {k}")
    if x.shape[0] < k:
        raise InvalidInput(f"need at least k={k} rows, got {x.shape[0]}")
    if np.unique(x, axis=0).shape[0] == 1:
        raise DegenerateData("all feature rows are identical")
    if n_init < 1:
        raise InvalidInput("n_init must be >= 1")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.Generator(np.random.PCG64(child))
        cent, iterations, history = _lloyd(x, k, rng, max_iters, tol)
        if best is None or history[-1] < best[0]:
            best = (history[-1], cent, iterations, history)
    inertia, cent, iterations, history = best
    meta = KMeansMeta(int(seed), iterations, float(inertia), tuple(history))
    return Codebook(cent, meta)


def assign(features, codebook: Codebook) -> UnitSequence:
    """Nearest-centroid ids per frame; ties resolve to the lowest index."""
    x = _as_features(features)
    if x.shape[1] != codebook.feature_dim:
        raise InvalidInput(
            f"feature dim {x.shape[1]} != codebook dim {codebook.feature_dim}"
        )
    labels, _ = _assign_full(x, codebook.centroids)
    return UnitSequence(labels.astype(np.int64), collapsed=False)


def collapse(u: UnitSequence) -> UnitSequence:
    """Remove consecutive duplicate ids (rate normalization). Idempotent."""
    ids = u.ids
    if ids.size == 0:
        return UnitSequence(ids.copy(), collapsed=True)
    keep = np.concatenate(([True], ids[1:] != ids[:-1]))
    return UnitSequence(ids[keep], collapsed=True)


def pad_to_frames(u: UnitSequence, target_len: int, k: int) -> PaddedUnits:
    """Extend a collapsed sequence to target_len with trailing FILLER ids."""
    if not u.collapsed:
        raise InvalidInput("pad_to_frames requires a collapsed sequence")
    if target_len < 1:
        raise InvalidInput(f"target_len must be >= 1, got {target_len}")
    if len(u) > target_len:
        raise LengthOverflow(f"{len(u)} units exceed target of {target_len} frames")
    if u.ids.size and u.ids.max() >= k:
        raise InvalidInput("unit ids exceed codebook size")
    ids = np.full(target_len, filler_id(k), dtype=np.int64)
    ids[: len(u)] = u.ids
    return PaddedUnits(ids, target_len, k)


def write_features(path, features) -> None:
    """Binary feature file: magic, u32 T, u32 D, little-endian f32 rows."""
    x = _as_features(features).astype("<f4")
    with open(Path(path), "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", x.shape[0], x.shape[1]))
        f.write(np.ascontiguousarray(x).tobytes(order="C"))


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    with open(path, "rb") as f:
        if f.read(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
            raise IoError(f"{path}: bad feature file magic")
        t, d = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * t * d), dtype="<f4")
    if data.size != t * d:
        raise IoError(f"{path}: truncated payload")
    return data.reshape(t, d).astype(np.float64)


def write_codebook(path, codebook: Codebook) -> None:
    """Binary codebook: magic, u32 k, u32 D, f32 centroids, u64 seed."""
    c = codebook.centroids.astype("<f4")
    seed = codebook.training_meta.seed if codebook.training_meta else 0
    with open(Path(path), "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<II", c.shape[0], c.shape[1]))
        f.write(np.ascontiguousarray(c).tobytes(order="C"))
        f.write(struct.pack("<Q", int(seed)))


def read_codebook(path) -> Codebook:
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    with open(path, "rb") as f:
        if f.read(len(CODEBOOK_MAGIC)) != CODEBOOK_MAGIC:
            raise IoError(f"{path}: bad codebook magic")
        k, d = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * k * d), dtype="<f4")
        if data.size != k * d:
            raise IoError(f"{path}: truncated payload")
        (seed,) = struct.unpack("<Q", f.read(8))
    meta = KMeansMeta(int(seed), 0, float("nan"))
    return Codebook(data.reshape(k, d).astype(np.float64), meta)


def write_units(path, u: UnitSequence, k: int) -> None:
    """Text unit file: header '#collapsed=<bool> k=<K>', one id per line."""
    flag = "true" if u.collapsed else "false"
    with open(Path(path), "w") as f:
        f.write(f"#collapsed={flag} k={int(k)}\n")
        for i in u.ids:
            f.write(f"{int(i)}\n")


def read_units(path) -> tuple[UnitSequence, int]:
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("#collapsed="):
            raise IoError(f"{path}: missing unit file header")
        try:
            flag_part, k_part = header[1:].split(" ")
            collapsed = {"true": True, "false": False}[flag_part.split("=")[1]]
            k = int(k_part.split("=")[1])
        except (ValueError, KeyError, IndexError) as e:
            raise IoError(f"{path}: malformed header {header!r}") from e
        ids = [int(line) for line in f if line.strip()]
    return UnitSequence(np.array(ids, dtype=np.int64), collapsed), k
