"""Diaconis augmentation: random orthogonal rotations of speaker embeddings.

``H = D H_1 ... H_{n-1}`` with ``H_j = blockdiag(I_{j-1}, Hbar_j)`` and each
``Hbar_j`` a Householder reflection in ``R^{n-j+1}``. The constrained variant
shifts the first coordinate of every reflection vector by ``-scale``; larger
scales push each ``Hbar_j`` towards ``diag(-1, I)`` and the product towards
the identity.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .meeting_sim import EmbeddingSequence


@dataclass(frozen=True)
class RotationSpec:
    n: int
    scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("rotation dimension must be >= 2")
        if not self.scale >= 0:
            raise ValueError("scale must be nonnegative")


def householder(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    vv = float(v @ v)
    if vv == 0.0:
        raise ValueError("Householder vector must be nonzero")
    return np.eye(v.shape[0]) - (2.0 / vv) * np.outer(v, v)


def _reflection_vector(m: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(m)
    if np.isinf(scale):
        # limit of v - scale*e1 after normalisation
        return np.eye(m)[0] * -1.0
    v[0] -= scale
    return v


def _compose(n: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    h = np.eye(n)
    d = np.ones(n)
    for j in range(1, n):
        m = n - j + 1
        hbar = householder(_reflection_vector(m, scale, rng))
        d[j - 1] = 1.0 if hbar[0, 0] >= 0 else -1.0
        # right-multiply by blockdiag(I, hbar) touching only the trailing columns
        h[:, j - 1:] = h[:, j - 1:] @ hbar
    return d[:, None] * h


def constrained_rotation(spec: RotationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    return _compose(spec.n, spec.scale, rng)


def random_orthogonal(spec: RotationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Unconstrained draw; identical to ``constrained_rotation`` at scale 0."""
    return constrained_rotation(dataclasses.replace(spec, scale=0.0), rng)


def rotation_angles(n: int, scale: float, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Angle in degrees between a fresh normal ``x`` and ``Hx``, one per draw."""
    out = np.empty(num_samples)
    for i in range(num_samples):
        h = _compose(n, scale, rng)
        x = rng.standard_normal(n)
        cos = float(x @ h @ x) / float(x @ x)
        out[i] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return out


def mean_abs_rotation_angle(n: int, scale: float, num_samples: int, seed: int) -> float:
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    return float(np.mean(np.abs(rotation_angles(n, scale, num_samples, rng))))


def apply_cda(
    embeddings: EmbeddingSequence,
    c_range: tuple[float, float] = (0.0, 10.0),
    seed: int | None = None,
    rng: np.random.Generator | None = None,
    dim: int | None = None,
) -> EmbeddingSequence:
    """Rotate every window row of one training example by a single draw of H."""
    if rng is None:
        rng = np.random.default_rng(seed)
    n = embeddings.windows.shape[1] if dim is None else dim
    if n < 2:
        raise ValueError("embedding dimension must be >= 2")
    lo, hi = c_range
    scale = lo if lo == hi else float(rng.uniform(lo, hi))
    h = _compose(n, scale, rng)
    return EmbeddingSequence(apply_to_rows(embeddings.windows, h), list(embeddings.segment_spans), embeddings.centres)


def apply_to_rows(rows: np.ndarray, h: np.ndarray) -> np.ndarray:
    if rows.shape[-1] != h.shape[0]:
        raise ValueError(f"dimension mismatch: rows {rows.shape[-1]} vs rotation {h.shape[0]}")
    return rows @ h.T
