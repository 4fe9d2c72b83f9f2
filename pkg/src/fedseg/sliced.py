"""Sliced squared 2-Wasserstein distance between embedding batches.

The estimate averages, over L random unit directions, the exact 1D squared
Wasserstein distance between the projected point sets: project both batches
onto each direction, sort both projected lists, pair by rank, and average
the squared gaps. For equal batch sizes the rank pairing is exact; unequal
sizes are matched by interpolating the smaller sorted list at the larger
list's quantile positions.

Gradients flow through projection and the rank matching, with the sorting
permutation treated as locally constant.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, matmul, mul, sub, take_per_column, tsum


@dataclass(frozen=True)
class ProjectionSet:
    """L unit directions in R^d, reproducible from the stored seed."""

    count: int
    directions: np.ndarray  # (L, d), rows have unit norm
    seed: int

    @property
    def dim(self) -> int:
        return self.directions.shape[1]


@dataclass
class EmbeddingBatch:
    """M latent codes of dimension d plus the tag of the originating domain."""

    points: Tensor  # (M, d)
    domain_tag: str = ""

    def __post_init__(self):
        self.points = as_tensor(self.points)
        if self.points.ndim != 2:
            raise ValueError(f"embedding batch must be 2-D, got shape {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("embedding batch is empty")
        if not np.all(np.isfinite(self.points.data)):
            raise ValueError("embedding batch contains non-finite values")

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def sample_projections(L: int, d: int, seed: int) -> ProjectionSet:
    """Draw L directions uniformly on the unit sphere in R^d."""
    if L < 1 or d < 1:
        raise ValueError(f"need L >= 1 and d >= 1, got L={L}, d={d}")
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((L, d))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    while np.any(norms < 1e-12):  # essentially impossible, but stay total
        bad = norms[:, 0] < 1e-12
        vecs[bad] = rng.standard_normal((bad.sum(), d))
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    return ProjectionSet(count=L, directions=vecs / norms, seed=seed)


def _quantile_weights(m: int, n: int) -> np.ndarray:
    """(n, m) interpolation matrix mapping m sorted values to n rank positions.

    Row i linearly interpolates the sorted list at fractional index
    i * (m-1) / (n-1); identity when m == n.
    """
    if m == n:
        return np.eye(m)
    w = np.zeros((n, m))
    pos = np.linspace(0.0, m - 1.0, n) if n > 1 else np.array([(m - 1) / 2.0])
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, m - 1)
    frac = pos - lo
    w[np.arange(n), lo] += 1.0 - frac
    w[np.arange(n), hi] += frac
    return w


def _sorted_projections(batch: EmbeddingBatch, proj: ProjectionSet, n_out: int) -> Tensor:
    projected = matmul(batch.points, Tensor(proj.directions.T))  # (M, L)
    order = np.argsort(projected.data, axis=0, kind="stable")
    ordered = take_per_column(projected, order)
    if batch.count == n_out:
        return ordered
    return matmul(Tensor(_quantile_weights(batch.count, n_out)), ordered)


def swd2(a: EmbeddingBatch, b: EmbeddingBatch, proj: ProjectionSet) -> Tensor:
    """Sliced squared 2-Wasserstein distance as a differentiable scalar."""
    if a.dim != b.dim:
        raise ValueError(f"embedding dimensions differ: {a.dim} vs {b.dim}")
    if proj.dim != a.dim:
        raise ValueError(f"projection dimension {proj.dim} != embedding dimension {a.dim}")
    n = max(a.count, b.count)
    sa = _sorted_projections(a, proj, n)
    sb = _sorted_projections(b, proj, n)
    gaps = sub(sa, sb)
    return mul(tsum(mul(gaps, gaps)), 1.0 / (proj.count * n))


def exact_w2_1d(a, b) -> float:
    """Exact squared 2-Wasserstein distance between two 1D empirical measures.

    Equals the minimum over all permutation couplings of the mean squared
    transport cost, attained by matching sorted ranks.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValueError("empty input")
    return float(np.mean((np.sort(a) - np.sort(b)) ** 2))
