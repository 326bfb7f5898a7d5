"""Kernel mean-embedding distance between violation samples and the safe Dirac.

The quantity of interest is the squared RKHS distance between the empirical
embedding of the violation samples and the embedding of a point mass at zero:

    mmd2 = a K_ff a' - 2 a K_f0 b' + b K_00 b'

Because the desired distribution is a Dirac at 0, K_00 is a constant matrix
and K_f0 has identical columns, so the middle term collapses to a vector dot
product and the last term to a cached scalar.  Those collapses are the whole
point: per-point evaluation costs one n*n kernel block, not three.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidSpecError

RBF = "rbf"
POLYNOMIAL = "polynomial"

DEFAULT_BANDWIDTH_FLOOR = 1e-3

# Rounding can push a mathematically zero mmd2 a hair to either side of zero;
# anything inside this band is indistinguishable from the Dirac and snaps to 0.
NEGATIVE_CLAMP_TOL = 1e-12


def clamp_mmd(total: float) -> float:
    return float(total) if total > NEGATIVE_CLAMP_TOL else 0.0


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    sigma_k: float = 1.0
    degree: int = 2
    offset: float = 1.0

    @staticmethod
    def rbf(sigma_k: float) -> "KernelSpec":
        if sigma_k <= 0:
            raise InvalidSpecError("sigma_k must be positive")
        return KernelSpec(kind=RBF, sigma_k=float(sigma_k))

    @staticmethod
    def polynomial(degree: int, offset: float) -> "KernelSpec":
        if degree < 1:
            raise InvalidSpecError("degree must be a positive integer")
        if offset < 0:
            raise InvalidSpecError("offset must be non-negative")
        return KernelSpec(kind=POLYNOMIAL, degree=int(degree), offset=float(offset))


@dataclass(frozen=True)
class WeightVectors:
    """Probability weights for the sample and Dirac embeddings."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise ContractViolationError("alpha and beta must be equal-length vectors")
        for name, v in (("alpha", a), ("beta", b)):
            if abs(v.sum() - 1.0) > 1e-9:
                raise ContractViolationError(f"{name} must sum to 1 within 1e-9")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)


def uniform_weights(n: int) -> WeightVectors:
    if n < 1:
        raise ContractViolationError("n must be >= 1")
    w = np.full(n, 1.0 / n)
    return WeightVectors(alpha=w, beta=w.copy())


def kernel_eval(spec: KernelSpec, x, y):
    """Evaluate the kernel elementwise on scalars or broadcastable arrays."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if spec.kind == RBF:
        out = np.exp(-((x - y) ** 2) / (2.0 * spec.sigma_k**2))
    elif spec.kind == POLYNOMIAL:
        out = (x * y + spec.offset) ** spec.degree
    else:
        raise InvalidSpecError(f"unknown kernel kind {spec.kind!r}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MmdWorkspace:
    """Precomputed constants for repeated MMD evaluations at fixed n and kernel."""

    n: int
    spec: KernelSpec
    dirac_term: float  # b K_00 b' for weights summing to 1: just k(0, 0)

    @staticmethod
    def create(n: int, spec: KernelSpec) -> "MmdWorkspace":
        if n < 1:
            raise ContractViolationError("n must be >= 1")
        return MmdWorkspace(n=n, spec=spec, dirac_term=float(kernel_eval(spec, 0.0, 0.0)))


def _values(v) -> np.ndarray:
    values = getattr(v, "values", v)
    return np.asarray(values, dtype=float).reshape(-1)


def build_kff(v, spec: KernelSpec) -> np.ndarray:
    """Dense symmetric kernel matrix; upper triangle evaluated once, mirrored."""
    f = _values(v)
    n = f.shape[0]
    if n < 1:
        raise ContractViolationError("need n >= 1 samples")
    iu, ju = np.triu_indices(n)
    upper = kernel_eval(spec, f[iu], f[ju])
    out = np.empty((n, n))
    out[iu, ju] = upper
    out[ju, iu] = upper
    return out


def kernel_vs_zero(v, spec: KernelSpec) -> np.ndarray:
    """The rank-1 cross block against the Dirac, stored as a length-n vector."""
    f = _values(v)
    return np.asarray(kernel_eval(spec, f, 0.0), dtype=float).reshape(-1)


def mmd_squared(v, w: WeightVectors, ws: MmdWorkspace) -> float:
    """Matrix-form squared MMD against the Dirac at zero, clamped at 0."""
    f = _values(v)
    if not (f.shape[0] == w.alpha.shape[0] == ws.n):
        raise ContractViolationError(
            f"length mismatch: samples {f.shape[0]}, weights {w.alpha.shape[0]}, workspace {ws.n}"
        )
    kff = build_kff(f, ws.spec)
    kf0 = kernel_vs_zero(f, ws.spec)
    total = float(w.alpha @ kff @ w.alpha) - 2.0 * float(w.alpha @ kf0) * float(
        w.beta.sum()
    ) + ws.dirac_term
    return clamp_mmd(total)


def mmd_squared_naive(v, w: WeightVectors, spec: KernelSpec) -> float:
    """Literal double-sum expansion of the three embedding inner products.

    Kept deliberately loop-based as the independent oracle for the matrix
    form; do not optimize.
    """
    f = _values(v)
    n = f.shape[0]
    if n != w.alpha.shape[0]:
        raise ContractViolationError("length mismatch")
    a, b = w.alpha, w.beta
    t1 = 0.0
    t2 = 0.0
    t3 = 0.0
    for i in range(n):
        for j in range(n):
            t1 += a[i] * a[j] * kernel_eval(spec, f[i], f[j])
            t2 += a[i] * b[j] * kernel_eval(spec, f[i], 0.0)
            t3 += b[i] * b[j] * kernel_eval(spec, 0.0, 0.0)
    return t1 - 2.0 * t2 + t3


def mmd_squared_rbf_batch(viol: np.ndarray, sigma_k: float) -> np.ndarray:
    """Uniform-weight RBF squared MMD for a batch of sample rows.

    viol has shape (B, n): B independent violation sample sets.  This is the
    planner hot path; equivalence with mmd_squared is covered by tests.
    """
    v = np.asarray(viol, dtype=float)
    if v.ndim != 2:
        raise ContractViolationError("viol must be 2-D (batch, samples)")
    inv = 1.0 / (2.0 * sigma_k**2)
    out = np.empty(v.shape[0])
    # chunk the (B, n, n) pairwise block to bound memory
    step = max(1, int(4_000_000 // max(v.shape[1] ** 2, 1)))
    for s in range(0, v.shape[0], step):
        block = v[s : s + step]
        d2 = (block[:, :, None] - block[:, None, :]) ** 2
        t1 = np.exp(-d2 * inv).mean(axis=(1, 2))
        t2 = np.exp(-(block**2) * inv).mean(axis=1)
        out[s : s + step] = t1 - 2.0 * t2 + 1.0
    return np.where(out > NEGATIVE_CLAMP_TOL, out, 0.0)


def median_bandwidth(values, floor: float = DEFAULT_BANDWIDTH_FLOOR) -> float:
    """Median pairwise absolute difference of the pooled samples, floored.

    Pools larger than 512 are thinned by even striding first; the heuristic
    does not need more.
    """
    f = _values(values)
    if f.size == 0:
        raise ContractViolationError("median_bandwidth needs at least one sample")
    if f.size > 512:
        f = f[:: int(np.ceil(f.size / 512))]
    iu, ju = np.triu_indices(f.size, k=1)
    if iu.size == 0:
        return max(float(floor), 0.0) or float(floor)
    med = float(np.median(np.abs(f[iu] - f[ju])))
    return max(med, float(floor))
