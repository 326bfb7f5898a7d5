"""Noise models over measured distances and the induced violation samples.

A violation sample is max(0, r_safe - d) for a noisy distance draw d: zero
exactly when the draw clears the safety radius, positive otherwise.  The
planner treats the noise model as a black box; only draw() and std() are
assumed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ContractViolationError, InvalidSpecError
from .world import DistanceField, query_distance

GAUSSIAN = "gaussian"
MIXTURE = "mixture"
EMPIRICAL = "empirical"


@dataclass(frozen=True)
class NoiseModel:
    """Additive zero-or-known-mean noise on measured distances.

    Use the constructors; the raw dataclass fields follow the active kind:
    ``sigma`` for gaussian, ``components`` as (weight, mu, sigma) triples for
    mixture, ``pool`` for empirical resampling.
    """

    kind: str
    sigma: float = 0.0
    components: tuple[tuple[float, float, float], ...] = ()
    pool: tuple[float, ...] = ()

    @staticmethod
    def gaussian(sigma: float) -> "NoiseModel":
        if sigma < 0:
            raise InvalidSpecError("sigma must be non-negative")
        return NoiseModel(kind=GAUSSIAN, sigma=float(sigma))

    @staticmethod
    def mixture(components) -> "NoiseModel":
        comps = tuple((float(w), float(m), float(s)) for w, m, s in components)
        if not comps:
            raise InvalidSpecError("mixture needs at least one component")
        total = sum(w for w, _, _ in comps)
        if total <= 0 or any(w < 0 for w, _, _ in comps) or any(
            s < 0 for _, _, s in comps
        ):
            raise InvalidSpecError("mixture weights/sigmas must be non-negative")
        comps = tuple((w / total, m, s) for w, m, s in comps)
        return NoiseModel(kind=MIXTURE, components=comps)

    @staticmethod
    def empirical(values) -> "NoiseModel":
        pool = tuple(float(v) for v in values)
        if not pool:
            raise InvalidSpecError("empirical pool must be non-empty")
        return NoiseModel(kind=EMPIRICAL, pool=pool)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n < 0:
            raise ContractViolationError("n must be non-negative")
        if self.kind == GAUSSIAN:
            if self.sigma == 0.0:
                return np.zeros(n)
            return rng.normal(0.0, self.sigma, size=n)
        if self.kind == MIXTURE:
            weights = np.array([w for w, _, _ in self.components])
            mus = np.array([m for _, m, _ in self.components])
            sigmas = np.array([s for _, _, s in self.components])
            which = rng.choice(len(weights), size=n, p=weights)
            return rng.normal(mus[which], sigmas[which])
        if self.kind == EMPIRICAL:
            pool = np.asarray(self.pool)
            return pool[rng.integers(0, len(pool), size=n)]
        raise InvalidSpecError(f"unknown noise kind {self.kind!r}")

    def cdf(self, x) -> np.ndarray:
        """P(draw < x), vectorized over x.

        Strict inequality to match the violation convention (a reading
        violates when distance plus noise falls below the safe radius);
        the continuous models are unaffected, the empirical pool uses the
        strict count.
        """
        x = np.asarray(x, dtype=float)
        if self.kind == GAUSSIAN:
            if self.sigma == 0.0:
                return (x > 0.0).astype(float)
            return ndtr(x / self.sigma)
        if self.kind == MIXTURE:
            out = np.zeros_like(x)
            for w, mu, s in self.components:
                if s == 0.0:
                    out = out + w * (x > mu)
                else:
                    out = out + w * ndtr((x - mu) / s)
            return out
        if self.kind == EMPIRICAL:
            pool = np.asarray(self.pool)
            return (pool[None, ...] < x[..., None]).mean(axis=-1)
        raise InvalidSpecError(f"unknown noise kind {self.kind!r}")

    def std(self) -> float:
        """Standard deviation of the noise; used by inflation-style baselines."""
        if self.kind == GAUSSIAN:
            return self.sigma
        if self.kind == MIXTURE:
            w = np.array([c[0] for c in self.components])
            mu = np.array([c[1] for c in self.components])
            s = np.array([c[2] for c in self.components])
            mean = float(np.sum(w * mu))
            var = float(np.sum(w * (s**2 + mu**2)) - mean**2)
            return float(np.sqrt(max(var, 0.0)))
        if self.kind == EMPIRICAL:
            return float(np.std(np.asarray(self.pool)))
        raise InvalidSpecError(f"unknown noise kind {self.kind!r}")


def load_noise_file(path: str) -> NoiseModel:
    """Read an empirical noise pool: plain text, one sample per line.

    Blank lines and lines starting with '#' are skipped.
    """
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                values.append(float(text))
            except ValueError as exc:
                raise InvalidSpecError(f"{path}:{lineno}: not a number: {text!r}") from exc
    return NoiseModel.empirical(values)


@dataclass(frozen=True)
class DistanceSamples:
    """Noisy distance draws at one query point (clamped at 0: distances are physical)."""

    values: np.ndarray
    point: tuple[float, float, float]
    d_measured: float


@dataclass(frozen=True)
class ViolationSamples:
    """Safety-margin violations max(0, r_safe - d); all entries non-negative."""

    values: np.ndarray
    r_safe: float

    def __post_init__(self):
        if np.any(np.asarray(self.values) < 0):
            raise ContractViolationError("violation samples must be non-negative")


def sample_distances(
    field: DistanceField,
    point,
    model: NoiseModel,
    rng: np.random.Generator,
    n: int,
) -> DistanceSamples:
    """Draw n noisy distances at a world point; negatives clamp to zero."""
    if n <= 0:
        raise ContractViolationError("need at least one sample")
    d = query_distance(field, point)
    values = np.maximum(d + model.draw(rng, n), 0.0)
    return DistanceSamples(values=values, point=tuple(float(c) for c in point), d_measured=d)


def to_violations(samples, r_safe: float) -> ViolationSamples:
    """Map distance samples to violation samples for safety radius r_safe."""
    if r_safe <= 0:
        raise InvalidSpecError("r_safe must be positive")
    values = samples.values if isinstance(samples, DistanceSamples) else np.asarray(samples)
    return ViolationSamples(values=np.maximum(0.0, r_safe - values), r_safe=float(r_safe))


def empirical_violation_probability(violations: ViolationSamples) -> float:
    """Fraction of strictly positive violation samples."""
    values = np.asarray(violations.values)
    if values.size == 0:
        raise ContractViolationError("empty violation sample set")
    return float(np.mean(values > 0.0))
