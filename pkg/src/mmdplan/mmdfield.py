"""Point-wise collision-risk cost: MMD of the violation distribution.

Bundles the measured distance field, the sensor noise model, and the kernel
configuration so that both the graph search and the sampling refiner score a
world point the same way.  Draws at a point are keyed by the voxel that
contains it, which makes every evaluation deterministic and replayable for a
fixed trial seed, including re-evaluation of carried-over elite samples.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .embedding import Autoencoder, encode, mmd_latent
from .errors import ContractViolationError
from .rkhs import (
    KernelSpec,
    MmdWorkspace,
    RBF,
    WeightVectors,
    mmd_squared,
    mmd_squared_rbf_batch,
    uniform_weights,
)
from .rng import stream
from .uncertainty import NoiseModel
from .world import (
    DistanceField,
    inflated_bounds_mask,
    query_distance,
    query_distance_batch,
)


@dataclass(frozen=True)
class MmdCostField:
    """Everything needed to score a point's collision risk.

    With an encoder attached, the violation vector is compressed to its
    latent coordinates first and the kernel distance is taken over those.
    """

    field: DistanceField
    noise: NoiseModel
    kernel: KernelSpec
    n_samples: int
    r_safe: float
    seed: int
    encoder: Autoencoder | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ContractViolationError("n_samples must be >= 1")
        if self.r_safe <= 0:
            raise ContractViolationError("r_safe must be positive")
        if self.encoder is not None and self.encoder.m != self.n_samples:
            raise ContractViolationError(
                f"encoder expects {self.encoder.m} inputs, field draws {self.n_samples}"
            )
        # voxel -> frozen noise draws; deriving a stream per query dominates
        # search profiles, and the draws are a pure function of the key.
        # Small grids get a dense (voxel, draw) table so bulk lookups are a
        # single fancy index; large grids fall back to a per-voxel dict.
        n_vox = int(np.prod(self.field.dims))
        if n_vox * self.n_samples <= 5_000_000:
            object.__setattr__(self, "_dense_eps", np.empty((n_vox, self.n_samples)))
            object.__setattr__(self, "_dense_filled", np.zeros(n_vox, dtype=bool))
        else:
            object.__setattr__(self, "_dense_eps", None)
            object.__setattr__(self, "_dense_filled", None)
        object.__setattr__(self, "_eps_cache", {})

    def _eps_rows(self, idx3: np.ndarray) -> np.ndarray:
        """Noise-draw rows for an (n, 3) array of clipped voxel indices."""
        dims = self.field.dims
        dense = self._dense_eps
        if dense is not None:
            rid = (idx3[:, 0] * dims[1] + idx3[:, 1]) * dims[2] + idx3[:, 2]
            filled = self._dense_filled
            for r in np.unique(rid[~filled[rid]]):
                key = np.unravel_index(int(r), dims)
                dense[r] = self.noise.draw(
                    stream(self.seed, "mmd-node", int(key[0]), int(key[1]), int(key[2])),
                    self.n_samples,
                )
                filled[r] = True
            return dense[rid]
        cache: dict = self._eps_cache
        eps = np.empty((len(idx3), self.n_samples))
        for i, row in enumerate(idx3):
            key = (int(row[0]), int(row[1]), int(row[2]))
            cached = cache.get(key)
            if cached is None:
                cached = self.noise.draw(stream(self.seed, "mmd-node", *key), self.n_samples)
                cached.flags.writeable = False
                cache[key] = cached
            eps[i] = cached
        return eps

    def _eps_at(self, point) -> np.ndarray:
        return self._eps_rows(np.asarray([self.voxel_index(point)]))[0]

    @cached_property
    def workspace(self) -> MmdWorkspace:
        n = self.n_samples if self.encoder is None else self.encoder.p
        return MmdWorkspace.create(n, self.kernel)

    @cached_property
    def weights(self) -> WeightVectors:
        n = self.n_samples if self.encoder is None else self.encoder.p
        return uniform_weights(n)

    def voxel_index(self, point) -> tuple[int, int, int]:
        """Containing voxel of a world point, clipped to the grid."""
        p = np.asarray(point, dtype=float)
        idx = np.floor((p - self.field.origin) / self.field.resolution).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.field.dims) - 1)
        return int(idx[0]), int(idx[1]), int(idx[2])

    def rng_at(self, point) -> np.random.Generator:
        ix, iy, iz = self.voxel_index(point)
        return stream(self.seed, "mmd-node", ix, iy, iz)

    def violations_at(self, point) -> np.ndarray:
        """The n_samples violation draws at a world point.

        Arithmetic mirrors sample_distances followed by to_violations with a
        stream seeded from the containing voxel, value for value; the noise
        draws are just served from the per-voxel cache.
        """
        d = query_distance(self.field, point)
        noisy = np.maximum(d + self._eps_at(point), 0.0)
        return np.maximum(0.0, self.r_safe - noisy)

    def point_mmd(self, point) -> float:
        """Squared kernel distance between the violations and the safe Dirac."""
        viol = self.violations_at(point)
        if self.encoder is not None:
            latent = encode(self.encoder, viol)
            return mmd_latent(latent, np.zeros(self.encoder.p), self.weights, self.kernel)
        if not viol.any():
            # keep the no-violation shortcut bitwise-aligned with batch_mmd
            return 0.0
        if self.kernel.kind == RBF:
            # same arithmetic as the batch path so scalar and batched
            # queries at one point agree to the last bit
            return float(mmd_squared_rbf_batch(viol[None, :], self.kernel.sigma_k)[0])
        return mmd_squared(viol, self.weights, self.workspace)

    def _eps_matrix(self, inside) -> np.ndarray:
        """Stacked per-voxel noise draws for points already inside bounds."""
        idx = np.floor((inside - self.field.origin) / self.field.resolution).astype(int)
        np.clip(idx, 0, np.asarray(self.field.dims) - 1, out=idx)
        return self._eps_rows(idx)

    def batch_mmd(self, points) -> tuple[np.ndarray, np.ndarray]:
        """MMD at many points at once.

        Returns (values, answerable): ``values[i]`` is meaningful only where
        ``answerable[i]`` is True; points beyond the field's one-voxel slack
        get 0 there and True elsewhere in the mask.  The per-point draws are
        identical to point_mmd's, only the kernel arithmetic is batched.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = inflated_bounds_mask(self.field, pts)
        values = np.zeros(len(pts))
        if not np.any(ok):
            return values, ok
        inside = pts[ok]
        d = query_distance_batch(self.field, inside)
        eps = self._eps_matrix(inside)
        viol = np.maximum(0.0, self.r_safe - np.maximum(d[:, None] + eps, 0.0))
        if self.encoder is not None:
            latent = encode(self.encoder, viol)
            if self.kernel.kind == RBF:
                values[ok] = mmd_squared_rbf_batch(latent, self.kernel.sigma_k)
            else:
                zero = np.zeros(self.encoder.p)
                values[ok] = [
                    mmd_latent(row, zero, self.weights, self.kernel) for row in latent
                ]
        else:
            # rows with no violating draw score exactly zero (every kernel
            # entry equals k(0,0), and the quadratic form cancels), so only
            # the hot rows pay for the kernel
            vals = np.zeros(len(viol))
            hot = viol.any(axis=1)
            if np.any(hot):
                if self.kernel.kind == RBF:
                    vals[hot] = mmd_squared_rbf_batch(viol[hot], self.kernel.sigma_k)
                else:
                    vals[hot] = [
                        mmd_squared(row, self.weights, self.workspace)
                        for row in viol[hot]
                    ]
            values[ok] = vals
        return values, ok
