"""Voxel worlds, exact distance fields, and sensing corruption.

Grid convention: axis-aligned, cubic voxels of side ``resolution``, with the
center of voxel ``(i, j, k)`` at ``origin + (i + 0.5, j + 0.5, k + 0.5) * resolution``.
All distances are in meters.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidSpecError, OutOfBoundsError
from .rng import stream

DEFAULT_D_MAX = 10.0

_GRID_MAGIC = b"MMDPVOX1"

# Surface points sit this fraction of a voxel inside their face so that a
# zero-noise corruption re-rasterizes every point into its own voxel.
_FACE_INSET = 0.25


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, corners in world coordinates."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder: circular footprint in xy, extruded over [z0, z1]."""

    center: tuple[float, float]
    radius: float
    z0: float
    z1: float


Obstacle = Box | Cylinder

ARCHETYPES = ("box_cylinder", "wall_grid", "custom")


@dataclass(frozen=True)
class WorldSpec:
    """Recipe for a reproducible synthetic world.

    density is archetype-specific: target occupied fraction for
    ``box_cylinder``, wall count / 10 for ``wall_grid``, ignored for
    ``custom``.  ``clear_spheres`` are carved free after obstacle placement,
    which is how start/goal neighborhoods are guaranteed traversable.
    """

    archetype: str
    extent: tuple[float, float, float]
    density: float
    seed: int
    resolution: float = 0.5
    obstacles: tuple[Obstacle, ...] = ()
    clear_spheres: tuple[tuple[tuple[float, float, float], float], ...] = ()

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise InvalidSpecError(f"unknown archetype {self.archetype!r}")
        if self.resolution <= 0:
            raise InvalidSpecError("resolution must be positive")
        if not (0.0 <= self.density <= 1.0):
            raise InvalidSpecError("density must lie in [0, 1]")
        dims = self.grid_dims()
        if min(dims) < 3:
            raise InvalidSpecError(
                f"extent {self.extent} gives dims {dims}; need >= 3 voxels per axis"
            )

    def grid_dims(self) -> tuple[int, int, int]:
        return tuple(
            max(1, int(round(e / self.resolution))) for e in self.extent
        )  # type: ignore[return-value]


@dataclass
class VoxelGrid:
    """Boolean occupancy over a regular 3-D lattice."""

    occupancy: np.ndarray  # bool, shape (nx, ny, nz)
    resolution: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) < 1:
            raise InvalidSpecError("occupancy must be 3-D with >= 1 voxel per axis")
        if self.resolution <= 0:
            raise InvalidSpecError("resolution must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape  # type: ignore[return-value]

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis center coordinate vectors."""
        return tuple(
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.resolution
            for a in range(3)
        )  # type: ignore[return-value]

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Floor-map world points to integer voxel indices (no bounds check)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def occupied_fraction(self) -> float:
        return float(self.occupancy.mean())


@dataclass
class DistanceField:
    """Clamped Euclidean distance (meters) to the nearest occupied voxel center."""

    distance: np.ndarray  # float64, same shape as source occupancy
    resolution: float
    origin: np.ndarray
    d_max: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.distance.shape  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# distance transform


def _dt_1d(f: np.ndarray) -> np.ndarray:
    """Exact 1-D squared-distance transform via the lower envelope of parabolas.

    ``f`` holds per-cell source costs (inf = no source); returns
    ``d[q] = min_p (q - p)^2 + f[p]`` in grid units.
    """
    n = f.shape[0]
    d = np.full(n, np.inf)
    v = np.zeros(n, dtype=np.int64)
    z = np.zeros(n + 1)
    k = -1
    s = 0.0
    for q in range(n):
        fq = f[q]
        if not np.isfinite(fq):
            continue
        fq_q2 = fq + q * q
        while k >= 0:
            p = v[k]
            s = (fq_q2 - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = -np.inf if k == 0 else s
        z[k + 1] = np.inf
    if k < 0:
        return d
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def _dt_axis(cost: np.ndarray, axis: int) -> np.ndarray:
    """Apply the 1-D transform along one axis of a 3-D squared-cost volume."""
    moved = np.moveaxis(cost, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = _dt_1d(flat[i])
    return np.moveaxis(out.reshape(moved.shape), -1, axis)


def compute_edt(grid: VoxelGrid, d_max_clamp: float = DEFAULT_D_MAX) -> DistanceField:
    """Exact Euclidean distance transform, separable squared-distance form.

    Three 1-D passes (one per axis) propagate squared distances between voxel
    centers; the result is exact, then converted to meters and clamped at
    ``d_max_clamp``.  Occupied voxels read exactly 0; a fully free grid reads
    ``d_max_clamp`` everywhere.
    """
    if d_max_clamp <= 0:
        raise InvalidSpecError("d_max_clamp must be positive")
    cost = np.where(grid.occupancy, 0.0, np.inf)
    for axis in range(3):
        cost = _dt_axis(cost, axis)
    dist = np.sqrt(cost, out=np.full_like(cost, np.inf), where=np.isfinite(cost))
    dist *= grid.resolution
    np.minimum(dist, d_max_clamp, out=dist)
    return DistanceField(
        distance=dist,
        resolution=grid.resolution,
        origin=grid.origin.copy(),
        d_max=float(d_max_clamp),
    )


# ---------------------------------------------------------------------------
# field queries


def inflated_bounds_mask(f: DistanceField, points: np.ndarray) -> np.ndarray:
    """True for points the field can answer: inside or within one voxel outside."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dims = np.asarray(f.dims)
    lo = f.origin - f.resolution
    hi = f.origin + dims * f.resolution + f.resolution
    return np.all((pts >= lo) & (pts <= hi), axis=1)


def query_distance_batch(f: DistanceField, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the distance field at world points.

    Points up to one voxel outside the grid clamp to the boundary value;
    anything farther raises OutOfBoundsError.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dims = np.asarray(f.dims)
    ok = inflated_bounds_mask(f, pts)
    if not np.all(ok):
        bad = pts[~ok][0]
        raise OutOfBoundsError(
            f"point {bad.tolist()} is more than one voxel outside the grid"
        )
    # continuous voxel-center coordinates, clamped to the center lattice
    u = (pts - f.origin) / f.resolution - 0.5
    u = np.clip(u, 0.0, dims - 1.0)
    i0 = np.minimum(u.astype(np.int64), dims - 2)
    i0 = np.maximum(i0, 0)
    t = u - i0
    d = f.distance
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    c000 = d[ix, iy, iz]
    c100 = d[ix + 1, iy, iz]
    c010 = d[ix, iy + 1, iz]
    c110 = d[ix + 1, iy + 1, iz]
    c001 = d[ix, iy, iz + 1]
    c101 = d[ix + 1, iy, iz + 1]
    c011 = d[ix, iy + 1, iz + 1]
    c111 = d[ix + 1, iy + 1, iz + 1]
    c00 = c000 * (1 - tx) + c100 * tx
    c10 = c010 * (1 - tx) + c110 * tx
    c01 = c001 * (1 - tx) + c101 * tx
    c11 = c011 * (1 - tx) + c111 * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


def query_distance(f: DistanceField, point: np.ndarray) -> float:
    """Scalar convenience wrapper around query_distance_batch."""
    return float(query_distance_batch(f, np.asarray(point, dtype=float))[0])


# ---------------------------------------------------------------------------
# world generation


def _rasterize_obstacle(occ: np.ndarray, grid: VoxelGrid, ob: Obstacle) -> None:
    cx, cy, cz = grid.voxel_centers()
    if isinstance(ob, Box):
        mx = (cx >= ob.lo[0]) & (cx <= ob.hi[0])
        my = (cy >= ob.lo[1]) & (cy <= ob.hi[1])
        mz = (cz >= ob.lo[2]) & (cz <= ob.hi[2])
        occ |= mx[:, None, None] & my[None, :, None] & mz[None, None, :]
    elif isinstance(ob, Cylinder):
        r2 = (cx[:, None] - ob.center[0]) ** 2 + (cy[None, :] - ob.center[1]) ** 2
        mz = (cz >= ob.z0) & (cz <= ob.z1)
        occ |= (r2 <= ob.radius**2)[:, :, None] & mz[None, None, :]
    else:  # pragma: no cover - guarded by type
        raise InvalidSpecError(f"unknown obstacle type {type(ob)!r}")


def _carve_sphere(occ: np.ndarray, grid: VoxelGrid, center, radius: float) -> None:
    cx, cy, cz = grid.voxel_centers()
    d2 = (
        (cx[:, None, None] - center[0]) ** 2
        + (cy[None, :, None] - center[1]) ** 2
        + (cz[None, None, :] - center[2]) ** 2
    )
    occ &= d2 > radius**2


def _generate_box_cylinder(spec: WorldSpec, occ: np.ndarray, grid: VoxelGrid) -> None:
    rng = stream(spec.seed, "world", "box_cylinder")
    ex, ey, ez = spec.extent
    attempts = 0
    while occ.mean() < spec.density and attempts < 500:
        attempts += 1
        if rng.random() < 0.5:
            size = rng.uniform(0.8, 3.0, size=3)
            size[2] = min(size[2], ez)
            lo = np.array(
                [
                    rng.uniform(0.0, max(ex - size[0], 0.0)),
                    rng.uniform(0.0, max(ey - size[1], 0.0)),
                    rng.uniform(0.0, max(ez - size[2], 0.0)),
                ]
            )
            _rasterize_obstacle(occ, grid, Box(tuple(lo), tuple(lo + size)))
        else:
            radius = rng.uniform(0.3, 1.0)
            center = (rng.uniform(0.0, ex), rng.uniform(0.0, ey))
            if rng.random() < 0.7:
                z0, z1 = 0.0, ez
            else:
                z0 = rng.uniform(0.0, ez * 0.5)
                z1 = z0 + rng.uniform(ez * 0.3, ez)
            _rasterize_obstacle(occ, grid, Cylinder(center, radius, z0, min(z1, ez)))


def _generate_wall_grid(spec: WorldSpec, occ: np.ndarray, grid: VoxelGrid) -> None:
    """Evenly spaced walls across x, one door opening carved per wall."""
    rng = stream(spec.seed, "world", "wall_grid")
    n_walls = int(round(spec.density * 10))
    if n_walls == 0:
        return
    ex, ey, ez = spec.extent
    res = spec.resolution
    nx, ny, nz = grid.dims
    xs = np.linspace(ex / (n_walls + 1), ex * n_walls / (n_walls + 1), n_walls)
    for wx in xs:
        i = min(max(int(wx / res), 0), nx - 1)
        occ[i, :, :] = True
        door_w = rng.uniform(1.5, 2.5)
        door_h = min(rng.uniform(1.5, 2.5), ez)
        y0 = rng.uniform(0.0, max(ey - door_w, 0.0))
        z0 = rng.uniform(0.0, max(ez - door_h, 0.0))
        j0 = int(np.floor(y0 / res))
        j1 = int(np.ceil((y0 + door_w) / res))
        k0 = int(np.floor(z0 / res))
        k1 = int(np.ceil((z0 + door_h) / res))
        occ[i, max(j0, 0) : min(j1, ny), max(k0, 0) : min(k1, nz)] = False


def generate_world(spec: WorldSpec) -> VoxelGrid:
    """Build the ground-truth occupancy grid for a world spec.

    Deterministic in ``spec.seed``; density 0 yields an all-free grid for any
    archetype.  Clear spheres are applied last so carved regions stay free.
    """
    dims = spec.grid_dims()
    occ = np.zeros(dims, dtype=bool)
    grid = VoxelGrid(occ, spec.resolution, np.zeros(3))
    if spec.density > 0 or spec.archetype == "custom":
        if spec.archetype == "box_cylinder":
            _generate_box_cylinder(spec, occ, grid)
        elif spec.archetype == "wall_grid":
            _generate_wall_grid(spec, occ, grid)
        else:
            for ob in spec.obstacles:
                _rasterize_obstacle(occ, grid, ob)
    for center, radius in spec.clear_spheres:
        _carve_sphere(occ, grid, center, radius)
    grid.occupancy = occ
    return grid


# ---------------------------------------------------------------------------
# sensing corruption


def _surface_points(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Sensor-visible surface points and the mask of core (buried) voxels.

    One point per exposed face, placed at the face center inset into the
    voxel.  A voxel with no exposed face (fully surrounded by occupancy) is
    core and survives corruption verbatim.
    """
    occ = grid.occupancy
    res = grid.resolution
    centers = np.argwhere(occ)  # (K, 3) indices
    points = []
    exposed_any = np.zeros_like(occ)
    for axis in range(3):
        for sign in (-1, 1):
            free = np.ones_like(occ)
            sl_src = [slice(None)] * 3
            sl_dst = [slice(None)] * 3
            if sign > 0:
                sl_dst[axis] = slice(0, -1)
                sl_src[axis] = slice(1, None)
            else:
                sl_dst[axis] = slice(1, None)
                sl_src[axis] = slice(0, -1)
            free[tuple(sl_dst)] = ~occ[tuple(sl_src)]
            exposed = occ & free
            exposed_any |= exposed
            idx = np.argwhere(exposed)
            if idx.size == 0:
                continue
            pts = grid.origin + (idx + 0.5) * res
            pts[:, axis] += sign * (0.5 - _FACE_INSET) * res
            points.append(pts)
    core = occ & ~exposed_any
    if points:
        return np.concatenate(points, axis=0), core
    return np.zeros((0, 3)), core


def corrupt_grid(grid: VoxelGrid, sigma: float, seed: int) -> VoxelGrid:
    """Simulate noisy sensing of a grid.

    Each exposed surface point is jittered by an isotropic zero-mean Gaussian
    and re-rasterized; buried core voxels are kept as-is.  sigma = 0 returns
    an occupancy-identical copy.  Deterministic in (grid, sigma, seed).
    """
    if sigma < 0:
        raise InvalidSpecError("sigma must be non-negative")
    if sigma == 0.0:
        return VoxelGrid(grid.occupancy.copy(), grid.resolution, grid.origin.copy())
    pts, core = _surface_points(grid)
    rng = stream(seed, "corrupt")
    jittered = pts + rng.normal(0.0, sigma, size=pts.shape)
    occ = core.copy()
    if len(jittered):
        idx = np.floor((jittered - grid.origin) / grid.resolution).astype(np.int64)
        dims = np.asarray(grid.dims)
        ok = np.all((idx >= 0) & (idx < dims), axis=1)
        idx = idx[ok]
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(occ, grid.resolution, grid.origin.copy())


def corrupt_field(
    f: DistanceField, sigma: float, seed: int, correlation: float = 0.0
) -> DistanceField:
    """Simulate noisy range sensing of a distance field.

    Every voxel's distance reading gains a zero-mean Gaussian error of
    standard deviation sigma (clamped so readings stay non-negative).
    ``correlation`` is a length in meters: positive values low-pass the
    error field so apparent surfaces shift coherently over patches of that
    scale, the way a biased range sensor misjudges a whole wall section
    rather than single voxels.  sigma = 0 returns a value-identical copy.
    Deterministic in (field, sigma, seed, correlation).
    """
    if sigma < 0:
        raise InvalidSpecError("sigma must be non-negative")
    if correlation < 0:
        raise InvalidSpecError("correlation must be non-negative")
    if sigma == 0.0:
        values = f.distance.copy()
    else:
        rng = stream(seed, "corrupt-field")
        noise = rng.normal(0.0, 1.0, size=f.distance.shape)
        if correlation > 0.0:
            noise = gaussian_filter(noise, sigma=correlation / f.resolution)
            noise /= noise.std()
        values = np.maximum(f.distance + sigma * noise, 0.0)
    return DistanceField(
        distance=values,
        resolution=f.resolution,
        origin=f.origin.copy(),
        d_max=f.d_max,
    )


# ---------------------------------------------------------------------------
# persistence


def save_grid(grid: VoxelGrid, path: str) -> None:
    """Write a grid in the versioned binary layout (bit-packed occupancy)."""
    nx, ny, nz = grid.dims
    header = _GRID_MAGIC + struct.pack(
        "<3I4d", nx, ny, nz, grid.resolution, *grid.origin.tolist()
    )
    body = np.packbits(grid.occupancy.reshape(-1)).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def load_grid(path: str) -> VoxelGrid:
    """Inverse of save_grid; rejects unknown magic/version."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_GRID_MAGIC)] != _GRID_MAGIC:
        raise InvalidSpecError(f"{path}: not a grid file (bad magic)")
    off = len(_GRID_MAGIC)
    nx, ny, nz, res, ox, oy, oz = struct.unpack_from("<3I4d", blob, off)
    off += struct.calcsize("<3I4d")
    n = nx * ny * nz
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=off))
    if bits.size < n:
        raise InvalidSpecError(f"{path}: truncated occupancy payload")
    occ = bits[:n].astype(bool).reshape((nx, ny, nz))
    return VoxelGrid(occ, res, np.array([ox, oy, oz]))
