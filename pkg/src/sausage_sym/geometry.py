"""Sets and functions on a uniform lattice, with polarization and symmetrization.

A set is a boolean occupancy mask over cell centers; a function is an array of
cell values.  Every grid is centered on the origin (odd cell count per axis), so
the origin is always a cell center and centered balls are exact lattice balls.

Only half-spaces whose reflection maps the lattice onto itself are supported:
normals along a coordinate axis or along a diagonal ``(e_i +/- e_j)/sqrt(2)``,
with offsets on the matching half-lattice.  In that case every operation below
is an exact permutation of cells and measures are preserved to the last cell.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import Clipped, EmptySet, IncompatibleHalfSpace, Stalled

_LATTICE_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Uniform grid of ``extent`` cells per axis with spacing ``h``, centered at 0."""

    dim: int
    h: float
    extent: tuple[int, ...]

    def __post_init__(self):
        extent = tuple(int(n) for n in self.extent)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "h", float(self.h))
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if len(extent) != self.dim:
            raise ValueError("extent must have one entry per axis")
        if any(n < 3 or n % 2 == 0 for n in extent):
            raise ValueError(f"extent must be odd and >= 3 on every axis, got {extent}")
        if not self.h > 0:
            raise ValueError("spacing h must be positive")

    @classmethod
    def centered(cls, dim: int, h: float, half_width) -> "Grid":
        """Smallest grid whose cell centers cover ``[-half_width, half_width]`` per axis."""
        hw = np.broadcast_to(np.asarray(half_width, dtype=float), (dim,))
        extent = tuple(2 * int(math.ceil(w / h - 1e-9)) + 1 for w in hw)
        return cls(dim, h, extent)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.extent

    @property
    def half(self) -> tuple[int, ...]:
        return tuple((n - 1) // 2 for n in self.extent)

    @property
    def size(self) -> int:
        return int(np.prod(self.extent))

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def half_width(self) -> tuple[float, ...]:
        return tuple(k * self.h for k in self.half)

    def signed_indices(self) -> list[np.ndarray]:
        """Per-axis signed cell indices, broadcastable to ``shape`` (sparse meshgrid)."""
        axes = [np.arange(-k, k + 1) for k in self.half]
        return np.meshgrid(*axes, indexing="ij", sparse=True)

    def axis(self, i: int) -> np.ndarray:
        k = self.half[i]
        return np.arange(-k, k + 1) * self.h

    def centers(self) -> np.ndarray:
        """Cell-center coordinates, shape ``(*shape, dim)``."""
        grids = np.meshgrid(*(self.axis(i) for i in range(self.dim)), indexing="ij")
        return np.stack(grids, axis=-1)

    def squared_index_norm(self) -> np.ndarray:
        """Exact integer ``|j|^2`` of each cell's signed index (read-only, cached)."""
        return _squared_index_norm(self)

    def margin(self, width: int = 1) -> np.ndarray:
        """Boolean mask of the outermost ``width`` cell layers (read-only, cached)."""
        return _margin(self, width)

    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Index of the cell containing each point and whether it lies on the grid.

        ``points`` has shape ``(..., dim)``; returns (indices ``(..., dim)``, inside).
        """
        pts = np.asarray(points, dtype=float)
        idx = np.rint(pts / self.h).astype(np.int64) + np.asarray(self.half)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.extent)), axis=-1)
        return idx, inside

    def refine(self, factor: int = 2) -> "Grid":
        """Same physical box with spacing ``h / factor``."""
        return Grid(self.dim, self.h / factor, tuple(factor * (n - 1) + 1 for n in self.extent))


@functools.lru_cache(maxsize=64)
def _squared_index_norm(grid: Grid) -> np.ndarray:
    out = np.broadcast_to(sum(j.astype(np.int64) ** 2 for j in grid.signed_indices()), grid.shape)
    out = np.ascontiguousarray(out)
    out.flags.writeable = False
    return out


@functools.lru_cache(maxsize=64)
def _margin(grid: Grid, width: int) -> np.ndarray:
    m = np.zeros(grid.shape, dtype=bool)
    for ax in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[ax] = slice(0, width)
        m[tuple(sl)] = True
        sl[ax] = slice(-width, None)
        m[tuple(sl)] = True
    m.flags.writeable = False
    return m


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GridSet:
    """Compact set stored as cell-center membership on a grid.

    True cells never touch the outermost cell layer, so lattice moves of the set
    cannot silently fall off the grid.
    """

    grid: Grid
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.grid.shape:
            raise ValueError(f"mask shape {mask.shape} does not match grid {self.grid.shape}")
        if np.any(mask & self.grid.margin(1)):
            raise Clipped("set touches the one-cell grid margin")
        object.__setattr__(self, "mask", _readonly(mask))

    @classmethod
    def empty(cls, grid: Grid) -> "GridSet":
        return cls(grid, np.zeros(grid.shape, dtype=bool))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def measure(self) -> float:
        return self.count * self.grid.cell_volume

    def is_empty(self) -> bool:
        return self.count == 0

    def __or__(self, other: "GridSet") -> "GridSet":
        _same_grid(self, other)
        return GridSet(self.grid, self.mask | other.mask)

    def __and__(self, other: "GridSet") -> "GridSet":
        _same_grid(self, other)
        return GridSet(self.grid, self.mask & other.mask)

    def __le__(self, other: "GridSet") -> bool:
        _same_grid(self, other)
        return not np.any(self.mask & ~other.mask)

    def __eq__(self, other):
        if not isinstance(other, GridSet):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.mask, other.mask)

    __hash__ = None

    def indicator(self) -> "GridField":
        return GridField(self.grid, self.mask.astype(float))

    def extent_radius(self) -> float:
        """Largest distance from the origin to a cell center of the set."""
        if self.is_empty():
            return 0.0
        return math.sqrt(float(self.grid.squared_index_norm()[self.mask].max())) * self.grid.h

    def moment(self) -> int:
        """Integer second moment ``sum |j|^2`` over member cells."""
        return int(self.grid.squared_index_norm()[self.mask].sum())


@dataclass(frozen=True, eq=False)
class GridField:
    """Real-valued function sampled at cell centers."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", _readonly(values))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "GridField":
        return cls(grid, np.full(grid.shape, float(value)))

    def integral(self) -> float:
        return float(self.values.sum()) * self.grid.cell_volume

    def l2_distance(self, other: "GridField") -> float:
        _same_grid(self, other)
        return math.sqrt(float(np.sum((self.values - other.values) ** 2)) * self.grid.cell_volume)

    def maximum(self, other: "GridField") -> "GridField":
        _same_grid(self, other)
        return GridField(self.grid, np.maximum(self.values, other.values))

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None


def _same_grid(a, b):
    if a.grid != b.grid:
        raise ValueError("operands live on different grids")


@dataclass(frozen=True)
class HalfSpace:
    """Closed half-space ``{x : <x, normal> <= offset}``."""

    normal: tuple[float, ...]
    offset: float

    def __post_init__(self):
        normal = tuple(float(v) for v in np.ravel(self.normal))
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))
        if abs(math.sqrt(sum(v * v for v in normal)) - 1.0) > 1e-12:
            raise ValueError(f"normal must be a unit vector, got {normal}")

    @classmethod
    def lattice(cls, direction: Sequence[int], steps: int, h: float) -> "HalfSpace":
        """Grid-compatible half-space from an integer direction and half-lattice steps.

        ``direction`` is an axis vector or a sum of two signed axis vectors; the
        bounding hyperplane sits ``steps`` half-spacings of the lattice (measured
        along the normal) away from the origin.
        """
        n = np.asarray(direction, dtype=float)
        norm = float(np.linalg.norm(n))
        return cls(tuple(n / norm), steps * h * norm / 2.0)

    @property
    def dim(self) -> int:
        return len(self.normal)

    def in_family(self) -> bool:
        """True when the origin lies in the half-space."""
        return self.offset >= 0.0

    def contains(self, x) -> bool:
        return float(np.dot(x, self.normal)) <= self.offset

    def complement_reflected(self) -> "HalfSpace":
        """The closure of the complement, ``{<x, normal> >= offset}``."""
        return HalfSpace(tuple(-v for v in self.normal), -self.offset)


def reflect_point(x, H: HalfSpace) -> np.ndarray:
    """Affine reflection across the bounding hyperplane of ``H``."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(H.normal)
    return x - 2.0 * (x @ nu - H.offset) * nu


def lattice_form(H: HalfSpace, h: float) -> tuple[tuple[int, ...], int]:
    """Return ``(direction, steps)`` such that ``H == HalfSpace.lattice(direction, steps, h)``.

    Raises IncompatibleHalfSpace if the reflection does not preserve the lattice.
    """
    nu = np.asarray(H.normal)
    for nn in (1, 2):
        scaled = nu * math.sqrt(nn)
        rounded = np.rint(scaled)
        if (
            np.allclose(scaled, rounded, atol=_LATTICE_TOL)
            and np.all(np.abs(rounded) <= 1)
            and int(np.abs(rounded).sum()) == nn
        ):
            steps = 2.0 * H.offset / (h * math.sqrt(nn))
            t = round(steps)
            if abs(steps - t) > _LATTICE_TOL * max(1.0, abs(steps)):
                raise IncompatibleHalfSpace(
                    f"offset {H.offset} is not on the half-lattice of spacing {h} along {H.normal}"
                )
            return tuple(int(v) for v in rounded), int(t)
    raise IncompatibleHalfSpace(f"normal {H.normal} is not an axis or lattice diagonal")


@functools.lru_cache(maxsize=512)
def _mirror_table(grid: Grid, direction: tuple[int, ...], steps: int):
    """Flat mirror index of each cell (-1 if off-grid) and membership in H."""
    n = np.asarray(direction, dtype=np.int64)
    nn = int(n @ n)
    js = grid.signed_indices()
    dot = sum(j.astype(np.int64) * int(c) for j, c in zip(js, n) if c != 0)
    dot = np.broadcast_to(dot, grid.shape)
    q = (2 * dot - steps * nn) // nn
    inside = np.ones(grid.shape, dtype=bool)
    mirrored = []
    for ax, (j, c) in enumerate(zip(js, n)):
        k = np.broadcast_to(j.astype(np.int64) - q * int(c) + grid.half[ax], grid.shape)
        inside &= (k >= 0) & (k < grid.extent[ax])
        mirrored.append(np.where(inside, k, 0))
    flat = np.ravel_multi_index(tuple(np.where(inside, m, 0) for m in mirrored), grid.shape)
    flat = np.where(inside, flat, -1)
    in_h = q <= 0
    for a in (flat, in_h):
        a.flags.writeable = False
    return flat, in_h


def _mirror(grid: Grid, H: HalfSpace):
    if H.dim != grid.dim:
        raise ValueError("half-space and grid dimensions differ")
    direction, steps = lattice_form(H, grid.h)
    return _mirror_table(grid, direction, steps)


def _gather(values: np.ndarray, flat: np.ndarray, fill=0):
    out = np.full(values.shape, fill, dtype=values.dtype)
    ok = flat >= 0
    out[ok] = values.ravel()[flat[ok]]
    return out


def in_halfspace_mask(grid: Grid, H: HalfSpace) -> np.ndarray:
    """Cells whose centers lie in ``H``."""
    return _mirror(grid, H)[1]


def reflected_values(u: GridField, H: HalfSpace) -> np.ndarray:
    """``u(sigma_H(x))`` per cell, zero where the mirror cell is off-grid."""
    flat, _ = _mirror(u.grid, H)
    return _gather(u.values, flat, 0.0)


def reflect_set(A: GridSet, H: HalfSpace) -> GridSet:
    """The mirror image ``A_H``."""
    flat, _ = _mirror(A.grid, H)
    if np.any(flat[A.mask] < 0):
        raise Clipped("reflected set leaves the grid")
    return GridSet(A.grid, _gather(A.mask, flat, False))


def _check_no_loss(present: np.ndarray, flat: np.ndarray, in_h: np.ndarray):
    # Mass outside H whose partner is off-grid would have to move off-grid.
    if np.any(present & ~in_h & (flat < 0)):
        raise Clipped("polarization would move part of the set off the grid")


def polarize_set(A: GridSet, H: HalfSpace) -> GridSet:
    """``((A | A_H) & H) | (A & A_H)`` evaluated cell by cell."""
    flat, in_h = _mirror(A.grid, H)
    _check_no_loss(A.mask, flat, in_h)
    a = A.mask
    ah = _gather(a, flat, False)
    return GridSet(A.grid, ((a | ah) & in_h) | (a & ah))


def polarize_field(u: GridField, H: HalfSpace) -> GridField:
    """Two-point rearrangement: larger value of each mirror pair goes to the ``H`` side."""
    if np.any(u.values < 0):
        raise ValueError("polarization is defined for non-negative functions")
    flat, in_h = _mirror(u.grid, H)
    _check_no_loss(u.values > 0, flat, in_h)
    ub = _gather(u.values, flat, 0.0)
    return GridField(u.grid, np.where(in_h, np.maximum(u.values, ub), np.minimum(u.values, ub)))


def pair_sums(u: GridField, H: HalfSpace) -> tuple[np.ndarray, np.ndarray]:
    """``u(x) + u(sigma_H x)`` per cell and the mask of cells in ``H`` with on-grid mirrors."""
    flat, in_h = _mirror(u.grid, H)
    return u.values + _gather(u.values, flat, 0.0), in_h & (flat >= 0)


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1)


def equal_volume_radius(volume: float, dim: int) -> float:
    """Radius ``r`` with ``omega_d r^d = volume``."""
    return (volume / unit_ball_volume(dim)) ** (1.0 / dim)


def ball_surface_area(radius: float, dim: int) -> float:
    return dim * unit_ball_volume(dim) * radius ** (dim - 1)


def centered_ball(grid: Grid, radius: float) -> GridSet:
    """Closed centered ball: cells whose centers lie within ``radius``."""
    r2 = (radius / grid.h) ** 2
    return GridSet(grid, grid.squared_index_norm() <= r2 * (1 + 1e-12) + 1e-9)


def ball_of_equal_volume(A: GridSet) -> GridSet:
    """Centered lattice ball whose measure is closest to that of ``A``.

    The continuous radius ``r`` solves ``omega_d r^d = |A|``; among the lattice
    balls (level sets of ``|x|``), the one with cell count nearest ``count(A)`` is
    returned, preferring the ball of radius ``r`` on ties.  A lattice ball is its
    own symmetrization.
    """
    if A.is_empty():
        raise EmptySet("symmetrization of a null set")
    grid = A.grid
    norms = grid.squared_index_norm().ravel()
    levels, counts = np.unique(norms, return_counts=True)
    cumulative = np.cumsum(counts)
    target = A.count
    r = equal_volume_radius(A.measure, grid.dim)
    k_r = int(np.searchsorted(levels, (r / grid.h) ** 2 * (1 + 1e-12) + 1e-9, side="right")) - 1
    best = int(np.argmin(np.abs(cumulative - target)))
    if k_r >= 0 and abs(cumulative[k_r] - target) <= abs(cumulative[best] - target):
        best = k_r
    return GridSet(grid, grid.squared_index_norm() <= levels[best])


def _radial_order(grid: Grid) -> np.ndarray:
    norms = grid.squared_index_norm().ravel()
    flat = np.arange(grid.size)
    return np.lexsort((flat, norms))


def schwarz_rearrange(u: GridField) -> GridField:
    """Symmetric decreasing rearrangement about the origin.

    Cells are ordered by distance from the origin (ties by flat C-order index)
    and receive the cell values in descending order, so the value multiset is
    preserved exactly.
    """
    if np.any(u.values < 0):
        raise ValueError("rearrangement is defined for non-negative functions")
    order = _radial_order(u.grid)
    out = np.empty(u.grid.size)
    out[order] = np.sort(u.values.ravel())[::-1]
    return GridField(u.grid, out.reshape(u.grid.shape))


def _directed_hausdorff(A: GridSet, B: GridSet) -> float:
    dist_to_b = ndimage.distance_transform_edt(~B.mask, sampling=A.grid.h)
    return float(dist_to_b[A.mask].max())


def hausdorff_distance(A: GridSet, B: GridSet) -> float:
    """Hausdorff distance between the cell-center sets of two masks."""
    _same_grid(A, B)
    if A.is_empty() or B.is_empty():
        raise EmptySet("Hausdorff distance of an empty set")
    return max(_directed_hausdorff(A, B), _directed_hausdorff(B, A))


def symmetric_difference_measure(A: GridSet, B: GridSet) -> float:
    _same_grid(A, B)
    return np.count_nonzero(A.mask ^ B.mask) * A.grid.cell_volume


# -- iterated polarization ---------------------------------------------------

def lattice_directions(dim: int) -> list[tuple[int, ...]]:
    """Axis and diagonal integer directions, both signs, in lexicographic order."""
    dirs = []
    for i in range(dim):
        for s in (1, -1):
            v = [0] * dim
            v[i] = s
            dirs.append(tuple(v))
        for j in range(i + 1, dim):
            for si in (1, -1):
                for sj in (1, -1):
                    v = [0] * dim
                    v[i], v[j] = si, sj
                    dirs.append(tuple(v))
    return sorted(dirs)


def candidate_pool(grid: Grid, max_offset: float | None = None) -> list[HalfSpace]:
    """All grid-compatible half-spaces containing the origin up to ``max_offset``."""
    if max_offset is None:
        max_offset = max(grid.half_width)
    pool = []
    for d in lattice_directions(grid.dim):
        norm = math.sqrt(sum(v * v for v in d))
        t_max = int(math.floor(2 * max_offset / (grid.h * norm) + 1e-9))
        pool.extend(HalfSpace.lattice(d, t, grid.h) for t in range(t_max + 1))
    return pool


@dataclass(frozen=True)
class PolarizationSchedule:
    """Candidate half-spaces and the rule used to pick them."""

    halfspaces: tuple[HalfSpace, ...]
    selection: str = "greedy"
    stop_tol: float = 0.0
    max_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "halfspaces", tuple(self.halfspaces))
        if self.selection not in ("greedy", "random-dense"):
            raise ValueError(f"unknown selection strategy {self.selection!r}")
        bad = [H for H in self.halfspaces if not H.in_family()]
        if bad:
            raise ValueError(f"schedule half-spaces must contain the origin: {bad[0]}")
        if not self.halfspaces:
            raise ValueError("empty candidate pool")


@dataclass(frozen=True)
class ScheduleStep:
    n: int
    halfspace: HalfSpace | None
    set: GridSet
    field: GridField
    sym_diff: float
    hausdorff: float
    l2_gap: float


@dataclass
class ScheduleResult:
    steps: list[ScheduleStep]
    stop_reason: str
    target_set: GridSet
    target_field: GridField

    def __iter__(self) -> Iterator[ScheduleStep]:
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)

    @property
    def final(self) -> ScheduleStep:
        return self.steps[-1]


def _tie_key(H: HalfSpace):
    return (abs(H.offset), H.normal)


def run_polarization_schedule(
    A: GridSet, psi: GridField, sched: PolarizationSchedule
) -> ScheduleResult:
    """Apply polarizations ``A_n = P_{H_n} ... P_{H_1} A`` (and likewise for ``psi``).

    Greedy selection picks the candidate that most reduces ``|A* ^ A_n|``
    (ties: smaller ``|offset|``, then lexicographic normal).  When no candidate
    reduces it, the candidate that most reduces the second moment of ``A_n`` is
    taken instead, which keeps ``|A* ^ A_n|`` non-increasing while still moving
    mass toward the origin.  Stalled is raised if nothing changes the set.
    """
    if A.is_empty():
        raise EmptySet("symmetrization of a null set")
    _same_grid(A, psi)
    if np.any(psi.values[A.mask] != 1.0) or psi.values.min() < 0 or psi.values.max() > 1:
        raise ValueError("psi must satisfy 0 <= psi <= 1 and psi = 1 on A")
    grid = A.grid
    target = ball_of_equal_volume(A)
    target_field = schwarz_rearrange(psi)
    norms = grid.squared_index_norm()
    rng = np.random.default_rng(sched.seed)

    def record(n, H, S, f):
        return ScheduleStep(
            n,
            H,
            S,
            f,
            symmetric_difference_measure(target, S),
            hausdorff_distance(target, S),
            target_field.l2_distance(f),
        )

    current, field_ = A, psi
    steps = [record(0, None, current, field_)]
    while True:
        if steps[-1].sym_diff <= sched.stop_tol:
            reason = "tolerance"
            break
        if len(steps) > sched.max_steps:
            reason = "max_steps"
            break
        if sched.selection == "random-dense":
            H = sched.halfspaces[int(rng.integers(len(sched.halfspaces)))]
            nxt = polarize_set(current, H)
        else:
            H, nxt = _greedy_pick(current, target, sched.halfspaces, norms)
            if H is None:
                raise Stalled(
                    f"no candidate changes A_n after {len(steps) - 1} steps; "
                    f"|A* ^ A_n| = {steps[-1].sym_diff:.6g} > {sched.stop_tol:.6g}"
                )
        current = nxt
        field_ = polarize_field(field_, H)
        steps.append(record(len(steps), H, current, field_))
    return ScheduleResult(steps, reason, target, target_field)


def _greedy_pick(current: GridSet, target: GridSet, pool, norms):
    base_diff = int(np.count_nonzero(current.mask ^ target.mask))
    base_moment = int(norms[current.mask].sum())
    best_diff = best_moment = None
    for H in pool:
        try:
            cand = polarize_set(current, H)
        except Clipped:
            continue
        diff = int(np.count_nonzero(cand.mask ^ target.mask))
        moment_gain = base_moment - int(norms[cand.mask].sum())
        if diff < base_diff:
            key = (diff, _tie_key(H))
            if best_diff is None or key < best_diff[0]:
                best_diff = (key, H, cand)
        elif moment_gain > 0 and best_diff is None:
            key = (-moment_gain, _tie_key(H))
            if best_moment is None or key < best_moment[0]:
                best_moment = (key, H, cand)
    chosen = best_diff or best_moment
    if chosen is None:
        return None, None
    return chosen[1], chosen[2]
