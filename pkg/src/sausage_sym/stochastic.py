"""Monte Carlo estimates for Brownian hitting times and the Wiener sausage.

Every path owns a counter-based Philox stream keyed by ``(seed, path index)``,
so a path set is reproducible bit for bit, independent of batching, and any
two estimators run with the same ``PathSpec`` see the same paths (common
random numbers).

Sausage volumes are computed on the lattice of the set's grid: each path
position is snapped to the nearest lattice offset and the union of translates
of ``A`` is the dilation of the visited-offset set by ``A``.  Hitting is only
detected at step times, which biases hitting probabilities and volumes
slightly low; the bias shrinks with the step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import Clipped, EllipticityViolated
from .geometry import Grid, GridField, GridSet

_MASK64 = (1 << 64) - 1
Z95 = 1.96


def stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for path ``index`` under ``seed``."""
    key = ((int(seed) & _MASK64) << 64) | (int(index) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class PathSpec:
    """Discretized path law: ``w_{k+1} = w_k + sqrt(delta) sigma(t_k) xi_k``.

    ``sigma=None`` is the standard Wiener process in ``R^dim``.  ``xi_k`` is
    standard normal (``gaussian_increments``) or uniform on ``{-1, 1}^m``
    (``donsker_walk``).
    """

    horizon: float
    step: float
    dim: int = 1
    sigma: Callable[[float], np.ndarray] | None = None
    seed: int = 0
    scheme: str = "gaussian_increments"
    kappa: float | None = None

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.horizon > 0 and self.step > self.horizon * (1 + 1e-12):
            raise ValueError("step must not exceed the horizon")
        if self.scheme not in ("gaussian_increments", "donsker_walk"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.sigma is not None:
            self._check_sigma()

    @property
    def driver(self) -> str:
        return "standard" if self.sigma is None else "sigma"

    @property
    def n_steps(self) -> int:
        if self.horizon == 0:
            return 0
        return max(1, int(math.ceil(self.horizon / self.step - 1e-9)))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps if self.n_steps else 0.0

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def noise_dim(self) -> int:
        if self.sigma is None:
            return self.dim
        return int(np.asarray(self.sigma(0.0)).shape[1])

    def sigmas(self) -> np.ndarray:
        """``sigma(t_k)`` for every step, shape ``(n_steps, dim, m)``."""
        return np.stack([np.asarray(self.sigma(t), dtype=float) for t in self.times[:-1]]) \
            if self.n_steps else np.zeros((0, self.dim, self.noise_dim))

    def _check_sigma(self):
        rng = np.random.default_rng(54321)
        probes = np.vstack([np.eye(self.dim), rng.normal(size=(16, self.dim))])
        ts = self.times[:-1] if self.n_steps else np.array([0.0])
        kappa = self.kappa
        for t in ts[:: max(1, len(ts) // 64)]:
            s = np.asarray(self.sigma(float(t)), dtype=float)
            if s.ndim != 2 or s.shape[0] != self.dim:
                raise ValueError(f"sigma(t) must be a {self.dim} x m matrix, got shape {s.shape}")
            c = s @ s.T
            quad = np.einsum("ki,ij,kj->k", probes, c, probes) / np.sum(probes**2, axis=1)
            # the probes can miss a thin degenerate direction; the smallest eigenvalue cannot
            low = min(float(quad.min()), float(np.linalg.eigvalsh(c).min()))
            floor = kappa if kappa is not None else 1e-9 * max(1.0, float(np.abs(c).max()))
            if low < floor * (1 - 1e-12):
                raise EllipticityViolated(f"sigma sigma^T is degenerate at t={t}")


@dataclass(frozen=True)
class Path:
    times: np.ndarray
    positions: np.ndarray  # (n_steps + 1, dim), positions[0] == 0


def _increments(spec: PathSpec, gen: np.random.Generator, sigmas: np.ndarray | None) -> np.ndarray:
    n, m = spec.n_steps, spec.noise_dim
    if spec.scheme == "gaussian_increments":
        xi = gen.standard_normal((n, m))
    else:
        xi = gen.integers(0, 2, size=(n, m)).astype(float) * 2.0 - 1.0
    if sigmas is not None:
        xi = np.einsum("kij,kj->ki", sigmas, xi)
    return math.sqrt(spec.dt) * xi


def _positions(spec: PathSpec, index: int, sigmas) -> np.ndarray:
    w = np.zeros((spec.n_steps + 1, spec.dim))
    if spec.n_steps:
        np.cumsum(_increments(spec, stream(spec.seed, index), sigmas), axis=0, out=w[1:])
    return w


def sample_path(spec: PathSpec, rng_stream: int) -> Path:
    """Path number ``rng_stream`` of the path set defined by ``spec``."""
    sigmas = spec.sigmas() if spec.sigma is not None else None
    return Path(spec.times, _positions(spec, rng_stream, sigmas))


def hitting_time(path: Path, A: GridSet, x) -> float:
    """First step time with ``x + w_t`` in a cell of ``A``; ``inf`` if none."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    idx, inside = A.grid.locate(x + path.positions)
    hit = np.zeros(len(path.times), dtype=bool)
    hit[inside] = A.mask[tuple(idx[inside].T)]
    k = np.flatnonzero(hit)
    return float(path.times[k[0]]) if k.size else math.inf


# -- lattice unions ------------------------------------------------------------

@dataclass(frozen=True)
class _Runs:
    """Mask cropped to its bounding box and decomposed into runs along the last axis."""

    lo: np.ndarray     # bounding-box corner (grid index)
    shape: tuple       # bounding-box shape
    runs: tuple        # (prefix index tuple, start, length)

    @classmethod
    def of(cls, A: GridSet) -> "_Runs":
        nz = np.argwhere(A.mask)
        lo, hi = nz.min(axis=0), nz.max(axis=0)
        crop = A.mask[tuple(slice(a, b + 1) for a, b in zip(lo, hi))]
        runs = []
        lead_shape = crop.shape[:-1]
        for prefix in np.ndindex(*lead_shape) if lead_shape else [()]:
            row = crop[prefix].astype(np.int8)
            edges = np.diff(np.concatenate(([0], row, [0])))
            starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
            runs.extend((prefix, int(s), int(e - s)) for s, e in zip(starts, ends))
        return cls(lo, crop.shape, tuple(runs))


def _dilate(V: np.ndarray, runs: _Runs) -> np.ndarray:
    """Batched ``Minkowski sum(V_b, A)`` for boolean offset indicators ``V`` of shape (B, ...)."""
    B, box = V.shape[0], V.shape[1:]
    W = box[-1]
    out = np.zeros((B,) + tuple(b + s - 1 for b, s in zip(box, runs.shape)), dtype=bool)
    C = np.zeros(V.shape[:-1] + (W + 1,), dtype=np.int32)
    np.cumsum(V, axis=-1, out=C[..., 1:])
    cache = {}
    for prefix, start, length in runs.runs:
        if length not in cache:
            k = np.arange(W + length - 1)
            cache[length] = (C[..., np.minimum(k + 1, W)] - C[..., np.maximum(k - length + 1, 0)]) > 0
        sl = (slice(None),) + tuple(slice(p, p + b) for p, b in zip(prefix, box[:-1])) \
            + (slice(start, start + W + length - 1),)
        out[sl] |= cache[length]
    return out


def _indicator_batch(offsets: Sequence[np.ndarray]):
    """Boolean indicators of each path's visited offsets on a shared bounding box."""
    allo = np.concatenate(offsets)
    lo, hi = allo.min(axis=0), allo.max(axis=0)
    V = np.zeros((len(offsets),) + tuple(hi - lo + 1), dtype=bool)
    for b, o in enumerate(offsets):
        V[(b,) + tuple((o - lo).T)] = True
    return V, lo, hi


def _check_fit(grid: Grid, runs: _Runs, lo: np.ndarray, hi: np.ndarray, what: str):
    first = runs.lo + lo
    last = runs.lo + np.asarray(runs.shape) - 1 + hi
    if np.any(first < 0) or np.any(last >= np.asarray(grid.extent)):
        raise Clipped(f"{what} leaves the grid; enlarge the grid or shorten the horizon")


def _path_batches(spec: PathSpec, n_paths: int, batch: int, first_stream: int = 0, t: float | None = None):
    """Yield lists of lattice offsets (one ``(K, d)`` int array per path)."""
    sigmas = spec.sigmas() if spec.sigma is not None else None
    k_end = spec.n_steps + 1
    if t is not None:
        k_end = int(np.searchsorted(spec.times, t * (1 + 1e-12) + 1e-15, side="right"))
    offsets = []
    for i in range(n_paths):
        w = _positions(spec, first_stream + i, sigmas)[:k_end]
        offsets.append(w)
        if len(offsets) == batch or i == n_paths - 1:
            yield offsets
            offsets = []


def _snap(ws, h):
    return [np.rint(w / h).astype(np.int64) for w in ws]


@dataclass(frozen=True)
class SausageEstimate:
    mean: float
    half_width_95: float
    n_paths: int
    method: str
    samples: np.ndarray = field(repr=False, compare=False)

    @property
    def std(self) -> float:
        return float(self.samples.std(ddof=1)) if self.n_paths > 1 else 0.0


def _estimate(samples: np.ndarray, method: str) -> SausageEstimate:
    n = samples.size
    hw = Z95 * float(samples.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return SausageEstimate(float(np.mean(samples)), hw, n, method, samples)


def _default_batch(dim: int) -> int:
    return {1: 512, 2: 32, 3: 4}[dim]


def sausage_volumes(spec: PathSpec, sets: Sequence[GridSet], n_paths: int,
                    batch: int | None = None) -> list[SausageEstimate]:
    """Stamp-method estimates of ``E|U_{t<=T}(w_t + A)|`` for several sets on one path set."""
    if not sets:
        return []
    grid = sets[0].grid
    for A in sets:
        if A.grid != grid:
            raise ValueError("all sets must share one grid")
        if A.grid.dim != spec.dim:
            raise ValueError("path and set dimensions differ")
    batch = batch or _default_batch(spec.dim)
    runs = [None if A.is_empty() else _Runs.of(A) for A in sets]
    vols = [np.zeros(n_paths) for _ in sets]
    done = 0
    for ws in _path_batches(spec, n_paths, batch):
        V, lo, hi = _indicator_batch(_snap(ws, grid.h))
        for j, r in enumerate(runs):
            if r is None:
                continue
            _check_fit(grid, r, lo, hi, "a sausage translate")
            U = _dilate(V, r)
            vols[j][done:done + len(ws)] = U.reshape(len(ws), -1).sum(axis=1)
        done += len(ws)
    return [_estimate(v * grid.cell_volume, "stamp") for v in vols]


def sausage_volume(spec: PathSpec, A: GridSet, n_paths: int, batch: int | None = None) -> SausageEstimate:
    """Stamp-method estimate of the expected sausage volume with a 95% interval."""
    return sausage_volumes(spec, [A], n_paths, batch)[0]


@dataclass(frozen=True)
class HittingEstimate:
    field: GridField            # estimated P(tau_A^x <= t) per cell
    integral: float
    half_width_95: float        # for the integral
    n_paths: int
    crn: bool
    samples: np.ndarray = field(repr=False, compare=False)

    def cell_half_width(self) -> np.ndarray:
        p = self.field.values
        return Z95 * np.sqrt(p * (1 - p) / self.n_paths)


def hitting_integral(spec: PathSpec, A: GridSet, t: float, n_paths: int, x_grid: Grid | None = None,
                     crn: bool = True, first_stream: int = 0, batch: int | None = None) -> HittingEstimate:
    """Estimate ``P(tau_A^x <= t)`` at every cell ``x`` and its ``h^d``-weighted sum.

    With ``crn`` every cell uses the same paths: path ``w`` hits ``A`` from ``x``
    exactly when ``x`` lies in the union of ``A - w_{t_k}``, so one reflected
    stamp per path gives the whole field.  Without ``crn`` each cell gets its
    own ``n_paths`` streams (slow; meant for small grids).
    """
    grid = A.grid
    if x_grid is not None and x_grid != grid:
        raise ValueError("x_grid must be the grid of A")
    if not 0 <= t <= spec.horizon * (1 + 1e-12):
        raise ValueError("t must lie in [0, horizon]")
    if A.is_empty():
        z = np.zeros(n_paths)
        return HittingEstimate(GridField.constant(grid, 0.0), 0.0, 0.0, n_paths, crn, z)
    if not crn:
        return _hitting_independent(spec, A, t, n_paths, first_stream)
    batch = batch or _default_batch(spec.dim)
    runs = _Runs.of(A)
    counts = np.zeros(grid.shape, dtype=np.int64)
    vols = np.zeros(n_paths)
    done = 0
    for ws in _path_batches(spec, n_paths, batch, first_stream, t):
        V, lo, hi = _indicator_batch([-o for o in _snap(ws, grid.h)])
        _check_fit(grid, runs, lo, hi, "a reflected translate")
        U = _dilate(V, runs)
        vols[done:done + len(ws)] = U.reshape(len(ws), -1).sum(axis=1)
        corner = runs.lo + lo
        sl = tuple(slice(c, c + s) for c, s in zip(corner, U.shape[1:]))
        counts[sl] += U.sum(axis=0)
        done += len(ws)
    vols *= grid.cell_volume
    est = _estimate(vols, "hitting_integral")
    return HittingEstimate(GridField(grid, counts / n_paths), est.mean, est.half_width_95, n_paths, True, vols)


def _hitting_independent(spec: PathSpec, A: GridSet, t: float, n_paths: int, first_stream: int):
    grid = A.grid
    sigmas = spec.sigmas() if spec.sigma is not None else None
    k_end = int(np.searchsorted(spec.times, t * (1 + 1e-12) + 1e-15, side="right"))
    counts = np.zeros(grid.size, dtype=np.int64)
    base_idx = np.array(np.unravel_index(np.arange(grid.size), grid.shape)).T
    for cell in range(grid.size):
        if A.mask.ravel()[cell]:
            counts[cell] = n_paths
            continue
        hits = 0
        for j in range(n_paths):
            w = _positions(spec, first_stream + cell * n_paths + j, sigmas)[:k_end]
            idx = base_idx[cell] + np.rint(w / grid.h).astype(np.int64)
            inside = np.all((idx >= 0) & (idx < np.asarray(grid.extent)), axis=1)
            if np.any(A.mask[tuple(idx[inside].T)]):
                hits += 1
        counts[cell] = hits
    p = counts.reshape(grid.shape) / n_paths
    integral = float(p.sum()) * grid.cell_volume
    # independent cells: variance of the sum is the sum of Bernoulli variances
    var = float(np.sum(p * (1 - p))) / n_paths * grid.cell_volume**2
    hw = Z95 * math.sqrt(var)
    return HittingEstimate(GridField(grid, p), integral, hw, n_paths, False, counts)
