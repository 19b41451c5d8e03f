"""Implicit finite-difference solver for the exterior problem.

The equation ``du/dt = div(a_t grad u)`` is solved on the grid box minus the
obstacle ``A``.  Cells of ``A`` are pinned to 1, the outermost cell layer is
pinned to 0, and each backward-Euler step solves a symmetric positive-definite
system by conjugate gradients.  With ``a_t = I/2`` this is the heat equation
``du/dt = (1/2) Laplace(u)`` whose exterior solution started from ``1_A`` is the
hitting probability ``P(tau_A^x <= t)`` of Brownian motion.

For diagonally dominant ``a_t`` the stencil is assembled from axis and lattice
diagonal second differences with non-negative weights, so the step matrix is an
M-matrix and the scheme obeys a discrete maximum principle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import EllipticityViolated, MarginTooSmall, SolverDiverged
from .geometry import Grid, GridField, GridSet, hausdorff_distance, symmetric_difference_measure

log = logging.getLogger(__name__)

SOLVER_TOL = 1e-10
MAX_CG_ITER = 10_000
OBSTACLE_MARGIN_CELLS = 5
SHELL_CELLS = 3
# backward_euler is monotone (M-matrix); extrapolated_euler combines one full and
# two half backward-Euler steps as 2*u_half - u_full: second order, L-stable, not
# guaranteed monotone.
INTEGRATORS = ("backward_euler", "extrapolated_euler")


@dataclass(frozen=True)
class OperatorSpec:
    """Spatially constant, time-dependent diffusion matrix ``a_t``.

    ``coeff(t)`` returns a symmetric ``d x d`` matrix.  ``kappa`` is the
    ellipticity bound ``z.a_t z >= kappa |z|^2`` and ``bound_K`` bounds
    ``max |a_ij|``.
    """

    mode: str = "laplacian_half"
    coeff: Callable[[float], np.ndarray] | None = None
    kappa: float = 0.5
    bound_K: float = 0.5

    def __post_init__(self):
        if self.mode not in ("laplacian_half", "general"):
            raise ValueError(f"unknown operator mode {self.mode!r}")
        if self.mode == "general" and self.coeff is None:
            raise ValueError("general operator needs a coefficient function")
        if not self.kappa > 0:
            raise EllipticityViolated("kappa must be positive")

    @classmethod
    def constant(cls, matrix, kappa: float | None = None, bound_K: float | None = None):
        a = np.array(matrix, dtype=float)
        a.flags.writeable = False
        if kappa is None:
            kappa = float(np.linalg.eigvalsh(0.5 * (a + a.T)).min())
        if bound_K is None:
            bound_K = float(np.abs(a).max())
        return cls("general", lambda t: a, kappa, bound_K)

    @classmethod
    def tabulated(cls, times: Sequence[float], matrices, kappa: float | None = None,
                  bound_K: float | None = None):
        """Piecewise-linear interpolation of ``a_t`` between tabulated times."""
        ts = np.asarray(times, dtype=float)
        mats = np.asarray(matrices, dtype=float)
        if ts.ndim != 1 or mats.shape[0] != ts.size or np.any(np.diff(ts) <= 0):
            raise ValueError("tabulated coefficients need increasing times and one matrix per time")

        def coeff(t):
            flat = mats.reshape(ts.size, -1)
            out = np.array([np.interp(t, ts, flat[:, k]) for k in range(flat.shape[1])])
            return out.reshape(mats.shape[1:])

        if kappa is None:
            kappa = min(float(np.linalg.eigvalsh(0.5 * (m + m.T)).min()) for m in mats)
        if bound_K is None:
            bound_K = float(np.abs(mats).max())
        return cls("general", coeff, kappa, bound_K)

    def matrix(self, t: float, dim: int) -> np.ndarray:
        if self.mode == "laplacian_half":
            return 0.5 * np.eye(dim)
        a = np.asarray(self.coeff(t), dtype=float)
        if a.shape != (dim, dim):
            raise ValueError(f"coefficient matrix has shape {a.shape}, expected {(dim, dim)}")
        return a

    def check(self, times: Sequence[float], dim: int, n_random: int = 16) -> None:
        """Probe symmetry, ellipticity and the bound ``K`` at the given times."""
        rng = np.random.default_rng(12345)
        probes = np.vstack([np.eye(dim), rng.normal(size=(n_random, dim))])
        for t in times:
            a = self.matrix(t, dim)
            if np.abs(a - a.T).max() > 1e-12:
                raise EllipticityViolated(f"a_t is not symmetric at t={t}")
            quad = np.einsum("ki,ij,kj->k", probes, a, probes)
            low = float(np.linalg.eigvalsh(0.5 * (a + a.T)).min())
            if np.any(quad < self.kappa * np.sum(probes**2, axis=1) * (1 - 1e-12)) or \
                    low < self.kappa * (1 - 1e-12):
                raise EllipticityViolated(f"z.a_t z >= kappa|z|^2 fails at t={t}")
            if np.abs(a).max() > self.bound_K * (1 + 1e-12):
                raise EllipticityViolated(f"max |a_ij| exceeds K={self.bound_K} at t={t}")


def stencil(a: np.ndarray) -> list[tuple[tuple[int, ...], float]]:
    """Neighbour offsets and weights of ``h^2 div(a grad u)`` (centre term excluded).

    Uses the non-negative decomposition ``a = sum_e w_e e e^T`` over axis and
    diagonal lattice vectors when ``a`` is diagonally dominant; otherwise falls
    back to the central cross-derivative stencil, which is consistent and
    symmetric but not monotone.
    """
    d = a.shape[0]
    axis_w = [a[i, i] - sum(abs(a[i, j]) for j in range(d) if j != i) for i in range(d)]
    out: list[tuple[tuple[int, ...], float]] = []
    if min(axis_w) >= -1e-14:
        for i in range(d):
            if axis_w[i] > 0:
                e = [0] * d
                e[i] = 1
                out += [(tuple(e), axis_w[i]), (tuple(-v for v in e), axis_w[i])]
        for i in range(d):
            for j in range(i + 1, d):
                if a[i, j] != 0:
                    e = [0] * d
                    e[i], e[j] = 1, int(np.sign(a[i, j]))
                    w = abs(a[i, j])
                    out += [(tuple(e), w), (tuple(-v for v in e), w)]
        return out
    log.warning("diffusion matrix is not diagonally dominant; scheme is not monotone")
    for i in range(d):
        e = [0] * d
        e[i] = 1
        out += [(tuple(e), a[i, i]), (tuple(-v for v in e), a[i, i])]
    for i in range(d):
        for j in range(i + 1, d):
            if a[i, j] != 0:
                c = a[i, j] / 2
                for si in (1, -1):
                    for sj in (1, -1):
                        e = [0] * d
                        e[i], e[j] = si, sj
                        out.append((tuple(e), c * si * sj))
    return out


def conjugate_gradient(M, b: np.ndarray, x0: np.ndarray, tol: float = SOLVER_TOL,
                       max_iter: int = MAX_CG_ITER) -> tuple[np.ndarray, int, float]:
    """Plain CG for SPD ``M``; stops at ``|r| <= tol |b|``.  Returns (x, iterations, rel. residual)."""
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    x = x0.copy()
    r = b - M @ x
    rr = float(r @ r)
    target = (tol * bnorm) ** 2
    if rr <= target:
        return x, 0, math.sqrt(rr) / bnorm
    p = r.copy()
    for k in range(1, max_iter + 1):
        Mp = M @ p
        alpha = rr / float(p @ Mp)
        x += alpha * p
        r -= alpha * Mp
        rr_new = float(r @ r)
        if rr_new <= target:
            return x, k, math.sqrt(rr_new) / bnorm
        p *= rr_new / rr
        p += r
        rr = rr_new
    raise SolverDiverged(f"CG residual {math.sqrt(rr) / bnorm:.3e} > {tol:.1e} after {max_iter} iterations")


@dataclass(frozen=True)
class ParabolicProblem:
    obstacle: GridSet
    initial: GridField
    operator: OperatorSpec = field(default_factory=OperatorSpec)
    horizon: float = 1.0
    dt: float | None = None
    outer_bc: str = "dirichlet_zero"
    solver_tol: float = SOLVER_TOL
    max_iter: int = MAX_CG_ITER
    leak_tol: float | None = None
    leak_policy: str = "raise"
    integrator: str = "backward_euler"

    @property
    def grid(self) -> Grid:
        return self.obstacle.grid

    @property
    def step(self) -> float:
        """Uniform step ``T/N`` with ``N = ceil(T/dt)`` (``dt`` defaults to ``h^2``)."""
        return self.horizon / self.n_steps

    @property
    def n_steps(self) -> int:
        dt = self.grid.h**2 if self.dt is None else self.dt
        return max(1, int(math.ceil(self.horizon / dt - 1e-9)))

    def validate(self) -> None:
        if self.initial.grid != self.grid:
            raise ValueError("obstacle and initial data live on different grids")
        if not self.horizon > 0:
            raise ValueError("horizon T must be positive")
        if self.dt is not None and not 0 < self.dt <= self.horizon:
            raise ValueError("need 0 < dt <= T")
        if self.outer_bc != "dirichlet_zero":
            raise ValueError(f"unsupported outer boundary condition {self.outer_bc!r}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}; choose from {INTEGRATORS}")
        if self.leak_policy not in ("raise", "record"):
            raise ValueError(f"unknown leak policy {self.leak_policy!r}")
        psi = self.initial.values
        if psi.min() < 0 or psi.max() > 1:
            raise ValueError("initial data must satisfy 0 <= psi <= 1")
        if np.any(psi[self.obstacle.mask] != 1.0):
            raise ValueError("initial data must equal 1 on the obstacle")
        if np.any(self.obstacle.mask & self.grid.margin(OBSTACLE_MARGIN_CELLS)):
            raise MarginTooSmall(f"obstacle is within {OBSTACLE_MARGIN_CELLS} cells of the grid edge")

    def effective_leak_tol(self) -> float:
        if self.leak_tol is not None:
            return self.leak_tol
        return 1e-4 * max(self.obstacle.measure, self.grid.cell_volume)


@dataclass(frozen=True)
class Solution:
    """Fields at the requested times plus per-step diagnostics (step 0 is ``t=0``)."""

    times: tuple[float, ...]
    fields: tuple[GridField, ...]
    step_times: np.ndarray
    residuals: np.ndarray
    iterations: np.ndarray
    masses: np.ndarray
    shell_leak: np.ndarray
    max_bound_violation: float

    def field_at(self, t: float) -> GridField:
        for s, f in zip(self.times, self.fields):
            if s == t:
                return f
        raise KeyError(f"time {t} was not sampled; available: {self.times}")


def mass(sol: Solution, t: float) -> float:
    """``h^d`` times the sum of the field (obstacle cells count as 1)."""
    return sol.field_at(t).integral()


def exterior_grid(dim: int, h: float, set_radius: float, horizon: float,
                  max_diffusivity: float = 0.5) -> Grid:
    """Grid box wide enough that the solution is negligible at the outer boundary.

    Half-width is ``set_radius + 6 sqrt(2 a_max T)`` plus the obstacle margin.
    """
    half = set_radius + 6.0 * math.sqrt(2 * max_diffusivity * horizon) + (OBSTACLE_MARGIN_CELLS + 1) * h
    return Grid.centered(dim, h, half)


class _Assembler:
    """Free-cell bookkeeping and cached step matrices for one problem."""

    def __init__(self, problem: ParabolicProblem):
        grid = problem.grid
        self.grid = grid
        self.pinned = problem.obstacle.mask | grid.margin(1)
        self.pinned_value = problem.obstacle.mask.astype(float)
        self.free = np.flatnonzero(~self.pinned.ravel())
        self.index = np.full(grid.size, -1, dtype=np.int64)
        self.index[self.free] = np.arange(self.free.size)
        self.coords = np.array(np.unravel_index(self.free, grid.shape))
        self._offsets: dict = {}
        self._matrices: dict = {}

    def _offset(self, off):
        # (adjacency free->free along off, pinned neighbour values along off)
        if off not in self._offsets:
            nb = self.coords + np.asarray(off)[:, None]
            flat_nb = np.ravel_multi_index(tuple(nb), self.grid.shape)
            j = self.index[flat_nb]
            ok = j >= 0
            n = self.free.size
            adj = sparse.csr_matrix((np.ones(ok.sum()), (np.flatnonzero(ok), j[ok])), shape=(n, n))
            pinned_vals = np.where(ok, 0.0, self.pinned_value.ravel()[flat_nb])
            self._offsets[off] = (adj, pinned_vals)
        return self._offsets[off]

    def system(self, weights, lam: float):
        """``(I - lam S, lam * pinned contribution)`` for stencil ``weights``, ``lam = dt/h^2``."""
        key = (tuple(weights), lam)
        if key not in self._matrices:
            n = self.free.size
            centre = -sum(w for _, w in weights)
            S = sparse.diags(np.full(n, centre)).tocsr()
            rhs = np.zeros(n)
            for off, w in weights:
                adj, pv = self._offset(off)
                S = S + w * adj
                rhs += w * pv
            M = (sparse.identity(n, format="csr") - lam * S).tocsr()
            M.sort_indices()
            self._matrices[key] = (M, lam * rhs)
        return self._matrices[key]

    def scatter(self, x: np.ndarray) -> np.ndarray:
        full = self.pinned_value.ravel().copy()
        full[self.free] = x
        return full.reshape(self.grid.shape)


def _integrate(problem: ParabolicProblem, sample_times: Sequence[float]) -> Solution:
    problem.validate()
    grid = problem.grid
    T = problem.horizon
    N = problem.n_steps
    dt = problem.step
    lam = dt / grid.h**2
    samples = sorted(set(float(t) for t in sample_times))
    if samples and (samples[0] < 0 or samples[-1] > T * (1 + 1e-12)):
        raise ValueError(f"sample times must lie in [0, {T}]")

    asm = _Assembler(problem)
    shell = grid.margin(SHELL_CELLS)
    leak_tol = problem.effective_leak_tol()
    vol = grid.cell_volume

    u0 = problem.initial.values
    x = u0.ravel()[asm.free].copy()
    prev_full = u0
    residuals = np.zeros(N + 1)
    iterations = np.zeros(N + 1, dtype=np.int64)
    masses = np.zeros(N + 1)
    leaks = np.zeros(N + 1)
    masses[0] = float(u0.sum()) * vol
    leaks[0] = float(u0[shell].sum()) * vol
    worst = 0.0

    # step index k and weight theta for each sample: u = (1-theta) u_k + theta u_{k+1}
    pending = []
    for t in samples:
        s = t / dt
        k = int(math.floor(s + 1e-9))
        theta = s - k
        if abs(theta) < 1e-9 or k >= N:
            k, theta = min(k, N), 0.0
        pending.append((t, k, theta))
    out: dict[float, GridField] = {}

    def emit(k, full_k, full_k1):
        for t, kk, theta in pending:
            if kk == k and t not in out:
                if theta == 0.0:
                    out[t] = GridField(grid, full_k)
                elif full_k1 is not None:
                    out[t] = GridField(grid, (1 - theta) * full_k + theta * full_k1)

    constant = problem.operator.mode == "laplacian_half"
    weights = stencil(problem.operator.matrix(0.0, grid.dim)) if constant else None
    for n in range(N):
        if not constant:
            weights = stencil(problem.operator.matrix((n + 0.5) * dt, grid.dim))
        M, pinned_rhs = asm.system(weights, lam)
        full_step, its, res = conjugate_gradient(M, x + pinned_rhs, x, problem.solver_tol, problem.max_iter)
        if problem.integrator == "extrapolated_euler":
            Mh, pinned_h = asm.system(weights, lam / 2)
            y = x
            for _ in range(2):
                y, its_h, res_h = conjugate_gradient(Mh, y + pinned_h, y, problem.solver_tol, problem.max_iter)
                its, res = its + its_h, max(res, res_h)
            x = 2.0 * y - full_step
        else:
            x = full_step
        lo, hi = float(x.min()), float(x.max())
        worst = max(worst, -lo, hi - 1.0)
        if lo < 0.0 or hi > 1.0:
            np.clip(x, 0.0, 1.0, out=x)
        full = asm.scatter(x)
        residuals[n + 1] = res
        iterations[n + 1] = its
        masses[n + 1] = float(full.sum()) * vol
        leaks[n + 1] = float(full[shell].sum()) * vol
        if leaks[n + 1] > leak_tol and problem.leak_policy == "raise":
            raise MarginTooSmall(
                f"outer shell holds {leaks[n + 1]:.3e} > leak_tol {leak_tol:.3e} at t={(n + 1) * dt:.4g}; "
                "enlarge the grid"
            )
        emit(n, prev_full, full)
        prev_full = full
    emit(N, prev_full, None)

    return Solution(
        times=tuple(samples),
        fields=tuple(out[t] for t in samples),
        step_times=np.arange(N + 1) * dt,
        residuals=residuals,
        iterations=iterations,
        masses=masses,
        shell_leak=leaks,
        max_bound_violation=worst,
    )


def solve(problem: ParabolicProblem, sample_times: Sequence[float]) -> Solution:
    """Backward-Euler solution of the exterior problem at ``sample_times``.

    Fields are linearly interpolated in time between steps; obstacle cells hold 1.
    """
    if problem.operator.mode == "general":
        return solve_general(problem, sample_times)
    return _integrate(problem, sample_times)


def solve_general(problem: ParabolicProblem, sample_times: Sequence[float]) -> Solution:
    """As ``solve``, with ``a_t`` evaluated at each step midpoint after an ellipticity probe."""
    op = problem.operator
    mids = (np.arange(problem.n_steps) + 0.5) * problem.step
    op.check(mids, problem.grid.dim)
    return _integrate(problem, sample_times)


# -- stability under obstacle perturbation ------------------------------------

@dataclass(frozen=True)
class PerturbationReport:
    hausdorff: tuple[float, ...]
    sym_diff: tuple[float, ...]
    gaps: np.ndarray  # (n_sets, n_test_functions)
    test_function_names: tuple[str, ...]

    @property
    def s(self) -> np.ndarray:
        """Worst gap over the test-function battery, per perturbed set."""
        return self.gaps.max(axis=1)

    def decreasing(self, tol: float = 0.0) -> bool:
        s = self.s
        return bool(np.all(np.diff(s) <= tol))


def default_test_functions(grid: Grid, set_radius: float) -> list[tuple[str, np.ndarray]]:
    """``phi = 1`` plus smooth Gaussian bumps placed just outside the set, on each axis."""
    pts = grid.centers()
    out = [("one", np.ones(grid.shape))]
    for ax in range(grid.dim):
        for sign in (1, -1):
            for dist in (0.25, 1.0):
                c = np.zeros(grid.dim)
                c[ax] = sign * (set_radius + dist)
                phi = np.exp(-np.sum((pts - c) ** 2, axis=-1) / (2 * 0.25**2))
                out.append((f"bump_ax{ax}{'+' if sign > 0 else '-'}{dist}", phi))
    return out


def perturbation_check(A: GridSet, perturbed: Sequence[GridSet], psi: GridField, t: float,
                       test_functions=None, **problem_kw) -> PerturbationReport:
    """Gaps ``|int (u^n_t - u_t) phi|`` between solutions for ``A`` and each ``A_n``.

    The initial data for ``A_n`` is ``max(psi, 1_{A_n})`` so that it stays admissible.
    """
    if test_functions is None:
        radius = max([A.extent_radius()] + [B.extent_radius() for B in perturbed])
        test_functions = default_test_functions(A.grid, radius)
    names = tuple(n for n, _ in test_functions)
    phis = np.stack([p for _, p in test_functions])
    vol = A.grid.cell_volume

    def functionals(S, f):
        u = solve(ParabolicProblem(S, f, horizon=t, **problem_kw), [t]).fields[0].values
        return phis.reshape(len(phis), -1) @ u.ravel() * vol

    base = functionals(A, psi)
    gaps, hd, sd = [], [], []
    for B in perturbed:
        gaps.append(np.abs(functionals(B, psi.maximum(B.indicator())) - base))
        hd.append(hausdorff_distance(A, B))
        sd.append(symmetric_difference_measure(A, B))
    return PerturbationReport(tuple(hd), tuple(sd), np.array(gaps).reshape(len(perturbed), len(names)), names)
