"""Theorem-level checks built from the geometry, PDE and Monte Carlo engines.

Each check returns a ``ComparisonReport`` whose ``margin`` is ``rhs - lhs``
per time: non-negative margins mean the predicted inequality holds.  The
continuum statements are exact; on the grid a small negative margin is
accepted up to ``tolerance_used`` and reported as ``holds_within_tol``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import pde
from .errors import EmptySet
from .geometry import (
    GridField,
    GridSet,
    HalfSpace,
    PolarizationSchedule,
    ball_surface_area,
    candidate_pool,
    equal_volume_radius,
    pair_sums,
    polarize_field,
    polarize_set,
    run_polarization_schedule,
    schwarz_rearrange,
)
from .stochastic import PathSpec, hitting_integral, sausage_volume, sausage_volumes

HOLDS = "holds"
WITHIN_TOL = "holds_within_tol"
VIOLATED = "violated"
_SEVERITY = {HOLDS: 0, WITHIN_TOL: 1, VIOLATED: 2}

# margins above -NUMERICAL_FLOOR are at linear-solver round-off level
NUMERICAL_FLOOR = 1e-8


def verdict_for(margins: Sequence[float], tolerance: float, floor: float = NUMERICAL_FLOOR) -> str:
    worst = min(margins) if len(margins) else 0.0
    if worst < -tolerance:
        return VIOLATED
    if worst >= -floor:
        return HOLDS
    return WITHIN_TOL


def worst_verdict(*verdicts: str) -> str:
    return max(verdicts, key=_SEVERITY.__getitem__)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ComparisonReport:
    theorem: str
    times: list[float]
    lhs: list[float]
    rhs: list[float]
    tolerance_used: float
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    verdict: str = ""
    floor: float = NUMERICAL_FLOOR

    def __post_init__(self):
        if not self.verdict:
            self.verdict = verdict_for(self.margin, self.tolerance_used, self.floor)

    @property
    def margin(self) -> list[float]:
        return [r - l for l, r in zip(self.lhs, self.rhs)]

    @property
    def worst_margin(self) -> float:
        m = self.margin
        return min(m) if m else 0.0


def _grid_provenance(A: GridSet) -> dict:
    g = A.grid
    return {"dim": g.dim, "h": g.h, "extent": list(g.extent)}


def symmetrized_set(A: GridSet) -> GridSet:
    """Support of the rearranged indicator: the ``count(A)`` cells nearest the origin.

    Equal to the lattice ball when ``count(A)`` fills whole distance shells;
    otherwise the outermost shell is filled in lexicographic order.  Unlike
    ``ball_of_equal_volume`` its measure equals ``|A|`` exactly.
    """
    if A.is_empty():
        raise EmptySet("symmetrization of a null set")
    return GridSet(A.grid, schwarz_rearrange(A.indicator()).values > 0.5)


def _solve(A: GridSet, psi: GridField, times, horizon=None, **kw) -> pde.Solution:
    horizon = horizon or max(times)
    return pde.solve(pde.ParabolicProblem(A, psi, horizon=horizon, **kw), times)


def _fields(A, psi, times, solution=None, **kw) -> dict[float, GridField]:
    positive = [t for t in times if t > 0]
    out = {0.0: psi} if any(t == 0 for t in times) else {}
    if positive:
        sol = solution or _solve(A, psi, positive, **kw)
        out.update({t: sol.field_at(t) for t in positive})
    return out


def check_polarization_pointwise(A: GridSet, psi: GridField, H: HalfSpace, times: Sequence[float],
                                 tol: float | None = None, base_solution: pde.Solution | None = None,
                                 **solver_kw) -> ComparisonReport:
    """Pair-sum comparison ``v(x)+v(sigma x) <= u(x)+u(sigma x)`` on ``H``.

    ``u`` solves the problem for ``(A, psi)`` and ``v`` the one for the
    polarized data ``(P_H A, P_H psi)``; both live on ``A``'s grid.
    """
    times = [float(t) for t in times]
    tol = 5 * A.grid.h if tol is None else tol
    PA, Ppsi = polarize_set(A, H), polarize_field(psi, H)
    u = _fields(A, psi, times, base_solution, **solver_kw)
    v = _fields(PA, Ppsi, times, **solver_kw)
    lhs, rhs = [], []
    for t in times:
        su, ok = pair_sums(u[t], H)
        sv, _ = pair_sums(v[t], H)
        gap = np.where(ok, su - sv, np.inf)
        k = np.unravel_index(int(np.argmin(gap)), gap.shape)
        lhs.append(float(sv[k]))
        rhs.append(float(su[k]))
    return ComparisonReport(
        "polarization_pointwise",
        times,
        lhs,
        rhs,
        tol,
        provenance={"grid": _grid_provenance(A), "halfspace": [list(H.normal), H.offset]},
        extra={"in_family": H.in_family(), "polarized_equals_original": bool(PA == A and Ppsi == psi)},
    )


def check_symmetrization_mass(A: GridSet, psi: GridField, times: Sequence[float],
                              sched: PolarizationSchedule | None = None, tol: float | None = None,
                              run_chain: bool = True, **solver_kw) -> ComparisonReport:
    """``mass(v_t) <= mass(u_t)`` for the symmetrized problem, plus the polarization chain.

    The chain solves the problem for every ``(A_n, psi^n)`` along the schedule
    and checks ``mass(u^n_t) <= mass(u^{n-1}_t) + tol`` at every step.
    """
    if A.is_empty():
        raise EmptySet("the mass comparison needs |A| > 0")
    times = [float(t) for t in times]
    h = A.grid.h
    tol = 5 * h * A.measure if tol is None else tol
    A_star = symmetrized_set(A)
    psi_star = schwarz_rearrange(psi)
    u = _fields(A, psi, times, **solver_kw)
    v = _fields(A_star, psi_star, times, **solver_kw)
    lhs = [v[t].integral() for t in times]
    rhs = [u[t].integral() for t in times]
    extra: dict = {}
    verdict = verdict_for([r - l for l, r in zip(lhs, rhs)], tol)
    if run_chain:
        if sched is None:
            sched = default_schedule(A)
        res = run_polarization_schedule(A, psi, sched)
        chain = [rhs]
        for step in res.steps[1:]:
            f = _fields(step.set, step.field, times, **solver_kw)
            chain.append([f[t].integral() for t in times])
        chain_arr = np.array(chain)
        steps_margin = (chain_arr[:-1] - chain_arr[1:]) if len(chain) > 1 else np.zeros((0, len(times)))
        chain_margin = float(steps_margin.min()) if steps_margin.size else 0.0
        extra = {
            "chain_masses": chain_arr.tolist(),
            "chain_worst_margin": chain_margin,
            "chain_final_gap": (chain_arr[-1] - np.array(lhs)).tolist(),
            "schedule_steps": len(res) - 1,
            "schedule_stop": res.stop_reason,
            "sym_diff": [s.sym_diff for s in res.steps],
            "stop_tol": sched.stop_tol,
        }
        extra["chain_verdict"] = verdict_for([chain_margin], tol)
        verdict = worst_verdict(verdict, extra["chain_verdict"])
    return ComparisonReport(
        "symmetrization_mass",
        times,
        lhs,
        rhs,
        tol,
        provenance={"grid": _grid_provenance(A)},
        extra=extra,
        verdict=verdict,
    )


def default_schedule(A: GridSet, stop_factor: float = 3.0, max_steps: int = 200) -> PolarizationSchedule:
    """Greedy schedule over all compatible half-spaces, stopping at ``3 h`` times the ball perimeter."""
    r = equal_volume_radius(A.measure, A.grid.dim)
    stop = stop_factor * A.grid.h * ball_surface_area(r, A.grid.dim)
    reach = max(A.extent_radius(), r) + A.grid.h
    return PolarizationSchedule(tuple(candidate_pool(A.grid, reach)), "greedy", stop, max_steps)


def check_sausage_isoperimetry(A: GridSet, spec: PathSpec, n_paths: int) -> ComparisonReport:
    """``E|sausage(A*)| <= E|sausage(A)|`` on common random numbers.

    The tolerance is the combined 95% half-width ``sqrt(hw_A^2 + hw_A*^2)``.
    """
    prov = {"grid": _grid_provenance(A), "seed": spec.seed, "T": spec.horizon, "delta": spec.step,
            "n_paths": n_paths, "scheme": spec.scheme}
    if A.is_empty():
        return ComparisonReport("sausage_isoperimetry", [spec.horizon], [0.0], [0.0], 0.0, prov,
                                {"null_set": True})
    A_star = symmetrized_set(A)
    est_star, est = sausage_volumes(spec, [A_star, A], n_paths)
    tol = math.hypot(est.half_width_95, est_star.half_width_95)
    diff = est.samples - est_star.samples
    paired = 1.96 * float(diff.std(ddof=1)) / math.sqrt(n_paths) if n_paths > 1 else 0.0
    return ComparisonReport(
        "sausage_isoperimetry",
        [spec.horizon],
        [est_star.mean],
        [est.mean],
        tol,
        prov,
        {"half_width_A": est.half_width_95, "half_width_A_star": est_star.half_width_95,
         "paired_half_width": paired, "measure": A.measure},
    )


def check_representation(A: GridSet, horizon: float, delta: float, n_paths: int,
                         times: Sequence[float] | None = None, seed: int = 0, rel_tol: float = 0.02,
                         diffusion=None, **solver_kw) -> ComparisonReport:
    """PDE mass against the stamp and hitting-integral Monte Carlo estimates.

    ``diffusion`` is an optional constant matrix ``a``; the paths then use
    ``sigma`` with ``sigma sigma^T = 2 a``.  Per time the report stores the
    larger gap in units of the band ``rel_tol * mass + 95% half-width`` as
    ``lhs`` with ``rhs = 0``, so the tolerance is 1 at every time.
    """
    times = [float(t) for t in (times if times is not None else [horizon])]
    dim = A.grid.dim
    sigma = None
    if diffusion is not None:
        a = np.asarray(diffusion, dtype=float)
        s = np.linalg.cholesky(2 * a)
        sigma = lambda t, s=s: s  # noqa: E731
        solver_kw.setdefault("operator", pde.OperatorSpec.constant(a))
    psi = A.indicator()
    positive = [t for t in times if t > 0]
    sol = _solve(A, psi, positive, **solver_kw) if positive else None
    lhs, rhs, rows = [], [], []
    tol_max = 0.0
    for t in times:
        m_pde = (psi if t == 0 else sol.field_at(t)).integral()
        spec = PathSpec(t, min(delta, t) if t > 0 else delta, dim=dim, sigma=sigma, seed=seed)
        stamp = sausage_volume(spec, A, n_paths)
        hit = hitting_integral(PathSpec(t, spec.step, dim=dim, sigma=sigma, seed=seed + 1), A, t, n_paths)
        gaps = [abs(stamp.mean - m_pde), abs(hit.integral - m_pde)]
        band = rel_tol * m_pde + max(stamp.half_width_95, hit.half_width_95)
        lhs.append(max(g / band if band > 0 else (0.0 if g == 0 else math.inf) for g in gaps))
        rhs.append(0.0)
        rows.append({"t": t, "pde_mass": m_pde, "stamp": stamp.mean, "stamp_hw": stamp.half_width_95,
                     "hitting_integral": hit.integral, "hitting_hw": hit.half_width_95,
                     "rel_gap_stamp": gaps[0] / m_pde, "rel_gap_hitting": gaps[1] / m_pde, "band": band})
        tol_max = max(tol_max, band)
    return ComparisonReport(
        "representation",
        times,
        lhs,
        rhs,
        1.0,
        provenance={"grid": _grid_provenance(A), "seed": seed, "delta": delta, "n_paths": n_paths},
        extra={"rows": rows, "band_max": tol_max},
    )
