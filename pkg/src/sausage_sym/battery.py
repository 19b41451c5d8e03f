"""Named scenarios, randomized batteries and the refinement ladder.

A scenario stores its set and initial data as continuous shapes, so re-running
it at ``h/2`` (and ``delta/2`` for path checks) rasterizes the same geometry
on the finer lattice.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import compare, pde
from .compare import ComparisonReport
from .geometry import HalfSpace, lattice_directions
from .io import ConfigDoc, Field, csv_text, fmt, validate
from .shapes import Ball, Box, Bump, InitialData, Shape, random_initial, random_shape
from .stochastic import PathSpec

CHECKS = ("polarization_pointwise", "symmetrization_mass", "sausage_isoperimetry", "representation")
SUMMARY_HEADER = ("scenario", "theorem", "verdict", "worst_margin", "tolerance")
PLOT_HEADER = ("t", "lhs", "rhs", "margin", "tolerance")


@dataclass(frozen=True)
class Scenario:
    name: str
    check: str
    dim: int
    h: float
    shape: Shape
    times: tuple[float, ...] = (0.25, 0.5)
    initial: InitialData | None = None
    direction: tuple[int, ...] | None = None
    offset_steps: int = 0
    delta: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    diffusion: tuple[tuple[float, ...], ...] | None = None
    stop_factor: float = 3.0

    def __post_init__(self):
        if self.check not in CHECKS:
            raise ValueError(f"unknown check {self.check!r}; choose from {CHECKS}")
        if self.check == "polarization_pointwise" and self.direction is None:
            raise ValueError(f"scenario {self.name!r} needs a half-space direction")

    @property
    def horizon(self) -> float:
        return max(self.times)

    def halfspace(self, level: int = 0) -> HalfSpace:
        return HalfSpace.lattice(self.direction, self.offset_steps * 2**level, self.h / 2**level)

    def _reach(self) -> float:
        r = max(self.shape.bound(), self.initial.bound() if self.initial else 0.0)
        if self.check == "polarization_pointwise":
            r += 2 * abs(self.halfspace().offset)
        return r

    def _max_diffusivity(self) -> float:
        if self.diffusion is None:
            return 0.5
        return float(np.linalg.eigvalsh(np.asarray(self.diffusion)).max())

    def setup(self, level: int = 0):
        h = self.h / 2**level
        horizon = max(self.horizon, 1e-12)
        grid = pde.exterior_grid(self.dim, h, self._reach(), horizon, self._max_diffusivity())
        A = self.shape.rasterize(grid)
        psi = self.initial.rasterize(A) if self.initial else A.indicator()
        return A, psi

    def run(self, level: int = 0) -> ComparisonReport:
        A, psi = self.setup(level)
        delta = self.delta / 2**level
        if self.check == "polarization_pointwise":
            rep = compare.check_polarization_pointwise(A, psi, self.halfspace(level), self.times)
        elif self.check == "symmetrization_mass":
            sched = compare.default_schedule(A, self.stop_factor)
            rep = compare.check_symmetrization_mass(A, psi, self.times, sched)
        elif self.check == "sausage_isoperimetry":
            spec = PathSpec(self.horizon, delta if self.horizon > 0 else 1.0, dim=self.dim, seed=self.seed)
            rep = compare.check_sausage_isoperimetry(A, spec, self.n_paths)
        else:
            rep = compare.check_representation(A, self.horizon, delta, self.n_paths, self.times,
                                               seed=self.seed, diffusion=self.diffusion)
        rep.provenance.update({"scenario": self.name, "level": level, "config_hash": compare.config_hash(self.to_dict())})
        return rep

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "check": self.check,
            "dim": self.dim,
            "h": self.h,
            "set": self.shape.to_dict()["union"],
            "times": list(self.times),
            "seed": self.seed,
        }
        if self.initial is not None:
            d["initial"] = [{"center": list(b.center), "width": b.width, "amplitude": b.amplitude}
                            for b in self.initial.bumps]
        if self.direction is not None:
            d["halfspace"] = {"direction": list(self.direction), "offset_steps": self.offset_steps}
        if self.check in ("sausage_isoperimetry", "representation"):
            d["delta"] = self.delta
            d["n_paths"] = self.n_paths
        if self.diffusion is not None:
            d["diffusion"] = [list(r) for r in self.diffusion]
        if self.check == "symmetrization_mass":
            d["stop_factor"] = self.stop_factor
        return d


@dataclass
class ScenarioResult:
    scenario: Scenario
    report: ComparisonReport
    ladder: list[ComparisonReport] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return self.report.verdict

    def summary_row(self) -> tuple:
        r = self.report
        return (self.scenario.name, r.theorem, r.verdict, r.worst_margin, r.tolerance_used)


def run_scenario(sc: Scenario, refine: bool = False, levels: int = 1) -> ScenarioResult:
    """Run once; add the ``h/2`` (and ``delta/2``) ladder when violated, or on request when not exact."""
    rep = sc.run(0)
    res = ScenarioResult(sc, rep)
    if rep.verdict == compare.VIOLATED or (refine and rep.verdict == compare.WITHIN_TOL):
        res.ladder = [sc.run(k) for k in range(1, levels + 1)]
    return res


def _run_one(args):
    sc, refine = args
    return run_scenario(sc, refine)


def run_battery(scenarios: Sequence[Scenario], refine: bool = False, jobs: int = 1) -> list[ScenarioResult]:
    """Run every scenario; results keep the input order whatever ``jobs`` is."""
    work = [(sc, refine) for sc in scenarios]
    if jobs <= 1 or len(work) <= 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work))


def plot_csv(report: ComparisonReport) -> str:
    rows = [(t, l, r, m, report.tolerance_used)
            for t, l, r, m in zip(report.times, report.lhs, report.rhs, report.margin)]
    return csv_text(PLOT_HEADER, rows)


def summary_csv(results: Sequence[ScenarioResult]) -> str:
    return csv_text(SUMMARY_HEADER, [r.summary_row() for r in results])


def ladder_csv(results: Sequence[ScenarioResult]) -> str:
    rows = []
    for res in results:
        for level, rep in enumerate([res.report, *res.ladder]):
            if res.ladder:
                rows.append((res.scenario.name, level, fmt(res.scenario.h / 2**level), rep.verdict,
                             rep.worst_margin, rep.tolerance_used))
    return csv_text(("scenario", "level", "h", "verdict", "worst_margin", "tolerance"), rows)


def any_violated(results: Sequence[ScenarioResult]) -> bool:
    return any(r.verdict == compare.VIOLATED for r in results)


# random batteries

def _offset_steps(rng: np.random.Generator, h: float, direction, regime: str, reach: float) -> int:
    unit = h * math.sqrt(sum(v * v for v in direction)) / 2
    top = max(1, int(reach / unit))
    if regime == "through_origin":
        return 0
    k = int(rng.integers(1, top + 1))
    return k if regime == "contains_origin" else -k


def random_scenarios(check: str, dim: int, count: int, seed: int, h: float, times: Sequence[float],
                     halfspaces_per_mask: int = 3, delta: float = 1e-3, n_paths: int = 10_000,
                     random_initial_data: bool = True, prefix: str | None = None,
                     radius: float = 1.5) -> list[Scenario]:
    """``count`` random masks (and admissible initial data) for one check.

    Polarization masks get ``halfspaces_per_mask`` half-spaces cycling through
    three regimes: offset > 0 (contains the origin), offset < 0, offset = 0.
    """
    prefix = prefix or f"{check}_d{dim}"
    dirs = lattice_directions(dim)
    regimes = ("contains_origin", "excludes_origin", "through_origin")
    out = []
    for i in range(count):
        # per-mask streams: the same (seed, dim) gives the same masks for every check
        rng = np.random.default_rng([seed, dim, i])
        hs_rng = np.random.default_rng([seed, dim, i, 1])
        shape = random_shape(rng, dim, radius=radius, min_size=0.3, max_size=0.7)
        initial = random_initial(rng, shape, dim) if random_initial_data else None
        base = dict(dim=dim, h=h, shape=shape, times=tuple(float(t) for t in times), initial=initial,
                    delta=delta, n_paths=n_paths, seed=seed * 1_000_003 + i)
        if check == "polarization_pointwise":
            for k in range(halfspaces_per_mask):
                d = dirs[int(hs_rng.integers(len(dirs)))]
                steps = _offset_steps(hs_rng, h, d, regimes[k % 3], 1.0)
                out.append(Scenario(f"{prefix}_{i:03d}_h{k}", check, direction=d, offset_steps=steps, **base))
        else:
            if check in ("sausage_isoperimetry", "representation"):
                base["initial"] = None
            out.append(Scenario(f"{prefix}_{i:03d}", check, **base))
    return out


# config parsing

def _pos(v):
    return v > 0


def _times_ok(v):
    return len(v) > 0 and all(isinstance(t, (int, float)) and not isinstance(t, bool) and t >= 0 for t in v)


SCENARIO_SCHEMA = {
    "name": Field(str),
    "check": Field(str, check=lambda v: v in CHECKS, hint=f"one of {', '.join(CHECKS)}"),
    "dim": Field(int, check=lambda v: v in (1, 2, 3), hint="1, 2 or 3"),
    "h": Field(float, check=_pos, hint="grid spacing in length units, > 0"),
    "set": Field(list, check=lambda v: len(v) > 0, hint="non-empty list of primitives"),
    "times": Field(list, default=[0.25, 0.5], check=_times_ok, hint="non-negative times"),
    "initial": Field(list, default=None),
    "halfspace": Field(dict, default=None),
    "delta": Field(float, default=1e-3, check=_pos, hint="path time step, > 0"),
    "n_paths": Field(int, default=10_000, check=_pos),
    "seed": Field(int, default=None, check=lambda v: v >= 0),
    "diffusion": Field(list, default=None),
    "stop_factor": Field(float, default=3.0, check=_pos),
}

HALFSPACE_SCHEMA = {
    "direction": Field(list, hint="integer lattice direction such as [1, 0] or [1, -1]"),
    "offset_steps": Field(int, default=0, hint="offset in lattice half-steps h|n|/2"),
}

BUMP_SCHEMA = {
    "center": Field(list),
    "width": Field(float, check=_pos),
    "amplitude": Field(float, check=lambda v: 0 <= v <= 1, hint="in [0, 1]"),
}

RANDOM_SCHEMA = {
    "check": SCENARIO_SCHEMA["check"],
    "dim": SCENARIO_SCHEMA["dim"],
    "count": Field(int, check=_pos),
    "h": SCENARIO_SCHEMA["h"],
    "times": SCENARIO_SCHEMA["times"],
    "seed": Field(int, default=None, check=lambda v: v >= 0),
    "halfspaces_per_mask": Field(int, default=3, check=_pos),
    "delta": SCENARIO_SCHEMA["delta"],
    "n_paths": SCENARIO_SCHEMA["n_paths"],
    "random_initial": Field(bool, default=True),
    "prefix": Field(str, default=None),
}

BATTERY_SCHEMA = {
    "seed": Field(int, default=0, check=lambda v: v >= 0),
    "scenarios": Field(list, default=[]),
    "random": Field(list, default=[]),
}


def _vector(doc: ConfigDoc, v, where, dim, kind=float):
    if not isinstance(v, list) or len(v) != dim or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise doc.error(where, f"expected a list of {dim} numbers")
    if kind is int and not all(isinstance(x, int) for x in v):
        raise doc.error(where, "expected integers")
    return tuple(kind(x) for x in v)


def _shape(doc: ConfigDoc, items, where, dim) -> Shape:
    parts = []
    for i, item in enumerate(items):
        w = where + (i,)
        if not isinstance(item, dict) or len(item) != 1:
            raise doc.error(w, "each primitive is a one-key mapping: ball or box")
        (kind, spec), = item.items()
        if kind == "ball":
            s = validate(doc, spec, {"center": Field(list), "radius": Field(float, check=_pos)}, w + (kind,))
            parts.append(Ball(_vector(doc, s["center"], w + (kind, "center"), dim), s["radius"]))
        elif kind == "box":
            s = validate(doc, spec, {"min": Field(list), "max": Field(list)}, w + (kind,))
            lo = _vector(doc, s["min"], w + (kind, "min"), dim)
            hi = _vector(doc, s["max"], w + (kind, "max"), dim)
            if any(a > b for a, b in zip(lo, hi)):
                raise doc.error(w + (kind,), "box min exceeds max")
            parts.append(Box(lo, hi))
        else:
            raise doc.error(w + (kind,), "unknown primitive (allowed: ball, box)")
    return Shape(tuple(parts))


def scenario_from_config(doc: ConfigDoc, value, where: tuple = (), default_seed: int = 0) -> Scenario:
    s = validate(doc, value, SCENARIO_SCHEMA, where)
    dim = s["dim"]
    shape = _shape(doc, s["set"], where + ("set",), dim)
    initial = None
    if s["initial"] is not None:
        bumps = []
        for i, b in enumerate(s["initial"]):
            bw = where + ("initial", i)
            bb = validate(doc, b, BUMP_SCHEMA, bw)
            bumps.append(Bump(_vector(doc, bb["center"], bw + ("center",), dim), bb["width"], bb["amplitude"]))
        initial = InitialData(tuple(bumps))
    direction, steps = None, 0
    if s["halfspace"] is not None:
        hw = where + ("halfspace",)
        hs = validate(doc, s["halfspace"], HALFSPACE_SCHEMA, hw)
        direction = _vector(doc, hs["direction"], hw + ("direction",), dim, int)
        steps = hs["offset_steps"]
        try:
            HalfSpace.lattice(direction, steps, s["h"])
        except ValueError as exc:
            raise doc.error(hw, str(exc)) from None
    diffusion = None
    if s["diffusion"] is not None:
        rows = [_vector(doc, r, where + ("diffusion", i), dim) for i, r in enumerate(s["diffusion"])]
        if len(rows) != dim:
            raise doc.error(where + ("diffusion",), f"expected a {dim}x{dim} matrix")
        diffusion = tuple(rows)
    try:
        return Scenario(
            s["name"], s["check"], dim, s["h"], shape, tuple(float(t) for t in s["times"]), initial,
            direction, steps, s["delta"], s["n_paths"], default_seed if s["seed"] is None else s["seed"],
            diffusion, s["stop_factor"],
        )
    except ValueError as exc:
        raise doc.error(where, str(exc)) from None


def battery_from_config(doc: ConfigDoc, value=None, where: tuple = (), seed: int | None = None) -> list[Scenario]:
    """Explicit scenarios followed by the expanded random blocks; ``seed`` overrides the file's."""
    b = validate(doc, doc.data if value is None else value, BATTERY_SCHEMA, where)
    base_seed = b["seed"] if seed is None else seed
    out = [scenario_from_config(doc, sc, where + ("scenarios", i), base_seed)
           for i, sc in enumerate(b["scenarios"])]
    for i, blk in enumerate(b["random"]):
        r = validate(doc, blk, RANDOM_SCHEMA, where + ("random", i))
        out.extend(random_scenarios(
            r["check"], r["dim"], r["count"], base_seed + i if r["seed"] is None else r["seed"], r["h"],
            r["times"], r["halfspaces_per_mask"], r["delta"], r["n_paths"], r["random_initial"], r["prefix"],
        ))
    names = [sc.name for sc in out]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise doc.error(where + ("scenarios",), f"duplicate scenario name {dup[0]!r}")
    return out

