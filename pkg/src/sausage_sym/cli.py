"""Command-line front end.

Usage::

    sausage-sym polarize --config set.yaml --out out/
    sausage-sym solve    --config problem.yaml
    sausage-sym sausage  --config paths.yaml --seed 3
    sausage-sym check    --config scenario.yaml --refine
    sausage-sym battery  [--config battery.yaml] --jobs 2

Every run writes ``manifest.json`` with the resolved config and the sha256 of
each artifact; passing a manifest back as ``--config`` repeats the run.
Exit codes: 0 holds, 2 some verdict violated, 1 operational error.
"""

from __future__ import annotations

import argparse
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, battery, compare, pde
from .compare import ComparisonReport
from .errors import ConfigError
from .geometry import Grid, HalfSpace, polarize_field, polarize_set
from .io import (
    ConfigDoc,
    Field,
    canonical_json,
    csv_text,
    field_from_text,
    field_to_text,
    load_config,
    mask_from_text,
    mask_to_text,
    parse_config,
    sha256_bytes,
    validate,
    write_text,
)
from .stochastic import PathSpec, hitting_integral, sausage_volume

COMMANDS = ("polarize", "solve", "sausage", "check", "battery")
OUT_ENV = "SAUSAGE_SYM_OUT"
EXIT_OK, EXIT_ERROR, EXIT_VIOLATED = 0, 1, 2


def emit_plot_data(report: ComparisonReport, path=None) -> str:
    """Long-format CSV ``t, lhs, rhs, margin, tolerance`` with 17 significant digits."""
    text = battery.plot_csv(report)
    if path is not None:
        write_text(path, text)
    return text


def default_battery_text() -> str:
    return resources.files("sausage_sym").joinpath("data/default_battery.yaml").read_text()


# per-command schemas; lengths in the unit of h, times in problem units

_SET_KEYS = {
    "grid": Field(dict, default=None),
    "dim": Field(int, default=None, check=lambda v: v in (1, 2, 3)),
    "h": Field(float, default=None, check=lambda v: v > 0),
    "set": Field(list, default=None),
    "set_raster": Field(str, default=None),
    "half_width": Field(float, default=None, check=lambda v: v > 0),
    "initial": Field(Any, default=None),
}
GRID_SCHEMA = {
    "dim": Field(int, check=lambda v: v in (1, 2, 3)),
    "h": Field(float, check=lambda v: v > 0),
    "extent": Field(Any, hint="odd cell count, or one odd count per axis"),
}
OPERATOR_SCHEMA = {
    "mode": Field(str, default="laplacian_half", check=lambda v: v in ("laplacian_half", "general")),
    "matrix": Field(list, default=None),
    "times": Field(list, default=None),
    "matrices": Field(list, default=None),
}
_COMMON = {
    "command": Field(str, default=None, check=lambda v: v in COMMANDS),
    "seed": Field(int, default=0, check=lambda v: v >= 0),
}
SCHEMAS = {
    "polarize": {**_COMMON, **_SET_KEYS, "halfspace": Field(dict)},
    "solve": {
        **_COMMON,
        **_SET_KEYS,
        "times": Field(list, check=battery._times_ok),
        "dt": Field(float, default=None, check=lambda v: v > 0),
        "integrator": Field(str, default="backward_euler", check=lambda v: v in pde.INTEGRATORS),
        "operator": Field(dict, default=None),
    },
    "sausage": {
        **_COMMON,
        **_SET_KEYS,
        "horizon": Field(float, check=lambda v: v >= 0),
        "delta": Field(float, default=1e-3, check=lambda v: v > 0),
        "n_paths": Field(int, default=10_000, check=lambda v: v > 0),
        "scheme": Field(str, default="gaussian_increments",
                        check=lambda v: v in ("gaussian_increments", "donsker_walk")),
        "hitting_integral": Field(bool, default=False),
    },
}


def _resolve_path(doc: ConfigDoc, p: str) -> str:
    base = Path(doc.path).parent if doc.path else Path.cwd()
    return str((base / p).resolve())


def _grid_and_set(doc: ConfigDoc, cfg: dict, reach_extra: float = 0.0, horizon: float = 0.0,
                  max_diffusivity: float = 0.5):
    if cfg["set_raster"] is not None:
        if cfg["set"] is not None:
            raise doc.error(("set_raster",), "give either set or set_raster, not both")
        path = _resolve_path(doc, cfg["set_raster"])
        try:
            A = mask_from_text(Path(path).read_text())
        except OSError as exc:
            raise doc.error(("set_raster",), f"cannot read raster: {exc.strerror}") from None
        except ValueError as exc:
            raise doc.error(("set_raster",), f"bad raster: {exc}") from None
        cfg["set_raster"] = path
        return A
    grid = None
    if cfg["grid"] is not None:
        if cfg["dim"] is not None or cfg["h"] is not None or cfg["half_width"] is not None:
            raise doc.error(("grid",), "give either a grid block or dim/h/half_width")
        g = validate(doc, cfg["grid"], GRID_SCHEMA, ("grid",))
        ext = g["extent"]
        ext = [ext] * g["dim"] if isinstance(ext, int) and not isinstance(ext, bool) else ext
        ext = battery._vector(doc, ext, ("grid", "extent"), g["dim"], int)
        try:
            grid = Grid(g["dim"], g["h"], ext)
        except ValueError as exc:
            raise doc.error(("grid",), str(exc)) from None
        cfg["dim"], cfg["h"] = g["dim"], g["h"]
    for key in ("dim", "h", "set"):
        if cfg[key] is None:
            raise doc.error((), f"missing required key {key!r}")
    shape = battery._shape(doc, cfg["set"], ("set",), cfg["dim"])
    if grid is None and cfg["half_width"] is not None:
        grid = Grid.centered(cfg["dim"], cfg["h"], cfg["half_width"])
    if grid is None:
        grid = pde.exterior_grid(cfg["dim"], cfg["h"], shape.bound() + reach_extra, max(horizon, 1e-12),
                                 max_diffusivity)
    try:
        return shape.rasterize(grid)
    except ValueError as exc:
        raise doc.error(("set",), str(exc)) from None


def _initial(doc: ConfigDoc, cfg: dict, A):
    """``zero``/``indicator`` (the default), ``{raster: path}`` or a list of bumps; always 1 on ``A``."""
    init = cfg["initial"]
    if init is None or init in ("zero", "indicator"):
        return A.indicator()
    if isinstance(init, dict):
        r = validate(doc, init, {"raster": Field(str)}, ("initial",))
        path = _resolve_path(doc, r["raster"])
        try:
            f = field_from_text(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise doc.error(("initial", "raster"), f"cannot read field raster: {exc}") from None
        if f.grid != A.grid:
            raise doc.error(("initial", "raster"), "field raster grid differs from the set grid")
        cfg["initial"] = {"raster": path}
        return f.maximum(A.indicator())
    if not isinstance(init, list):
        raise doc.error(("initial",), "expected zero, indicator, {raster: path} or a list of bumps")
    bumps = []
    for i, b in enumerate(cfg["initial"]):
        bb = validate(doc, b, battery.BUMP_SCHEMA, ("initial", i))
        bumps.append(battery.Bump(battery._vector(doc, bb["center"], ("initial", i, "center"), A.grid.dim),
                                  bb["width"], bb["amplitude"]))
    return battery.InitialData(tuple(bumps)).rasterize(A)


class Run:
    """Collects artifacts for one command and writes them with the manifest."""

    def __init__(self, command: str, out: Path):
        self.command = command
        self.out = out
        self.artifacts: dict[str, str] = {}

    def write(self, name: str, text: str):
        write_text(self.out / name, text)
        self.artifacts[name] = sha256_bytes(text.encode())

    def finish(self, config: dict, exit_code: int):
        resolved = canonical_json(config)
        manifest = {
            "manifest_version": 1,
            "command": self.command,
            "package_version": __version__,
            "config": config,
            "config_sha256": sha256_bytes(resolved.encode()),
            "artifacts": dict(sorted(self.artifacts.items())),
            "exit_code": exit_code,
        }
        write_text(self.out / "manifest.json", canonical_json(manifest))
        return exit_code


def _cmd_polarize(doc, cfg, args, run: Run) -> int:
    hw = ("halfspace",)
    hs = validate(doc, cfg["halfspace"], battery.HALFSPACE_SCHEMA, hw)
    dim = cfg["dim"]
    if dim is None and cfg["set_raster"] is None:
        raise doc.error((), "missing required key 'dim'")
    h = cfg["h"]
    A0 = None
    if cfg["set_raster"] is not None:
        A0 = _grid_and_set(doc, cfg)
        dim, h = A0.grid.dim, A0.grid.h
    direction = battery._vector(doc, hs["direction"], hw + ("direction",), dim, int)
    try:
        H = HalfSpace.lattice(direction, hs["offset_steps"], h)
    except ValueError as exc:
        raise doc.error(hw, str(exc)) from None
    A = A0 if A0 is not None else _grid_and_set(doc, cfg, 2 * abs(H.offset))
    PA = polarize_set(A, H)
    run.write("set.mask", mask_to_text(A))
    run.write("polarized.mask", mask_to_text(PA))
    if cfg["initial"] is not None:
        run.write("polarized_initial.field", field_to_text(polarize_field(_initial(doc, cfg, A), H)))
    run.write("summary.csv", csv_text(
        ("quantity", "value"),
        [("count", A.count), ("polarized_count", PA.count), ("measure", A.measure),
         ("polarized_measure", PA.measure), ("normal", " ".join(str(v) for v in H.normal)),
         ("offset", H.offset), ("in_family", H.in_family())],
    ))
    cfg["halfspace"] = hs
    return EXIT_OK


def _operator(doc: ConfigDoc, value, dim: int) -> pde.OperatorSpec:
    where = ("operator",)
    op = validate(doc, value, OPERATOR_SCHEMA, where)
    if op["mode"] == "laplacian_half":
        if op["matrix"] is not None or op["matrices"] is not None:
            raise doc.error(where, "laplacian_half takes no coefficients")
        return pde.OperatorSpec()

    def matrix(m, w):
        if not isinstance(m, list) or len(m) != dim:
            raise doc.error(w, f"expected a {dim}x{dim} matrix")
        return np.array([battery._vector(doc, r, w + (i,), dim) for i, r in enumerate(m)])

    try:
        if op["matrix"] is not None:
            if op["matrices"] is not None or op["times"] is not None:
                raise doc.error(where, "give either matrix or times/matrices")
            return pde.OperatorSpec.constant(matrix(op["matrix"], where + ("matrix",)))
        if op["matrices"] is None or op["times"] is None:
            raise doc.error(where, "general mode needs matrix or times/matrices")
        mats = [matrix(m, where + ("matrices", i)) for i, m in enumerate(op["matrices"])]
        return pde.OperatorSpec.tabulated([float(t) for t in op["times"]], mats)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise doc.error(where, str(exc)) from None


def _cmd_solve(doc, cfg, args, run: Run) -> int:
    times = sorted(float(t) for t in cfg["times"])
    T = max(times)
    if T <= 0:
        raise doc.error(("times",), "need at least one positive time")
    kw = {}
    a_max = 0.5
    if cfg["operator"] is not None:
        dim = cfg["dim"] if cfg["dim"] is not None else (cfg["grid"] or {}).get("dim", 1)
        kw["operator"] = _operator(doc, cfg["operator"], dim)
        # largest eigenvalue is at most d * max |a_ij|
        a_max = kw["operator"].bound_K * dim
    A = _grid_and_set(doc, cfg, horizon=T, max_diffusivity=a_max)
    psi = _initial(doc, cfg, A)
    problem = pde.ParabolicProblem(A, psi, horizon=T, dt=cfg["dt"], integrator=cfg["integrator"], **kw)
    positive = [t for t in times if t > 0]
    sol = pde.solve(problem, positive)
    rows = []
    for t in times:
        f = psi if t == 0 else sol.field_at(t)
        upto = sol.step_times <= t + 1e-12
        rows.append((t, f.integral(), float(sol.residuals[upto].max()), float(sol.shell_leak[upto].max())))
        run.write(f"field_t{t:.17g}.field", field_to_text(f))
    run.write("mass.csv", csv_text(("t", "mass", "residual_max", "shell_leak"), rows))
    run.write("diagnostics.csv", csv_text(
        ("step", "t", "mass", "residual", "iterations", "shell_leak"),
        [(i, float(t), float(m), float(r), int(k), float(s)) for i, (t, m, r, k, s) in enumerate(
            zip(sol.step_times, sol.masses, sol.residuals, sol.iterations, sol.shell_leak))],
    ))
    return EXIT_OK


def _cmd_sausage(doc, cfg, args, run: Run) -> int:
    T = cfg["horizon"]
    A = _grid_and_set(doc, cfg, horizon=T)
    spec = PathSpec(T, cfg["delta"], dim=A.grid.dim, seed=cfg["seed"], scheme=cfg["scheme"])
    rows = []
    est = sausage_volume(spec, A, cfg["n_paths"])
    rows.append(("stamp", T, spec.step, est.n_paths, est.mean, est.half_width_95, spec.seed))
    if cfg["hitting_integral"]:
        hit_spec = PathSpec(T, cfg["delta"], dim=A.grid.dim, seed=cfg["seed"] + 1, scheme=cfg["scheme"])
        hit = hitting_integral(hit_spec, A, T, cfg["n_paths"])
        rows.append(("hitting_integral", T, hit_spec.step, hit.n_paths, hit.integral, hit.half_width_95,
                     hit_spec.seed))
        run.write("hitting_probability.field", field_to_text(hit.field))
    run.write("sausage.csv", csv_text(("method", "T", "delta", "n_paths", "mean", "ci_half_width", "seed"), rows))
    return EXIT_OK


def _report_rows(res: battery.ScenarioResult):
    out = [("scenario.csv", emit_plot_data(res.report))]
    for k, rep in enumerate(res.ladder, start=1):
        out.append((f"scenario_refined{k}.csv", emit_plot_data(rep)))
    return out


def _cmd_check(doc, cfg, args, run: Run) -> int:
    value = _strip_flags(doc_data(doc))
    if args.seed is not None:
        value["seed"] = args.seed
    sc = battery.scenario_from_config(doc, value, (), 0)
    res = battery.run_scenario(sc, refine=args.refine)
    for name, text in _report_rows(res):
        run.write(name, text)
    run.write("summary.csv", battery.summary_csv([res]))
    if res.ladder:
        run.write("refinement.csv", battery.ladder_csv([res]))
    cfg.clear()
    cfg.update(sc.to_dict())
    return EXIT_VIOLATED if res.verdict == compare.VIOLATED else EXIT_OK


def _cmd_battery(doc, cfg, args, run: Run) -> int:
    scenarios = battery.battery_from_config(doc, _strip_flags(doc_data(doc)), (), args.seed)
    results = battery.run_battery(scenarios, refine=args.refine, jobs=args.jobs)
    for res in results:
        for name, text in _report_rows(res):
            run.write(f"scenarios/{res.scenario.name}/{name}", text)
    run.write("summary.csv", battery.summary_csv(results))
    if any(r.ladder for r in results):
        run.write("refinement.csv", battery.ladder_csv(results))
    cfg.clear()
    cfg["scenarios"] = [sc.to_dict() for sc in scenarios]
    return EXIT_VIOLATED if battery.any_violated(results) else EXIT_OK


def _strip_flags(data: dict) -> dict:
    return {k: v for k, v in data.items() if k not in ("command", "refine")}


HANDLERS = {"polarize": _cmd_polarize, "solve": _cmd_solve, "sausage": _cmd_sausage,
            "check": _cmd_check, "battery": _cmd_battery}


def doc_data(doc: ConfigDoc) -> dict:
    data = doc.data
    if not isinstance(data, dict):
        raise doc.error((), "expected a mapping at the top level")
    return data


def _unwrap_manifest(doc: ConfigDoc) -> tuple[ConfigDoc, str | None]:
    data = doc.data
    if isinstance(data, dict) and "manifest_version" in data:
        lines = {k[1:]: v for k, v in doc.lines.items() if k[:1] == ("config",)}
        return ConfigDoc(data["config"], lines, doc.path), data.get("command")
    return doc, None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sausage-sym", description="Polarization, exterior heat problems and "
                                "Wiener sausage checks on lattice sets.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=str, default=None, help="YAML (or manifest.json) config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=str, default="out", help=f"output directory (env {OUT_ENV} overrides)")
    p.add_argument("--refine", action="store_true", help="re-run non-exact verdicts at h/2 and delta/2")
    p.add_argument("--jobs", type=int, default=1, help="parallel scenario workers for battery")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    out = Path(os.environ.get(OUT_ENV) or args.out)
    try:
        if args.config is None:
            if args.command != "battery":
                raise ConfigError(f"command {args.command!r} needs --config")
            doc = parse_config(default_battery_text(), "<default battery>")
        else:
            doc = load_config(args.config)
        doc, manifest_cmd = _unwrap_manifest(doc)
        data = doc_data(doc)
        declared = manifest_cmd or data.get("command")
        if declared is not None and declared != args.command:
            raise doc.error(("command",), f"config is for {declared!r}, not {args.command!r}")
        if args.command in SCHEMAS:
            cfg = validate(doc, data, SCHEMAS[args.command])
            if args.seed is not None:
                cfg["seed"] = args.seed
        else:
            cfg = {}
        cfg["command"] = args.command
        if data.get("refine") is True:
            args.refine = True
        job = Run(args.command, out)
        code = HANDLERS[args.command](doc, cfg, args, job)
        cfg["command"] = args.command
        if args.command in ("check", "battery"):
            cfg["refine"] = args.refine
        return job.finish(cfg, code)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
