"""File formats: text rasters, CSV with exact decimals, and strict YAML configs.

Mask rasters hold one row of ``0``/``1`` characters per line; in 3D the
planes along the first axis are separated by a blank line.  Field rasters
use the same layout with space-separated ``%.17g`` values.  A ``# grid``
header line records ``dim h extent...`` so a raster can be read back alone.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
import yaml

from .errors import ConfigError
from .geometry import Grid, GridField, GridSet


def fmt(x) -> str:
    return format(float(x), ".17g")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


# rasters

def _header(grid: Grid) -> str:
    return "# grid " + " ".join([str(grid.dim), fmt(grid.h), *map(str, grid.extent)]) + "\n"


def _planes(arr: np.ndarray):
    if arr.ndim == 1:
        return [arr[None, :]]
    if arr.ndim == 2:
        return [arr]
    return list(arr)


def mask_to_text(A: GridSet) -> str:
    blocks = ["\n".join("".join("1" if v else "0" for v in row) for row in plane) for plane in _planes(A.mask)]
    return _header(A.grid) + "\n\n".join(blocks) + "\n"


def field_to_text(f: GridField) -> str:
    blocks = ["\n".join(" ".join(fmt(v) for v in row) for row in plane) for plane in _planes(f.values)]
    return _header(f.grid) + "\n\n".join(blocks) + "\n"


def _parse_raster(text: str, convert: Callable[[str], list]):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# grid"):
        raise ValueError("raster is missing its '# grid dim h extent...' header")
    head = lines[0].split()[2:]
    dim, h = int(head[0]), float(head[1])
    extent = tuple(int(v) for v in head[2:])
    grid = Grid(dim, h, extent)
    planes, cur = [], []
    for line in lines[1:]:
        if line.strip():
            cur.append(convert(line))
        elif cur:
            planes.append(cur)
            cur = []
    if cur:
        planes.append(cur)
    arr = np.array(planes)
    return grid, arr.reshape(extent)


def mask_from_text(text: str) -> GridSet:
    grid, arr = _parse_raster(text, lambda line: [c == "1" for c in line.strip()])
    return GridSet(grid, arr.astype(bool))


def field_from_text(text: str) -> GridField:
    grid, arr = _parse_raster(text, lambda line: [float(v) for v in line.split()])
    return GridField(grid, arr.astype(float))


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path


def csv_text(header: Iterable[str], rows: Iterable[Iterable[Any]]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# strict YAML

class ConfigDoc:
    """Parsed YAML plus the source line of every mapping key."""

    def __init__(self, data, lines: dict[tuple, int], path: str | None):
        self.data = data
        self.lines = lines
        self.path = path

    def line(self, where: tuple) -> int | None:
        while where:
            if where in self.lines:
                return self.lines[where]
            where = where[:-1]
        return self.lines.get((), None)

    def error(self, where: tuple, message: str) -> ConfigError:
        key = ".".join(str(k) for k in where) or "<root>"
        return ConfigError(f"{key}: {message}", self.path, self.line(where))


def _walk(node, where: tuple, lines: dict, path):
    lines.setdefault(where, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            key = k.value
            if key in seen:
                raise ConfigError(f"duplicate key {key!r}", path, k.start_mark.line + 1)
            seen.add(key)
            lines[where + (key,)] = k.start_mark.line + 1
            _walk(v, where + (key,), lines, path)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _walk(v, where + (i,), lines, path)


def parse_config(text: str, path: str | None = None) -> ConfigDoc:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", path, mark.line + 1 if mark else None) from None
    lines: dict[tuple, int] = {}
    if node is not None:
        _walk(node, (), lines, path)
    return ConfigDoc({} if data is None else data, lines, path)


def load_config(path) -> ConfigDoc:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))


class Field:
    """One schema entry: type check plus optional default."""

    REQUIRED = object()

    def __init__(self, kind, default=REQUIRED, check: Callable[[Any], bool] | None = None, hint: str = ""):
        self.kind = kind
        self.default = default
        self.check = check
        self.hint = hint

    @property
    def required(self) -> bool:
        return self.default is Field.REQUIRED


def _type_ok(kind, value) -> bool:
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind is Any:
        return True
    return isinstance(value, kind)


def validate(doc: ConfigDoc, value, schema: dict[str, Field], where: tuple = ()) -> dict:
    """Check ``value`` against ``schema``; return a dict with defaults filled in."""
    if not isinstance(value, dict):
        raise doc.error(where, "expected a mapping")
    unknown = sorted(set(value) - set(schema))
    if unknown:
        raise doc.error(where + (unknown[0],), f"unknown key (allowed: {', '.join(sorted(schema))})")
    out = {}
    for key, spec in schema.items():
        if key not in value:
            if spec.required:
                raise doc.error(where, f"missing required key {key!r}")
            out[key] = spec.default
            continue
        v = value[key]
        if v is None and spec.default is None:
            out[key] = None
            continue
        if not _type_ok(spec.kind, v):
            name = getattr(spec.kind, "__name__", str(spec.kind))
            raise doc.error(where + (key,), f"expected {name}, got {type(v).__name__}")
        if spec.kind is float:
            v = float(v)
        if spec.check is not None and not spec.check(v):
            raise doc.error(where + (key,), f"invalid value {v!r}" + (f" ({spec.hint})" if spec.hint else ""))
        out[key] = v
    return out
