"""Resolution-independent set and initial-data descriptions.

Sets are unions of closed balls and boxes given in physical coordinates, so
the same scenario can be rasterized at ``h`` and again at ``h/2`` for
refinement runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Grid, GridField, GridSet


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.sum((pts - c) ** 2, axis=-1) <= self.radius**2 * (1 + 1e-12)

    def bound(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius

    def to_dict(self):
        return {"ball": {"center": list(self.center), "radius": self.radius}}


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        eps = 1e-9 * max(1.0, float(np.max(np.abs(self.hi))), float(np.max(np.abs(self.lo))))
        lo = np.asarray(self.lo, dtype=float) - eps
        hi = np.asarray(self.hi, dtype=float) + eps
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def bound(self) -> float:
        corners = np.maximum(np.abs(self.lo), np.abs(self.hi))
        return float(np.linalg.norm(corners))

    def to_dict(self):
        return {"box": {"min": list(self.lo), "max": list(self.hi)}}


@dataclass(frozen=True)
class Shape:
    """Union of primitives."""

    parts: tuple = ()

    def rasterize(self, grid: Grid) -> GridSet:
        pts = grid.centers()
        mask = np.zeros(grid.shape, dtype=bool)
        for p in self.parts:
            mask |= p.contains(pts)
        return GridSet(grid, mask)

    def bound(self) -> float:
        """Radius of a centered ball containing the shape."""
        return max((p.bound() for p in self.parts), default=0.0)

    def to_dict(self):
        return {"union": [p.to_dict() for p in self.parts]}


@dataclass(frozen=True)
class Bump:
    """Bump ``amplitude * (1 - |x-c|^2/w^2)^2`` on ``|x-c| < w``, zero outside."""

    center: tuple[float, ...]
    width: float
    amplitude: float

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        r2 = np.sum((pts - np.asarray(self.center)) ** 2, axis=-1) / self.width**2
        return self.amplitude * np.where(r2 < 1, (1 - r2) ** 2, 0.0)


@dataclass(frozen=True)
class InitialData:
    """``psi = max(1_A, sum of bumps)`` clipped to [0, 1]."""

    bumps: tuple[Bump, ...] = field(default_factory=tuple)

    def rasterize(self, A: GridSet) -> GridField:
        pts = A.grid.centers()
        vals = np.zeros(A.grid.shape)
        for b in self.bumps:
            vals += b.evaluate(pts)
        vals = np.clip(vals, 0.0, 1.0)
        vals[A.mask] = 1.0
        return GridField(A.grid, vals)

    def bound(self) -> float:
        return max((float(np.linalg.norm(b.center)) + b.width for b in self.bumps), default=0.0)


def interval(lo: float, hi: float) -> Shape:
    return Shape((Box((lo,), (hi,)),))


def union(*parts) -> Shape:
    return Shape(tuple(parts))


def random_shape(rng: np.random.Generator, dim: int, radius: float = 1.2,
                 max_parts: int = 3, min_size: float = 0.15, max_size: float = 0.5) -> Shape:
    """Union of one to ``max_parts`` random balls/boxes inside the ball of ``radius``."""
    parts = []
    for _ in range(int(rng.integers(1, max_parts + 1))):
        size = float(rng.uniform(min_size, max_size))
        reach = radius - size * np.sqrt(dim)
        center = tuple(float(v) for v in rng.uniform(-reach, reach, size=dim))
        if dim == 1 or rng.random() < 0.5:
            half = rng.uniform(0.5, 1.0, size=dim) * size
            parts.append(Box(tuple(np.subtract(center, half)), tuple(np.add(center, half))))
        else:
            parts.append(Ball(center, size))
    return Shape(tuple(parts))


def random_initial(rng: np.random.Generator, shape: Shape, dim: int, n_bumps: int = 2) -> InitialData:
    """Random admissible initial data: bumps near the parts of ``shape``."""
    bumps = []
    for _ in range(n_bumps):
        part = shape.parts[int(rng.integers(len(shape.parts)))]
        anchor = np.asarray(part.center if isinstance(part, Ball) else np.add(part.lo, part.hi) / 2)
        center = tuple(float(v) for v in anchor + rng.normal(0, 0.3, size=dim))
        bumps.append(Bump(center, float(rng.uniform(0.2, 0.5)), float(rng.uniform(0.3, 1.0))))
    return InitialData(tuple(bumps))


def shape_from_dict(d) -> Shape:
    """Inverse of ``Shape.to_dict`` (also accepts a bare list of primitives)."""
    items = d["union"] if isinstance(d, dict) else d
    parts = []
    for item in items:
        (kind, spec), = item.items()
        if kind == "ball":
            parts.append(Ball(tuple(float(v) for v in spec["center"]), float(spec["radius"])))
        elif kind == "box":
            parts.append(Box(tuple(float(v) for v in spec["min"]), tuple(float(v) for v in spec["max"])))
        else:
            raise ValueError(f"unknown primitive {kind!r}")
    return Shape(tuple(parts))

