import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_field, random_mask
from sausage_sym.errors import Clipped, EmptySet, IncompatibleHalfSpace, Stalled
from sausage_sym.geometry import (
    Grid,
    GridField,
    GridSet,
    HalfSpace,
    PolarizationSchedule,
    ball_of_equal_volume,
    candidate_pool,
    centered_ball,
    equal_volume_radius,
    ball_surface_area,
    hausdorff_distance,
    in_halfspace_mask,
    lattice_directions,
    lattice_form,
    pair_sums,
    polarize_field,
    polarize_set,
    reflect_point,
    reflect_set,
    run_polarization_schedule,
    schwarz_rearrange,
    symmetric_difference_measure,
)
from sausage_sym.shapes import Ball, Box, interval, random_initial, random_shape, union


def line(h=0.1, half=5.0):
    return Grid.centered(1, h, half)


def cells(A):
    return np.round(A.grid.axis(0)[A.mask], 9)


# grid and half-space plumbing

def test_grid_requires_odd_extent():
    with pytest.raises(ValueError):
        Grid(2, 0.1, (10, 11))
    g = Grid(2, 0.1, (11, 11))
    assert g.centers()[5, 5].tolist() == [0.0, 0.0]


def test_refine_keeps_box():
    g = Grid.centered(2, 0.1, 2.0)
    f = g.refine()
    assert f.h == 0.05 and f.half_width == pytest.approx(g.half_width)


def test_gridset_rejects_edge_contact():
    g = line()
    m = np.zeros(g.shape, bool)
    m[0] = True
    with pytest.raises(Clipped):
        GridSet(g, m)


def test_halfspace_normal_must_be_unit():
    with pytest.raises(ValueError):
        HalfSpace((1.0, 1.0), 0.0)
    assert HalfSpace((0.6, 0.8), 0.1).in_family()
    assert not HalfSpace((1.0,), -0.1).in_family()


def test_lattice_form_roundtrip():
    h = 0.1
    for d in lattice_directions(2):
        for t in (-3, 0, 5):
            H = HalfSpace.lattice(d, t, h)
            assert lattice_form(H, h) == (d, t)


def test_incompatible_halfspace():
    A = interval(2, 3).rasterize(line())
    with pytest.raises(IncompatibleHalfSpace):
        reflect_set(A, HalfSpace((1.0,), 0.013))
    g = Grid.centered(2, 0.1, 2.0)
    B = centered_ball(g, 0.5)
    with pytest.raises(IncompatibleHalfSpace):
        polarize_set(B, HalfSpace((0.6, 0.8), 0.0))


def test_reflection_clipping_is_reported():
    g = line(0.1, 3.0)
    A = interval(2, 2.5).rasterize(g)
    with pytest.raises(Clipped):
        reflect_set(A, HalfSpace((1.0,), -1.0))


# reflections

def test_reflect_point_examples():
    H = HalfSpace((1.0, 0.0), 0.0)
    assert reflect_point(np.zeros(2), H).tolist() == [0.0, 0.0]
    assert reflect_point(np.array([3.0]), HalfSpace((1.0,), 1.0)).tolist() == [-1.0]


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(0.1, 2 * math.pi), st.floats(0.0, math.pi), st.floats(-3, 3))
def test_reflection_is_involutive_isometry(x, y, phi, theta, c):
    nu = (math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta))
    nrm = math.sqrt(sum(v * v for v in nu))
    H = HalfSpace(tuple(v / nrm for v in nu), c)
    x, y = np.array(x), np.array(y)
    assert np.allclose(reflect_point(reflect_point(x, H), H), x, atol=1e-12)
    d0 = np.linalg.norm(x - y)
    d1 = np.linalg.norm(reflect_point(x, H) - reflect_point(y, H))
    assert abs(d0 - d1) <= 1e-12 * max(1.0, d0)


def test_reflect_interval_example():
    A = interval(2, 3).rasterize(line())
    R = reflect_set(A, HalfSpace((1.0,), 1.0))
    assert cells(R).tolist() == cells(interval(-1, 0).rasterize(line())).tolist()
    assert R.count == A.count


def test_reflect_centered_ball_through_origin():
    g = Grid.centered(2, 0.1, 2.0)
    B = centered_ball(g, 0.73)
    for d in lattice_directions(2):
        assert reflect_set(B, HalfSpace.lattice(d, 0, 0.1)) == B


# polarization

def test_polarize_interval_example():
    A = interval(2, 3).rasterize(line())
    H = HalfSpace((1.0,), 1.0)
    assert cells(polarize_set(A, H)).tolist() == cells(interval(-1, 0).rasterize(line())).tolist()


def test_polarize_fixes_set_inside_h():
    A = interval(-2, -1).rasterize(line())
    assert polarize_set(A, HalfSpace((1.0,), 0.5)) == A


def test_polarize_fixes_symmetric_set():
    A = union(Box((-2.0,), (-1.0,)), Box((2.0,), (3.0,))).rasterize(line())
    H = HalfSpace((1.0,), 0.5)
    assert reflect_set(A, H) == A
    assert polarize_set(A, H) == A


def _random_pair(seed, dim):
    rng = np.random.default_rng(seed)
    h = 0.1
    g = Grid.centered(dim, h, {1: 3.0, 2: 1.5, 3: 0.7}[dim])
    A = random_mask(rng, g, float(rng.uniform(0.05, 0.6)))
    dirs = lattice_directions(dim)
    d = dirs[int(rng.integers(len(dirs)))]
    span = max(1, min(g.half) // 2)
    H = HalfSpace.lattice(d, int(rng.integers(-span, span + 1)), h)
    return rng, A, H


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_polarization_set_properties(seed, dim):
    _, A, H = _random_pair(seed, dim)
    R = reflect_set(A, H)
    P = polarize_set(A, H)
    assert R.count == A.count and P.count == A.count
    assert reflect_set(R, H) == A
    assert polarize_set(P, H) == P
    inH = in_halfspace_mask(A.grid, H)
    assert np.all(P.mask[inH & A.mask & R.mask])
    assert np.all(~P.mask | A.mask | R.mask)
    assert polarize_field(A.indicator(), H) == P.indicator()


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_polarization_field_properties(seed, dim):
    rng, A, H = _random_pair(seed, dim)
    u = random_field(rng, A)
    Pu = polarize_field(u, H)
    assert np.array_equal(np.sort(Pu.values, axis=None), np.sort(u.values, axis=None))
    assert polarize_field(Pu, H) == Pu
    su, ok = pair_sums(u, H)
    sp, _ = pair_sums(Pu, H)
    assert np.array_equal(su[ok], sp[ok])


def test_polarize_symmetric_field_unchanged(rng):
    g = line()
    vals = np.exp(-(g.axis(0) - 0.5) ** 2)
    vals[np.abs(g.axis(0) - 0.5) > 3.5] = 0
    u = GridField(g, vals)
    assert polarize_field(u, HalfSpace((1.0,), 0.5)) == u


def test_polarize_field_rejects_negative():
    g = line()
    with pytest.raises(ValueError):
        polarize_field(GridField(g, -np.ones(g.shape) * 0.1), HalfSpace((1.0,), 0.0))


@pytest.mark.parametrize("dim,half", [(1, 3.0), (2, 1.5), (3, 0.6)])
def test_ball_is_fixed_by_family(dim, half):
    g = Grid.centered(dim, 0.1, half)
    B = centered_ball(g, half * 0.45)
    for H in candidate_pool(g, half * 0.5):
        assert H.in_family()
        assert polarize_set(B, H) == B


# symmetrization

def test_ball_of_equal_volume_examples():
    g = line()
    A = interval(2, 3).rasterize(g)
    assert cells(ball_of_equal_volume(A)).tolist() == cells(interval(-0.5, 0.5).rasterize(g)).tolist()
    g2 = Grid.centered(2, 0.1, 2.0)
    B = centered_ball(g2, 1.23)
    assert ball_of_equal_volume(B) == B
    with pytest.raises(EmptySet):
        ball_of_equal_volume(GridSet.empty(g))


def test_equal_volume_disc_of_two_squares():
    r = equal_volume_radius(2.0, 2)
    assert r == pytest.approx(math.sqrt(2 / math.pi), rel=1e-15)
    errs = []
    for h in (0.1, 0.05, 0.025):
        g = Grid.centered(2, h, 3.0)
        A = union(Box((-2.0, -0.5), (-1.0 - 1e-9, 0.5 - 1e-9)), Box((1.0, -0.5), (2.0 - 1e-9, 0.5 - 1e-9))).rasterize(g)
        Bs = ball_of_equal_volume(A)
        assert abs(Bs.measure - A.measure) <= 2 * math.pi * r * h
        errs.append(abs(Bs.measure - 2.0))
    assert errs[-1] < errs[0]


def test_schwarz_indicator_is_ball():
    g = Grid.centered(2, 0.1, 2.0)
    B = centered_ball(g, 0.8)
    A = union(Box((0.5, 0.5), (1.2, 1.3))).rasterize(g)
    sA = schwarz_rearrange(A.indicator())
    assert sA.integral() == A.measure
    assert schwarz_rearrange(B.indicator()) == B.indicator()


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_schwarz_rearrangement_properties(seed, dim):
    rng = np.random.default_rng(seed)
    g = Grid.centered(dim, 0.1, 1.5)
    u = GridField(g, np.round(rng.random(g.shape), 2) * (rng.random(g.shape) < 0.5))
    s = schwarz_rearrange(u)
    assert np.array_equal(np.sort(s.values, axis=None), np.sort(u.values, axis=None))
    r2 = g.squared_index_norm().ravel()
    v = s.values.ravel()
    order = np.argsort(r2, kind="stable")
    # radially nonincreasing: value at a strictly larger radius never exceeds a smaller-radius value
    radii, inv = np.unique(r2[order], return_inverse=True)
    lo = np.full(radii.size, np.inf)
    hi = np.full(radii.size, -np.inf)
    np.minimum.at(lo, inv, v[order])
    np.maximum.at(hi, inv, v[order])
    assert np.all(hi[1:] <= lo[:-1])
    for level in (0.1, 0.5, 0.9):
        assert np.count_nonzero(s.values > level) == np.count_nonzero(u.values > level)


def test_schwarz_radial_input_unchanged():
    g = Grid.centered(2, 0.1, 1.5)
    r = np.sqrt(g.squared_index_norm()) * g.h
    u = GridField(g, np.clip(1 - r, 0, 1))
    assert schwarz_rearrange(u).l2_distance(u) < 1e-12


# distances

def _brute_hausdorff(A, B):
    pa = A.grid.centers()[A.mask]
    pb = B.grid.centers()[B.mask]
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_hausdorff_examples():
    g = line()
    A = interval(0, 1).rasterize(g)
    B = interval(0, 2).rasterize(g)
    assert hausdorff_distance(A, A) == 0
    assert hausdorff_distance(A, B) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(EmptySet):
        hausdorff_distance(A, GridSet.empty(g))


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_hausdorff_matches_brute_force(seed, dim):
    rng = np.random.default_rng(seed)
    g = Grid.centered(dim, 0.1, {1: 2.0, 2: 0.8, 3: 0.4}[dim])
    A, B, C = (random_mask(rng, g, 0.1, pad=1) for _ in range(3))
    if A.is_empty() or B.is_empty() or C.is_empty():
        return
    dab = hausdorff_distance(A, B)
    assert dab == pytest.approx(_brute_hausdorff(A, B), abs=1e-12)
    assert dab == hausdorff_distance(B, A)
    assert dab <= hausdorff_distance(A, C) + hausdorff_distance(C, B) + 1e-12
    assert (dab == 0) == (A == B)


def test_symmetric_difference_examples():
    g = line()
    A = interval(0, 2).rasterize(g)
    B = interval(1, 3).rasterize(g)
    assert symmetric_difference_measure(A, A) == 0
    assert symmetric_difference_measure(A, B) == pytest.approx(2.0, abs=1e-12)
    C = interval(-3, -2).rasterize(g)
    assert symmetric_difference_measure(A, C) == pytest.approx(A.measure + C.measure)


# schedules

def test_schedule_on_ball_stops_immediately():
    g = Grid.centered(2, 0.1, 2.0)
    B = centered_ball(g, 0.9)
    res = run_polarization_schedule(B, B.indicator(), PolarizationSchedule(tuple(candidate_pool(g, 1.0))))
    assert len(res) == 1 and res.stop_reason == "tolerance" and res.final.sym_diff == 0


def test_schedule_interval_reaches_grid_floor():
    g = Grid.centered(1, 0.05, 4.0)
    A = interval(1, 2).rasterize(g)
    sched = PolarizationSchedule(tuple(candidate_pool(g, 2.5)), stop_tol=g.h * (1 + 1e-9), max_steps=50)
    res = run_polarization_schedule(A, A.indicator(), sched)
    assert res.stop_reason == "tolerance"
    assert len(res) - 1 <= 50
    diffs = [s.sym_diff for s in res]
    assert all(b <= a for a, b in zip(diffs, diffs[1:]))
    assert all(s.set.count == A.count for s in res)


def test_greedy_schedule_monotone_on_random_masks():
    seeds_done = 0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        g = Grid.centered(2, 0.1, 3.0)
        shape = random_shape(rng, 2, radius=1.5, min_size=0.3, max_size=0.7)
        A = shape.rasterize(g)
        psi = random_initial(rng, shape, 2).rasterize(A)
        stop = 1.5 * g.h * ball_surface_area(equal_volume_radius(A.measure, 2), 2)
        sched = PolarizationSchedule(tuple(candidate_pool(g, 2.0)), stop_tol=stop, max_steps=40)
        try:
            res = run_polarization_schedule(A, psi, sched)
        except Stalled:
            continue
        seeds_done += 1
        diffs = [s.sym_diff for s in res]
        assert all(b <= a + 1e-12 for a, b in zip(diffs, diffs[1:]))
        for s in res:
            assert s.set.count == A.count
            assert np.array_equal(np.sort(s.field.values, axis=None), np.sort(psi.values, axis=None))
            assert np.all(s.field.values[s.set.mask] == 1.0)
    assert seeds_done >= 4


def test_schedule_requires_family():
    with pytest.raises(ValueError):
        PolarizationSchedule((HalfSpace((1.0,), -0.1),))


def test_schedule_rejects_null_set():
    g = line()
    with pytest.raises(EmptySet):
        run_polarization_schedule(GridSet.empty(g), GridField.constant(g, 0.0),
                                  PolarizationSchedule(tuple(candidate_pool(g, 1.0))))


def test_stalled_when_nothing_moves():
    g = line()
    A = interval(-2, -1).rasterize(g)
    # a single half-space that leaves A unchanged
    H = HalfSpace.lattice((1,), 10, g.h)
    with pytest.raises(Stalled):
        run_polarization_schedule(A, A.indicator(), PolarizationSchedule((H,), stop_tol=0.0))


def test_random_dense_schedule_is_reproducible():
    g = Grid.centered(2, 0.1, 2.0)
    A = union(Ball((0.6, 0.3), 0.4)).rasterize(g)
    pool = tuple(candidate_pool(g, 1.0))
    runs = [run_polarization_schedule(A, A.indicator(), PolarizationSchedule(pool, "random-dense", 0.0, 15, seed=4))
            for _ in range(2)]
    assert [s.halfspace for s in runs[0]] == [s.halfspace for s in runs[1]]
    assert runs[0].stop_reason in ("tolerance", "max_steps")


def test_lattice_directions():
    assert lattice_directions(1) == [(-1,), (1,)]
    d2 = lattice_directions(2)
    assert len(d2) == 8 and (1, -1) in d2 and (0, 1) in d2
    assert len(lattice_directions(3)) == 6 + 12
    for d in itertools.chain(d2, lattice_directions(3)):
        assert sum(abs(v) for v in d) in (1, 2)
