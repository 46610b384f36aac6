import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brownflow.noise import (
    W_MINUS,
    W_PLUS,
    NoiseBundle,
    cumulate,
    make_grid,
    sample_bundle,
)
from brownflow.flow_pm import (
    flow_map_pm,
    flow_property_check,
    noise_range,
    recover_noise_pm,
    simulate_n_point_pm,
    simulate_one_point_pm,
    step_pm,
)


def bundle(seed=0, t=1.0, dt=1e-3):
    return sample_bundle(make_grid(0.0, t, dt), [W_PLUS, W_MINUS], seed)


def manual_bundle(dwp, dwm, dt=1.0):
    g = make_grid(0.0, dt * len(dwp), dt)
    return NoiseBundle(grid=g, seed=0,
                       streams={W_PLUS: np.asarray(dwp, float),
                                W_MINUS: np.asarray(dwm, float)})


def test_step_pm_branches():
    assert step_pm(1.0, 0.5, -9.0) == 1.5
    assert step_pm(-1.0, 9.0, 0.25) == -0.75
    assert step_pm(0.0, 9.0, 0.25) == 0.25  # at zero: minus side


def test_step_pm_rejects_nonfinite():
    with pytest.raises(ValueError):
        step_pm(math.nan, 0.0, 0.0)


def test_one_point_follows_sides():
    b = manual_bundle([1.0, -3.0, 0.5], [0.1, 0.1, 0.1])
    path = simulate_one_point_pm(2.0, b)
    # 2 -> 3 (plus side) -> 0 (plus side) -> 0.1 (at zero: minus side)
    assert np.array_equal(path, [2.0, 3.0, 0.0, 0.1])


def test_missing_stream_rejected():
    g = make_grid(0.0, 0.1, 1e-2)
    b = NoiseBundle(grid=g, seed=0, streams={W_PLUS: np.zeros(10)})
    with pytest.raises(ValueError):
        simulate_one_point_pm(0.0, b)
    with pytest.raises(ValueError):
        simulate_n_point_pm([0.0], b)


def test_unsorted_rejected():
    with pytest.raises(ValueError):
        simulate_n_point_pm([1.0, 0.0], bundle())


def test_parallel_same_side():
    b = bundle(seed=4, t=0.01)  # short horizon: stays positive
    p = simulate_n_point_pm([1.0, 2.0], b)
    gaps = p.positions[1] - p.positions[0]
    assert np.all(np.abs(gaps - 1.0) < 1e-12) or p.coalescence_times[(0, 1)] < math.inf


def test_order_preservation_and_absorption():
    b = bundle(seed=12, t=2.0)
    x0 = [-0.5, -0.1, 0.05, 0.4]
    p = simulate_n_point_pm(x0, b)
    assert np.all(np.diff(p.positions, axis=0) >= 0)
    for (i, j), t in p.coalescence_times.items():
        if t < math.inf:
            k = b.grid.index_of(t)
            # bitwise identical forever after the merge
            assert np.array_equal(p.positions[i, k:], p.positions[j, k:])
            assert np.all(p.class_id[j, k:] == p.class_id[i, k:])


def test_duplicates_premerged():
    b = bundle(seed=1, t=0.1)
    p = simulate_n_point_pm([0.3, 0.3], b)
    assert p.coalescence_times[(0, 1)] == 0.0
    assert np.array_equal(p.positions[0], p.positions[1])


def test_crossing_pair_coalesces():
    # deterministic: minus side pushed up hard, plus side pinned
    dwp = np.zeros(5)
    dwm = np.full(5, 0.4)
    b = manual_bundle(dwp, dwm, dt=0.01)
    p = simulate_n_point_pm([-0.5, 0.2], b)
    assert p.coalescence_times[(0, 1)] < math.inf
    assert p.positions[0, -1] == p.positions[1, -1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6),
       st.lists(st.floats(-2, 2), min_size=1, max_size=5))
def test_order_preserved_property(seed, xs):
    x0 = np.sort(np.asarray(xs, float))
    b = bundle(seed=seed, t=0.2, dt=1e-2)
    p = simulate_n_point_pm(x0, b)
    assert np.all(np.diff(p.positions, axis=0) >= 0)


def test_flow_map_monotone():
    b = bundle(seed=7)
    m = flow_map_pm(np.linspace(-3, 3, 25), b)
    assert np.all(np.diff(m.images) >= 0)


def test_recover_noise():
    b = bundle(seed=21, t=0.5)
    span = noise_range(b) + 1.0
    grid_pts = np.array([-span - 1.0, -span, span, span + 1.0])
    m = flow_map_pm(grid_pts, b)
    wp, wm = recover_noise_pm(m)
    assert wp == pytest.approx(cumulate(b[W_PLUS])[-1], abs=1e-12)
    assert wm == pytest.approx(cumulate(b[W_MINUS])[-1], abs=1e-12)


def test_recover_noise_narrow_grid_rejected():
    b = bundle(seed=21, t=0.5)
    m = flow_map_pm(np.array([-0.2, -0.1, 0.1, 0.2]), b)
    with pytest.raises(ValueError):
        recover_noise_pm(m)


def test_flow_composition_exact():
    b = bundle(seed=33, t=1.0, dt=1e-2)
    rep = flow_property_check(b, 0.0, 0.5, 1.0, np.linspace(-2, 2, 9))
    # restarting at the intermediate images replays identical arithmetic
    assert rep["max_abs_deviation"] == 0.0


def test_zero_crossing_steps():
    b = manual_bundle([0.0, -2.0, 0.0], [1.0, 0.0, 3.0])
    p = simulate_n_point_pm([-0.5], b)
    # path: -0.5 -> 0.5 -> -1.5 -> 1.5 ; sign changes at every step
    assert list(p.zero_crossing_steps(0)) == [0, 1, 2]
