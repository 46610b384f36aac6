import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brownflow.noise import (
    W_MINUS,
    W_PLUS,
    CovarianceKind,
    NoiseBundle,
    TimeGrid,
    aux,
    cumulate,
    derive_key,
    derive_seed,
    dump_bundle,
    load_bundle,
    make_grid,
    sample_bundle,
)


def test_make_grid_exact_multiple():
    g = make_grid(0.0, 1.0, 1e-3)
    assert g.n_steps == 1000
    assert g.remainder == pytest.approx(0.0, abs=1e-15)
    assert g.t_end == pytest.approx(1.0)


def test_make_grid_rounds_and_records_remainder():
    g = make_grid(0.0, 1.0005, 1e-3)
    assert g.n_steps == 1000 or g.n_steps == 1001
    assert abs(g.remainder) <= 0.5e-3 + 1e-12
    assert g.t_start + g.n_steps * g.dt + g.remainder == pytest.approx(1.0005)


def test_grid_validation():
    with pytest.raises(ValueError):
        make_grid(0.0, 1.0, -0.1)
    with pytest.raises(ValueError):
        make_grid(0.0, -1.0, 0.1)
    with pytest.raises(ValueError):
        TimeGrid(t_start=math.nan, dt=0.1, n_steps=5)


def test_index_of():
    g = make_grid(0.0, 1.0, 0.25)
    assert g.index_of(0.5) == 2
    with pytest.raises(ValueError):
        g.index_of(0.3)


def test_times_multiplicative():
    g = make_grid(0.0, 1.0, 1e-3)
    # no accumulation drift: time(k) must be exactly k*dt
    assert g.time(1000) == 1000 * 1e-3
    assert len(g.times()) == 1001


def test_sample_bundle_deterministic():
    g = make_grid(0.0, 0.1, 1e-3)
    b1 = sample_bundle(g, [W_PLUS, W_MINUS], seed=99)
    b2 = sample_bundle(g, [W_PLUS, W_MINUS], seed=99)
    assert np.array_equal(b1[W_PLUS], b2[W_PLUS])
    assert np.array_equal(b1[W_MINUS], b2[W_MINUS])
    b3 = sample_bundle(g, [W_PLUS], seed=100)
    assert not np.array_equal(b1[W_PLUS], b3[W_PLUS])


def test_adding_label_does_not_perturb_others():
    g = make_grid(0.0, 0.1, 1e-3)
    small = sample_bundle(g, [W_PLUS], seed=5)
    big = sample_bundle(g, [W_PLUS, W_MINUS, aux(0)], seed=5)
    assert np.array_equal(small[W_PLUS], big[W_PLUS])


def test_duplicate_labels_rejected():
    g = make_grid(0.0, 0.1, 1e-3)
    with pytest.raises(ValueError):
        sample_bundle(g, [W_PLUS, W_PLUS], seed=1)


def test_stream_stats():
    g = make_grid(0.0, 10.0, 1e-3)
    b = sample_bundle(g, [W_PLUS], seed=0)
    s = b[W_PLUS]
    assert abs(s.mean()) < 5 * math.sqrt(g.dt / g.n_steps)
    assert s.var() == pytest.approx(g.dt, rel=0.05)


def test_cumulate():
    path = cumulate([1.0, 2.0, -0.5])
    assert np.array_equal(path, [0.0, 1.0, 3.0, 2.5])


@given(st.lists(st.floats(-1e3, 1e3), max_size=50))
def test_cumulate_length_and_start(incs):
    p = cumulate(incs)
    assert len(p) == len(incs) + 1
    assert p[0] == 0.0


def test_subwindow_bit_identical():
    g = make_grid(0.0, 1.0, 1e-2)
    b = sample_bundle(g, [W_PLUS, W_MINUS], seed=3)
    sub = b.subwindow(10, 60)
    assert sub.grid.n_steps == 50
    assert sub.grid.t_start == pytest.approx(0.1)
    assert np.array_equal(sub[W_PLUS], b[W_PLUS][10:60])


def test_bundle_length_mismatch_rejected():
    g = make_grid(0.0, 0.1, 1e-2)
    with pytest.raises(ValueError):
        NoiseBundle(grid=g, seed=0, streams={W_PLUS: np.zeros(3)})


def test_dump_load_roundtrip(tmp_path):
    g = make_grid(0.0, 0.25, 1e-3)
    b = sample_bundle(g, [W_PLUS, W_MINUS, aux(1)], seed=77)
    path = tmp_path / "bundle.bin"
    dump_bundle(b, path)
    b2 = load_bundle(path)
    assert b2.seed == 77
    assert b2.grid.dt == b.grid.dt
    assert b2.grid.n_steps == b.grid.n_steps
    for label in b.labels:
        assert np.array_equal(b[label], b2[label])


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"not a bundle")
    with pytest.raises(ValueError):
        load_bundle(p)


def test_derive_key_and_seed_distinct():
    assert derive_key(1, W_PLUS) != derive_key(1, W_MINUS)
    assert derive_key(1, W_PLUS) != derive_key(2, W_PLUS)
    assert derive_seed(1, "replica", 0) != derive_seed(1, "replica", 1)
    assert 0 <= derive_seed(9, "x") < 2 ** 63


def test_covariance_values():
    pm = CovarianceKind.C_PM
    plus = CovarianceKind.C_PLUS
    assert pm(1.0, 2.0) == 1.0
    assert pm(-1.0, -2.0) == 1.0
    assert pm(-1.0, 1.0) == 0.0
    assert plus(1.0, 2.0) == 1.0
    assert plus(-1.0, -2.0) == 0.0
    assert plus(0.0, 1.0) == 0.0


@given(st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=50)
def test_covariance_equals_basis_sum(x, y):
    for kind in CovarianceKind:
        total = sum(e(x) * e(y) for e in kind.basis)
        assert kind(x, y) == total
