import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgsearch.tasks import (
    TooSmallDatasetError,
    d_best,
    generate_offline_dataset,
    get_task,
    load_dataset,
    make_dataset,
    normalize_score,
    oracle_eval,
    save_dataset,
)


def test_known_values():
    assert oracle_eval(get_task("quadratic-bowl"), np.zeros(5)) == 0.0
    assert oracle_eval(get_task("neg-ackley"), np.zeros(10)) == pytest.approx(0.0, abs=1e-12)
    x = np.zeros(10)
    x[0] = 1.0
    assert oracle_eval(get_task("neg-rastrigin"), x) == pytest.approx(-1.0, abs=1e-12)
    assert oracle_eval(get_task("neg-rosenbrock"), np.ones(8)) == 0.0


def test_ackley_formula_off_origin():
    x = np.full(10, 0.5)
    d = 10
    ref = -20 * math.exp(-0.2 * math.sqrt(sum(v * v for v in x) / d))
    ref -= math.exp(sum(math.cos(2 * math.pi * v) for v in x) / d)
    ref += 20 + math.e
    assert oracle_eval(get_task("neg-ackley"), x) == pytest.approx(-ref, rel=1e-13)


def test_oracle_clamps_and_rejects_nan():
    t = get_task("quadratic-bowl")
    assert oracle_eval(t, np.full(5, 10.0)) == oracle_eval(t, np.full(5, 2.0))
    with pytest.raises(ValueError):
        oracle_eval(t, np.array([np.nan, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        oracle_eval(t, np.zeros(3))


def test_unknown_task():
    with pytest.raises(KeyError):
        get_task("sphere")


def test_dataset_counts_and_determinism():
    t = get_task("neg-ackley")
    full = generate_offline_dataset(t, 1000, 100, seed=4)
    assert full.n == 1000
    ds = generate_offline_dataset(t, 1000, 40, seed=4)
    assert ds.n == 400
    again = generate_offline_dataset(t, 1000, 40, seed=4)
    assert np.array_equal(ds.inputs, again.inputs) and np.array_equal(ds.outputs, again.outputs)
    assert np.all(ds.inputs >= t.lo) and np.all(ds.inputs <= t.hi)
    assert ds.pool_min <= ds.outputs.min() and ds.pool_max >= ds.outputs.max()


def test_truncation_matches_pool_quantile():
    t = get_task("neg-rastrigin")
    pool = generate_offline_dataset(t, 1000, 100, seed=8)
    ds = generate_offline_dataset(t, 1000, 40, seed=8)
    cut = np.sort(pool.outputs)[399]
    assert ds.outputs.max() == cut
    raw, norm = d_best(ds)
    assert raw == cut
    assert norm == pytest.approx((cut - pool.outputs.min()) / (pool.outputs.max() - pool.outputs.min()))
    assert norm < 1.0


def test_too_small_dataset():
    with pytest.raises(TooSmallDatasetError):
        generate_offline_dataset(get_task("quadratic-bowl"), 1000, 4, seed=0)
    with pytest.raises(ValueError):
        generate_offline_dataset(get_task("quadratic-bowl"), 50, 40, seed=0)


def test_normalize_score_endpoints_and_degenerate():
    ds = make_dataset("quadratic-bowl", np.zeros((2, 5)), [1.0, 2.0], -4.0, 6.0, -2, 2)
    assert normalize_score(-4.0, ds) == 0.0
    assert normalize_score(6.0, ds) == 1.0
    assert normalize_score(11.0, ds) == 1.5  # raw value kept, clipping is a report concern
    flat = make_dataset("quadratic-bowl", np.zeros((2, 5)), [1.0, 1.0], 1.0, 1.0, -2, 2)
    with pytest.raises(ValueError):
        normalize_score(1.0, flat)


@given(st.floats(-100, 100), st.floats(0.001, 50))
def test_normalize_strictly_increasing(y, dy):
    ds = make_dataset("quadratic-bowl", np.zeros((2, 5)), [0.0, 1.0], -200.0, 200.0, -2, 2)
    assert normalize_score(y + dy, ds) > normalize_score(y, ds)


def test_d_best_small():
    ds = make_dataset("quadratic-bowl", np.zeros((3, 5)), [1.0, 2.0, 3.0], 0.0, 10.0, -2, 2)
    assert d_best(ds) == (3.0, 0.3)
    two = make_dataset("quadratic-bowl", np.zeros((2, 5)), [0.0, 5.0], 0.0, 10.0, -2, 2)
    assert d_best(two)[0] == 5.0
    with pytest.raises(TooSmallDatasetError):
        make_dataset("quadratic-bowl", np.zeros((1, 5)), [1.0], 0.0, 1.0, -2, 2)


def test_degenerate_std_guard():
    ds = make_dataset("quadratic-bowl", np.ones((4, 5)), np.full(4, 7.0), 0.0, 10.0, -2, 2)
    assert ds.out_std == 1.0 and np.all(ds.in_std == 1.0)


def test_dataset_file_round_trip(tmp_path):
    ds = generate_offline_dataset(get_task("neg-rosenbrock"), 500, 40, seed=2)
    meta = save_dataset(ds, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == ",".join([f"x{j}" for j in range(8)] + ["y"])
    assert "pool_min=" in meta.read_text()
    back = load_dataset(tmp_path / "d.csv")
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.outputs, ds.outputs)
    assert back.pool_min == ds.pool_min and back.pool_max == ds.pool_max
    assert np.array_equal(back.in_std, ds.in_std) and back.out_mean == ds.out_mean
