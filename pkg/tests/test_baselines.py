import csv
import io
import math

import numpy as np
import pytest

from oracles import random_samples, subset_errors
from prunekit.baselines import (
    BRUTE_FORCE,
    CSV_COLUMNS,
    FIRST_K,
    LASSO,
    MAX_RESPONSE,
    STRATEGIES,
    brute_force_select,
    compare_strategies,
    keep_count,
    rows_to_csv,
    run_strategy,
    select_first_k,
    select_max_response,
    synthetic_layer,
)
from prunekit.errors import CombinatorialGuardError
from prunekit.reconstruction import lsq_error


def test_first_k():
    assert select_first_k(5, 2) == [0, 1]
    assert select_first_k(4, 4) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        select_first_k(3, 4)


def test_max_response_ranking_and_ties():
    W = np.ones((2, 4, 1, 1))
    W[:, 2] = -3.0
    assert select_max_response(W, 1) == [2]
    assert select_max_response(np.ones((2, 4, 1, 1)), 2) == [0, 1]
    W = np.ones((1, 5, 1, 1))
    W[0, 3] = 2
    assert select_max_response(W, 3) == [0, 1, 3]


def test_brute_force_full_set():
    s = random_samples(np.random.default_rng(0), c=4, n=2, k=(2, 2), N=100)
    out = brute_force_select(s, None, 4)
    assert out.active == (0, 1, 2, 3)
    assert out.relative_mse == pytest.approx(lsq_error(s, range(4)), rel=1e-9)


def test_brute_force_planted_channel():
    rng = np.random.default_rng(1)
    s = random_samples(rng, c=3, n=2, k=(3, 3), N=100)
    W2 = rng.standard_normal((2, 9))
    s.Y = s.channel(1) @ W2.T
    out = brute_force_select(s, None, 1)
    assert out.active == (1,) and out.relative_mse < 1e-12


def test_brute_force_guard():
    s = random_samples(np.random.default_rng(2), c=30, n=1, N=40)
    with pytest.raises(CombinatorialGuardError):
        brute_force_select(s, None, 15)


@pytest.mark.parametrize("seed", range(5))
def test_brute_force_is_global_minimum(seed):
    syn = synthetic_layer(seed)
    errs = subset_errors(syn.samples, 4)
    best = min(errs, key=lambda k: (errs[k], k))
    out = brute_force_select(syn.samples, syn.weight, 4)
    assert out.relative_mse == pytest.approx(errs[best], rel=1e-6)
    for strategy in (LASSO, FIRST_K, MAX_RESPONSE):
        assert out.relative_mse <= run_strategy(strategy, syn.samples, syn.weight, 4).relative_mse + 1e-12


def test_full_keep_rows_identical():
    syn = synthetic_layer(3)
    rows = compare_strategies(syn.samples, syn.weight, [8])
    assert len({round(r.relative_mse, 12) for r in rows}) == 1


@pytest.mark.parametrize("seed", range(5))
def test_mse_nonincreasing_in_keep(seed):
    syn = synthetic_layer(seed)
    rows = compare_strategies(syn.samples, syn.weight, range(1, 9))
    for strategy in STRATEGIES:
        errs = [r.relative_mse for r in rows if r.strategy == strategy]
        assert len(errs) == 8
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:])), strategy


def test_csv_contract():
    syn = synthetic_layer(0)
    cps = [keep_count(8, r) for r in (0.25, 0.5, 0.75)]
    rows = compare_strategies(syn.samples, syn.weight, cps)
    text = rows_to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert len(parsed) == 12
    assert [r["strategy"] for r in parsed[:4]] == list(STRATEGIES)
    assert [int(r["c_prime"]) for r in parsed] == [2] * 4 + [4] * 4 + [6] * 4


def test_compare_skips_brute_force_past_guard():
    s = random_samples(np.random.default_rng(4), c=12, n=2, N=60)
    W = np.random.default_rng(5).standard_normal((2, 12, 1, 1))
    rows = compare_strategies(s, W, [6], guard=math.comb(12, 6) - 1)
    assert BRUTE_FORCE not in {r.strategy for r in rows} and len(rows) == 3


def test_keep_count():
    assert keep_count(8, 0.25) == 2 and keep_count(8, 0.01) == 1 and keep_count(8, 1.0) == 8


def test_synthetic_layer_is_seeded():
    a, b = synthetic_layer(7), synthetic_layer(7)
    np.testing.assert_array_equal(a.samples.X, b.samples.X)
    np.testing.assert_array_equal(a.weight, b.weight)
    assert a.samples.X.shape == (400, 72) and a.weight.shape == (8, 8, 3, 3)
