import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import fista_lasso, lasso_objective
from prunekit.errors import NumericError, ShapeError
from prunekit.lasso import (
    ChannelResponses,
    channel_responses,
    kkt_residuals,
    lambda_max,
    lasso_solve,
    select_for_sparsity,
)
from prunekit.baselines import synthetic_layer


def random_problem(seed, c=None, N=60, n=4, correlated=True):
    rng = np.random.default_rng(seed)
    c = c or int(rng.integers(2, 21))
    Z = rng.standard_normal((c, N, n))
    if correlated:
        Z += 0.6 * rng.standard_normal((1, N, n))
    Z *= rng.uniform(0.2, 3.0, size=(c, 1, 1))
    y = np.tensordot(rng.standard_normal(c), Z, axes=(0, 0)) + 0.5 * rng.standard_normal((N, n))
    return ChannelResponses(Z=Z, y=y)


def kkt_violation(resp, beta, lam):
    """Direct recomputation of the optimality gap from the flattened residual."""
    r = resp.y - np.tensordot(beta, resp.Z, axes=(0, 0))
    g = np.array([np.sum(resp.Z[i] * r) for i in range(resp.c)]) / resp.N
    return np.where(beta == 0, np.maximum(np.abs(g) - lam, 0), np.abs(g - lam * np.sign(beta)))


def test_orthogonal_design_closed_form():
    rng = np.random.default_rng(0)
    N, c = 12, 4
    Q, _ = np.linalg.qr(rng.standard_normal((N, c)))
    Z = (Q.T * rng.uniform(0.5, 2, c)[:, None])[:, :, None]
    y = rng.standard_normal((N, 1))
    res = lasso_solve(ChannelResponses(Z=Z, y=y), 0.0)
    closed = [float(np.sum(Z[i] * y) / np.sum(Z[i] ** 2)) for i in range(c)]
    np.testing.assert_allclose(res.beta, closed, rtol=1e-9, atol=1e-12)


def test_lambda_max_formulas():
    Z = np.random.default_rng(1).standard_normal((1, 10, 2))
    resp = ChannelResponses(Z=Z, y=Z[0])
    assert lambda_max(resp) == pytest.approx(np.sum(Z[0] ** 2) / 10, rel=1e-12)
    assert lambda_max(ChannelResponses(Z=Z, y=np.zeros((10, 2)))) == 0.0


def test_lambda_max_brackets_sparsity():
    for seed in range(10):
        resp = random_problem(seed)
        lm = lambda_max(resp)
        assert lasso_solve(resp, 1.001 * lm).nnz == 0
        assert lasso_solve(resp, 0.9 * lm).nnz > 0


@pytest.mark.parametrize("seed", range(6))
def test_matches_reference_solver(seed):
    resp = random_problem(seed, c=5)
    lam = 0.2 * lambda_max(resp)
    res = lasso_solve(resp, lam)
    ref = fista_lasso(resp.Z, resp.y, lam)
    f_ref = lasso_objective(resp.Z, resp.y, ref, lam)
    assert res.objective <= f_ref * (1 + 1e-6)
    assert abs(res.objective - f_ref) <= 1e-6 * abs(f_ref)


def test_objective_field_recomputed_from_beta():
    resp = random_problem(3)
    lam = 0.1 * lambda_max(resp)
    res = lasso_solve(resp, lam)
    assert res.objective == pytest.approx(lasso_objective(resp.Z, resp.y, res.beta, lam), rel=1e-9)
    assert res.active == tuple(np.flatnonzero(res.beta))


def test_objective_nonincreasing_across_passes():
    resp = random_problem(4, c=12)
    lam = 0.05 * lambda_max(resp)
    vals = [lasso_solve(resp, lam, max_passes=k).objective for k in range(1, 30)]
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(vals, vals[1:]))


@given(st.integers(0, 10 ** 6), st.floats(0.0, 1.2))
@settings(max_examples=40, deadline=None)
def test_kkt_at_convergence(seed, frac):
    resp = random_problem(seed)
    lam = frac * lambda_max(resp)
    res = lasso_solve(resp, lam)
    assert np.all(kkt_violation(resp, res.beta, lam) <= 1e-5 * (1 + lam))
    assert np.all(kkt_residuals(resp, res.beta, lam) <= 1e-5 * (1 + lam))


def test_warm_and_cold_agree():
    resp = random_problem(5, c=15)
    lams = lambda_max(resp) * np.array([0.01, 0.05, 0.2, 0.5])
    warm = None
    for lam in lams:
        w = lasso_solve(resp, lam, warm_start=warm)
        cold = lasso_solve(resp, lam)
        assert w.objective == pytest.approx(cold.objective, rel=1e-6)
        warm = w.beta


def test_dead_channel_stays_zero():
    rng = np.random.default_rng(6)
    Z = rng.standard_normal((4, 30, 2))
    Z[2] = 0
    resp = ChannelResponses(Z=Z, y=rng.standard_normal((30, 2)))
    assert resp.dead.tolist() == [False, False, True, False]
    res = lasso_solve(resp, 0.0, warm_start=np.ones(4))
    assert res.beta[2] == 0
    sel = select_for_sparsity(resp, 3)
    assert 2 not in sel.active


def test_bad_inputs():
    Z = np.ones((2, 3, 1))
    with pytest.raises(NumericError):
        ChannelResponses(Z=Z, y=np.array([[1.0], [np.nan], [0.0]]))
    with pytest.raises(ShapeError):
        ChannelResponses(Z=Z, y=np.ones((4, 1)))
    resp = ChannelResponses(Z=Z, y=np.ones((3, 1)))
    with pytest.raises(ValueError):
        lasso_solve(resp, -1.0)
    with pytest.raises(ValueError):
        select_for_sparsity(resp, 3)


def test_full_keep_is_unpenalised():
    resp = random_problem(7, c=6)
    sel = select_for_sparsity(resp, 6)
    assert sel.lam == 0.0 and sel.nnz == 6
    np.testing.assert_allclose(sel.beta, lasso_solve(resp, 0.0).beta)


def test_zero_keep():
    resp = random_problem(8, c=6)
    sel = select_for_sparsity(resp, 0)
    assert sel.nnz == 0 and not np.any(sel.beta)


@pytest.mark.parametrize("seed", range(8))
def test_sparsity_target_and_trace(seed):
    resp = random_problem(seed, c=12)
    for cp in (1, 3, 6, 11):
        sel = select_for_sparsity(resp, cp)
        assert sel.nnz <= cp
        assert sel.gap == cp - sel.nnz
        ordered = sorted(sel.trace)
        assert all(b[1] <= a[1] for a, b in zip(ordered, ordered[1:]))


def test_exact_count_usually_reached():
    hits = 0
    for seed in range(20):
        resp = random_problem(seed, c=10)
        hits += select_for_sparsity(resp, 4).nnz == 4
    assert hits >= 18


def test_channel_responses_from_samples():
    syn = synthetic_layer(0, c=5, n=3)
    s, W = syn.samples, syn.weight
    resp = channel_responses(s, W)
    k = s.block
    for i in range(s.c):
        np.testing.assert_allclose(resp.Z[i], s.X[:, i * k:(i + 1) * k] @ W[:, i].reshape(3, -1).T)
    # the unit mask reproduces the unpruned layer
    pred = np.tensordot(np.ones(s.c), resp.Z, axes=(0, 0))
    np.testing.assert_allclose(pred, s.X @ W.reshape(3, -1).T, atol=1e-10)
