import warnings

import numpy as np
import pytest

from treedrnet.irls import (
    IrlsProblem,
    SingularSystemError,
    irls_solve,
    irls_weights,
    lp_loss,
    robustness_demo,
    weighted_lstsq,
)

from oracles import grid_argmin


def regression(seed, n=40, d=3, heavy=False):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, d - 1))])
    noise = rng.standard_t(1.5, size=n) if heavy else rng.normal(size=n)
    return X, X @ rng.normal(size=d) + noise


def test_p2_is_ordinary_least_squares():
    X, y = regression(0)
    res = irls_solve(IrlsProblem(X, y, p=2.0))
    ols = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(res.beta, ols, rtol=0, atol=1e-10)
    assert res.iterations == 1 and res.converged


def test_p1_intercept_is_the_median():
    y = np.array([1.0, 2.0, 100.0])
    res = irls_solve(IrlsProblem(np.ones((3, 1)), y, p=1.0, max_iters=500, tol=1e-12))
    grid_best = grid_argmin(lambda b: np.abs(y[None, :] - b[:, None]).sum(1), 0.0, 10.0)
    assert abs(res.beta[0] - grid_best) <= 1e-4
    assert abs(res.beta[0] - 2.0) <= 1e-4


def test_weight_formula():
    assert irls_weights(np.array([2.0]), p=1.0)[0] == 0.5
    assert irls_weights(np.array([-4.0]), p=1.5)[0] == 0.5
    assert irls_weights(np.array([0.0]), p=1.0, eps_w=1e-8)[0] == pytest.approx(1e8)
    np.testing.assert_array_equal(irls_weights(np.array([3.0, 0.0]), p=2.0), [1.0, 1.0])


def test_lp_loss_examples():
    X = np.eye(2)
    assert lp_loss(X, [1.0, 1.0], [1.0, 1.0], 1.0) == 0.0
    assert lp_loss(X, [0.0, 0.0], [1.0, -2.0], 1.0) == 3.0
    assert lp_loss(np.ones((1, 1)), [0.0], [3.0], 2.0) == 9.0


@pytest.mark.parametrize("p", [1.0, 1.3, 1.7])
@pytest.mark.parametrize("seed", range(3))
def test_loss_trace_is_non_increasing(p, seed):
    X, y = regression(seed, heavy=True)
    res = irls_solve(IrlsProblem(X, y, p=p, max_iters=100))
    trace = np.array(res.loss_trace)
    assert np.all(np.diff(trace) <= 1e-10)
    assert len(trace) == res.iterations + 1


def test_ols_is_a_fixed_point_for_p2():
    X, y = regression(4)
    ols = np.linalg.solve(X.T @ X, X.T @ y)
    step = weighted_lstsq(X, y, irls_weights(y - X @ ols, 2.0))
    assert np.linalg.norm(step - ols) < 1e-12


@pytest.mark.parametrize("p", [2.0, 1.5, 1.0])
def test_row_permutation_invariance(p):
    X, y = regression(5, heavy=True)
    perm = np.random.default_rng(0).permutation(len(y))
    a = irls_solve(IrlsProblem(X, y, p=p, max_iters=20))
    b = irls_solve(IrlsProblem(X[perm], y[perm], p=p, max_iters=20))
    np.testing.assert_allclose(a.beta, b.beta, rtol=0, atol=1e-12)


def test_rank_deficient_design():
    X = np.column_stack([np.ones(5), 2 * np.ones(5)])
    with pytest.raises(SingularSystemError):
        irls_solve(IrlsProblem(X, np.arange(5.0)))


def test_non_convergence_is_reported():
    X, y = regression(1, heavy=True)
    res = irls_solve(IrlsProblem(X, y, p=1.0, max_iters=2, tol=0.0))
    assert not res.converged and res.iterations == 2


@pytest.mark.parametrize("bad", [dict(p=0.0), dict(p=2.5), dict(eps_w=0.0)])
def test_invalid_problem(bad):
    X, y = regression(0)
    with pytest.raises(ValueError):
        IrlsProblem(X, y, **bad)
    with pytest.raises(ValueError, match="rows"):
        IrlsProblem(np.ones((2, 3)), np.ones(2))


def test_sub_one_exponent_warns():
    X, y = regression(0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        IrlsProblem(X, y, p=0.5)
    assert any("non-convex" in str(w.message) for w in caught)


# -- robustness demo --------------------------------------------------------


def slope_problem():
    x = np.arange(1.0, 21.0)
    noise = np.random.default_rng(3).normal(scale=0.1, size=20)
    return x[:, None], 1.5 * x + noise


def test_zero_outlier_gives_zero_displacement():
    X, y = slope_problem()
    rep = robustness_demo(X, y, 0.0)
    assert rep["fits"]["p2"]["displacement"] == 0.0
    assert rep["fits"]["p1"]["displacement"] == 0.0


def test_absolute_loss_resists_an_outlier():
    X, y = slope_problem()
    rep = robustness_demo(X, y, 99.0, outlier_index=10)
    assert rep["fits"]["p1"]["displacement"] < rep["fits"]["p2"]["displacement"]


def test_demo_report_is_self_consistent():
    X, y = slope_problem()
    rep = robustness_demo(X, y, 99.0, outlier_index=10)
    y_bad = y.copy()
    y_bad[10] *= 100.0
    for key, p in (("p2", 2.0), ("p1", 1.0)):
        fit = rep["fits"][key]
        assert abs(lp_loss(X, y, fit["beta_clean"], p) - fit["trace_clean"][-1]) <= 1e-10 * max(1.0, fit["loss_clean"])
        assert abs(lp_loss(X, y_bad, fit["beta_contaminated"], p) - fit["loss_contaminated"]) \
            <= 1e-10 * max(1.0, fit["loss_contaminated"])
