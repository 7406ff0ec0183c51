"""Least squares, logistic fits, folds, and the group-penalized selector."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterdr import (
    EstimationError,
    InputError,
    cross_fit_folds,
    logistic_fit,
    multinomial_group_lasso,
    predict_proba,
    wls_fit,
)

import oracles


# --------------------------------------------------------------------------
# weighted least squares
# --------------------------------------------------------------------------


def test_wls_matches_normal_equations():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((50, 4))
    b = rng.standard_normal(50)
    wt = rng.random(50) + 0.1
    fit = wls_fit(a, b, weights=wt)
    want = oracles.normal_equations_wls(a, b, wt)
    assert fit.rank == 4
    assert fit.columns_dropped == ()
    assert np.max(np.abs(fit.coefficients - want)) < 1e-9


def test_ols_is_unit_weights():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((30, 3))
    b = rng.standard_normal(30)
    f1 = wls_fit(a, b)
    f2 = wls_fit(a, b, weights=np.ones(30))
    assert np.allclose(f1.coefficients, f2.coefficients, atol=1e-12)


def test_later_duplicate_column_is_dropped():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((40, 2))
    a = np.column_stack([base[:, 0], base[:, 1], base[:, 0]])  # col 2 = col 0
    b = rng.standard_normal(40)
    fit = wls_fit(a, b)
    assert fit.columns_dropped == (2,)
    assert fit.rank == 2
    assert fit.coefficients[2] == 0.0
    reduced = wls_fit(base, b)
    assert np.max(np.abs(fit.fitted - reduced.fitted)) < 1e-9


def test_zero_column_dropped():
    rng = np.random.default_rng(4)
    a = np.column_stack([np.zeros(20), rng.standard_normal(20)])
    fit = wls_fit(a, rng.standard_normal(20))
    assert fit.columns_dropped == (0,)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000),
       p=st.integers(min_value=1, max_value=6))
def test_weighted_residuals_orthogonal_to_design(seed, p):
    rng = np.random.default_rng(seed)
    n = 30 + p
    a = rng.standard_normal((n, p))
    b = 3.0 * rng.standard_normal(n)
    wt = rng.random(n)
    fit = wls_fit(a, b, weights=wt)
    resid = b - fit.fitted
    grad = a.T @ (wt * resid)
    kept = [j for j in range(p) if j not in fit.columns_dropped]
    bound = 1e-8 * (1.0 + float(np.linalg.norm(b)))
    assert np.max(np.abs(grad[kept])) <= bound


def test_wls_input_errors():
    with pytest.raises(InputError):
        wls_fit(np.array([[1.0], [np.nan]]), np.zeros(2))
    with pytest.raises(InputError):
        wls_fit(np.ones((3, 1)), np.zeros(2))
    with pytest.raises(InputError):
        wls_fit(np.ones((3, 1)), np.zeros(3), weights=np.array([1.0, -1.0, 1.0]))
    with pytest.raises(InputError):
        wls_fit(np.ones((3, 1)), np.zeros(3), weights=np.zeros(3))


# --------------------------------------------------------------------------
# logistic regression
# --------------------------------------------------------------------------


def test_intercept_only_hits_log_odds():
    y = np.array([1.0] + [0.0] * 3)
    fit = logistic_fit(np.ones((4, 1)), y)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(math.log(0.25 / 0.75), abs=1e-8)
    assert fit.max_abs_score < 1e-8


def test_matches_gradient_ascent_oracle():
    rng = np.random.default_rng(5)
    n = 120
    a = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    truth = np.array([0.3, -0.8, 0.5])
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(a @ truth)))).astype(float)
    fit = logistic_fit(a, y)
    want = oracles.gradient_descent_logistic(a, y)
    assert fit.converged
    assert np.max(np.abs(fit.coefficients - want)) < 1e-5


def test_weights_equal_row_duplication():
    rng = np.random.default_rng(6)
    n = 50
    a = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.integers(0, 2, size=n).astype(float)
    wt = np.ones(n)
    wt[:10] = 2.0
    dup_a = np.vstack([a, a[:10]])
    dup_y = np.concatenate([y, y[:10]])
    f1 = logistic_fit(a, y, weights=wt)
    f2 = logistic_fit(dup_a, dup_y)
    assert np.max(np.abs(f1.coefficients - f2.coefficients)) < 1e-7


def test_separation_sets_flag_and_falls_back():
    x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    fit = logistic_fit(x, y, ridge=0.0)
    assert fit.separation_detected
    assert fit.ridge == pytest.approx(1e-6)
    assert np.all(np.isfinite(fit.coefficients))
    # penalized problem has a finite optimum and converges
    assert fit.converged


def test_explicit_ridge_keeps_flag_without_fallback():
    x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    fit = logistic_fit(x, y, ridge=1e-4)
    assert fit.ridge == pytest.approx(1e-4)
    assert np.all(np.isfinite(fit.coefficients))


def test_predict_proba_clamps_and_checks_shapes():
    fit = logistic_fit(np.ones((4, 1)), np.array([1.0, 0.0, 1.0, 0.0]))
    p = predict_proba(fit, np.array([[1.0], [1.0]]))
    assert p.shape == (2,)
    assert np.all(p >= 1e-10) and np.all(p <= 1 - 1e-10)
    big = predict_proba(fit, np.array([[1e6]]))
    assert big[0] <= 1 - 1e-10
    with pytest.raises(InputError):
        predict_proba(fit, np.ones((2, 3)))


def test_predict_refuses_unconverged_unpenalized_fit():
    rng = np.random.default_rng(7)
    a = np.column_stack([np.ones(200), rng.standard_normal((200, 3))])
    y = (rng.random(200) < 0.4).astype(float)
    fit = logistic_fit(a, y, max_iter=1, tol=1e-14)
    assert not fit.converged
    if fit.ridge == 0.0:
        with pytest.raises(EstimationError):
            predict_proba(fit, a)


def test_logistic_input_errors():
    with pytest.raises(InputError):
        logistic_fit(np.ones((3, 1)), np.array([0.0, 1.0, 2.0]))
    with pytest.raises(InputError):
        logistic_fit(np.ones((3, 1)), np.zeros(3), ridge=-1.0)


# --------------------------------------------------------------------------
# fold assignment
# --------------------------------------------------------------------------


def test_folds_balanced_and_deterministic():
    f1 = cross_fit_folds(17, 5, seed=42)
    f2 = cross_fit_folds(17, 5, seed=42)
    assert np.array_equal(f1.fold_of_cluster, f2.fold_of_cluster)
    counts = np.bincount(f1.fold_of_cluster, minlength=5)
    assert counts.max() - counts.min() <= 1
    assert counts.sum() == 17
    f3 = cross_fit_folds(17, 5, seed=43)
    assert not np.array_equal(f1.fold_of_cluster, f3.fold_of_cluster)


def test_fold_bounds():
    with pytest.raises(InputError):
        cross_fit_folds(10, 1, seed=0)
    with pytest.raises(InputError):
        cross_fit_folds(3, 4, seed=0)
    f = cross_fit_folds(4, 4, seed=0)
    assert sorted(f.fold_of_cluster.tolist()) == [0, 1, 2, 3]


# --------------------------------------------------------------------------
# group-penalized multinomial selection
# --------------------------------------------------------------------------


def selection_problem(seed=0, n_per=30, n_groups=4):
    """Feature 0 tracks the group, features 1-2 are noise."""
    rng = np.random.default_rng(seed)
    centers = np.array([-3.0, -1.0, 1.0, 3.0])[:n_groups]
    labels = np.repeat(np.arange(n_groups), n_per)
    f0 = centers[labels] + 0.5 * rng.standard_normal(labels.size)
    noise = rng.standard_normal((labels.size, 2))
    return np.column_stack([f0, noise]), labels


def test_huge_penalty_selects_nothing():
    f, labels = selection_problem()
    res = multinomial_group_lasso(f, labels, lam=1e9)
    assert res.selected == ()


def test_zero_penalty_selects_everything():
    f, labels = selection_problem()
    res = multinomial_group_lasso(f, labels, lam=0.0)
    assert res.selected == (0, 1, 2)


def test_signal_enters_before_noise():
    f, labels = selection_problem(seed=1)
    res = multinomial_group_lasso(f, labels, stop_after_k=2)
    first_sel = next(p.selected for p in res.path if p.selected)
    assert first_sel == (0,)


def test_path_is_decreasing_in_lambda():
    f, labels = selection_problem(seed=2)
    res = multinomial_group_lasso(f, labels)
    lams = [p.lam for p in res.path]
    assert all(a > b for a, b in zip(lams, lams[1:]))
    assert res.path[0].lam == pytest.approx(res.lambda_max)
    # at the top of the path nothing is selected
    assert res.path[0].selected == ()


def test_string_labels_accepted():
    f, labels = selection_problem(seed=3)
    names = np.array(["north", "south", "east", "west"])[labels]
    res = multinomial_group_lasso(f, list(names), stop_after_k=1)
    assert 0 in {j for p in res.path for j in p.selected}


def test_selector_input_errors():
    f, labels = selection_problem()
    with pytest.raises(InputError):
        multinomial_group_lasso(f, labels[:-1], lam=1.0)
    with pytest.raises(InputError):
        multinomial_group_lasso(f, labels, lam=-1.0)
    with pytest.raises(InputError):
        multinomial_group_lasso(f, np.zeros(f.shape[0]), lam=1.0)
