import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from statsmodels.tsa.api import VAR

from grangerlab import HistorySpec, TimeSeriesSet, fit_ar, fit_var, lagged_design, select_order
from grangerlab.errors import InsufficientSamples, MaxLagTooSmall, SingularDesign
from grangerlab.simulation import companion_radius
from grangerlab.var import VarModel, order_criteria, residual_whiteness

from conftest import ar1_series, var_series, white_noise


def test_matches_statsmodels_var():
    coeffs = np.array([[[0.4, 0.2], [-0.1, 0.3]], [[0.1, 0.0], [0.2, -0.2]]])
    ts = var_series(coeffs, 800, seed=5)
    model, diag = fit_var(ts, history=HistorySpec(2))
    ref = VAR(ts.values[0]).fit(2, trend="n")
    np.testing.assert_allclose(model.coeffs, ref.coefs, atol=1e-10)
    np.testing.assert_allclose(model.noise_cov, ref.sigma_u, rtol=1e-10)
    np.testing.assert_allclose(diag.log_likelihood, ref.llf, rtol=1e-10)


def test_normal_equations_hold():
    ts = var_series([[0.5, 0.3], [0.0, 0.6]], 500, seed=1)
    model, diag = fit_var(ts, history=HistorySpec(3))
    X, _ = lagged_design(ts.values, HistorySpec(3))
    resid = diag.residuals.reshape(-1, 2)
    cross = X.T @ resid
    scale = np.linalg.norm(X) * np.linalg.norm(resid)
    assert np.max(np.abs(cross)) < 1e-8 * scale


def test_ar1_consistency_monte_carlo():
    est, var = [], []
    for seed in range(100):
        m, _ = fit_ar(ar1_series(0.5, 10_000, seed), 0)
        est.append(m.coeffs[0, 0, 0])
        var.append(m.noise_cov[0, 0])
    assert np.all(np.abs(np.array(est) - 0.5) < 0.03)
    assert np.all(np.abs(np.array(var) - 1.0) < 0.05)


def test_ar1_high_persistence():
    m, _ = fit_ar(ar1_series(0.9, 10_000, seed=3), 0)
    assert abs(m.coeffs[0, 0, 0] - 0.9) < 0.02


def test_white_noise_ar2_within_three_stderr():
    inside = []
    for seed in range(100):
        ts = white_noise(1000, 1, seed)
        m, diag = fit_ar(ts, 0, HistorySpec(2))
        se = np.sqrt(m.noise_cov[0, 0] * np.diag(diag.xtx_inv))
        inside.append(np.all(np.abs(m.coeffs[:, 0, 0]) < 3 * se))
    assert np.mean(inside) >= 0.95


def test_zero_input_is_singular():
    with pytest.raises(SingularDesign):
        fit_var(TimeSeriesSet(np.zeros((200, 2))))


def test_too_short_for_order():
    with pytest.raises(InsufficientSamples):
        fit_ar(ar1_series(0.5, 30, 0), 0, HistorySpec(25))


def test_pooling_is_row_stacking():
    one = ar1_series(0.5, 300, seed=2)
    two = TimeSeriesSet(np.concatenate([one.values, one.values]))
    m1, _ = fit_ar(one, 0)
    m2, _ = fit_ar(two, 0)
    np.testing.assert_allclose(m2.coeffs, m1.coeffs, rtol=1e-12)
    # pooled fit of distinct trials equals OLS on their stacked design rows
    other = ar1_series(0.5, 300, seed=3)
    both = TimeSeriesSet(np.concatenate([one.values, other.values]))
    m, _ = fit_ar(both, 0)
    X = np.concatenate([one.values[0, :-1, 0], other.values[0, :-1, 0]])
    y = np.concatenate([one.values[0, 1:, 0], other.values[0, 1:, 0]])
    assert m.coeffs[0, 0, 0] == pytest.approx(X @ y / (X @ X), rel=1e-12)


def test_joint_fit_rows_are_the_two_regressions():
    ts = var_series([[0.5, 0.4], [0.0, 0.7]], 600, seed=9)
    m, _ = fit_var(ts)
    X, Y = lagged_design(ts.values, HistorySpec(1))
    for row in range(2):
        beta, *_ = np.linalg.lstsq(X, Y[:, row], rcond=None)
        np.testing.assert_allclose(m.coeffs[0, row], beta, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_nested_ar_variance_not_below_var_variance(seed, p):
    ts = white_noise(200, 2, seed)
    h = HistorySpec(p)
    ar, _ = fit_ar(ts, 0, h)
    full, _ = fit_var(ts, None, h)
    assert ar.noise_cov_ml[0, 0] >= full.noise_cov_ml[0, 0] - 1e-10


def test_select_order_var2():
    coeffs = np.array([[[0.5, 0.1], [0.0, 0.4]], [[-0.3, 0.0], [0.2, -0.3]]])
    assert companion_radius(coeffs) < 1
    picks = [select_order(var_series(coeffs, 5000, seed), None, 8, "bic") for seed in range(100)]
    assert np.mean(np.array(picks) == 2) >= 0.9


def test_select_order_white_noise_and_single_candidate():
    picks = [select_order(white_noise(1000, 2, s), None, 5, "bic") for s in range(30)]
    assert np.bincount(picks).argmax() == 1
    assert select_order(white_noise(300, 2, 0), None, 1) == 1


def test_order_criteria_share_rows():
    ts = ar1_series(0.5, 400, 0)
    table = order_criteria(ts, None, 4)
    assert table["order"] == [1, 2, 3, 4]
    # rows start at the largest lag, so n is identical across orders
    _, d1 = fit_var(ts, None, HistorySpec(1), start=4)
    assert table["bic"][0] == pytest.approx(d1.bic)


def test_whiteness_calibrated_under_correct_model():
    pv = []
    for seed in range(200):
        _, diag = fit_ar(ar1_series(0.5, 600, seed), 0)
        pv.append(residual_whiteness(diag, 10).p_values[0])
    assert stats.kstest(pv, "uniform").pvalue > 0.01


def test_whiteness_detects_misspecification():
    coeffs = np.array([[[0.3]], [[0.2]], [[-0.3]], [[0.4]]])
    assert companion_radius(coeffs) < 1
    rejections = []
    for seed in range(50):
        ts = var_series(coeffs, 1000, seed)
        _, diag = fit_ar(ts, 0)
        rejections.append(residual_whiteness(diag, 10).p_values[0] < 0.05)
    assert np.mean(rejections) > 0.8


def test_whiteness_lag_must_exceed_order():
    _, diag = fit_ar(ar1_series(0.5, 300, 0), 0, HistorySpec(2))
    with pytest.raises(MaxLagTooSmall):
        residual_whiteness(diag, 2)


def test_model_dict_round_trip():
    m, _ = fit_var(var_series([[0.5, 0.4], [0.0, 0.7]], 300, 1))
    back = VarModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.coeffs, m.coeffs)
    np.testing.assert_array_equal(back.noise_cov, m.noise_cov)
    assert back.history == m.history
