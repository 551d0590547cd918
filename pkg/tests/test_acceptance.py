"""End-to-end acceptance criteria; a PASS/FAIL line per criterion is printed
in the terminal summary."""

import os
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest
from scipy import stats

from grangerlab import (
    HistorySpec,
    builtin_scenarios,
    conditional_granger_f_test,
    fit_ar,
    fit_var,
    granger_tests,
    scenario,
    simulate,
    te_gaussian,
    te_kernel,
    te_local,
    write_csv,
)
from grangerlab.spectral import (
    dtf_matrix,
    frequency_average,
    geweke_spectral_gc,
    pdc_matrix,
    spectral_decompose,
    spectral_significance_surrogate,
)
from grangerlab.tvvar import (
    KalmanConfig,
    kalman_em,
    tv_causality,
    tv_var_basis,
    tv_var_kalman,
    tv_var_window,
)
from grangerlab.var import VarModel

from test_gc_time import orthogonal_source_pair

pytestmark = pytest.mark.acceptance

# Monte Carlo replications use seeds from 1000 up, clear of the unit tests.
SEED0 = 1000


def test_criterion_01_spectral_time_consistency():
    start = time.perf_counter()
    ts = simulate(scenario("unidir-var1", seed=SEED0, n_times=500_000))
    q = 20
    model, _ = fit_var(ts, history=HistorySpec(1), start=q)
    restricted, _ = fit_ar(ts, "Y", HistorySpec(q))
    expected = np.log(restricted.noise_cov_ml[0, 0] / model.noise_cov_ml[0, 0])
    ggc = geweke_spectral_gc(spectral_decompose(model, 4096), source=1, target=0)
    mean = float(frequency_average(ggc.values))
    elapsed = time.perf_counter() - start
    assert abs(mean - expected) <= 1e-3 * abs(expected)
    assert elapsed < 10.0


def test_criterion_02_zero_causality():
    coeffs = np.array([[[0.5, 0.0], [0.4, 0.7]]])
    model = VarModel(coeffs, np.eye(2), n_obs=1000, history=HistorySpec(1))
    f = geweke_spectral_gc(spectral_decompose(model, 512), source=1, target=0).values
    assert np.max(np.abs(f)) < 1e-8
    res = granger_tests(orthogonal_source_pair(2000, SEED0), "X", "Y")
    assert abs(res.f_geweke) < 1e-10


def test_criterion_03_null_calibration():
    start = time.perf_counter()
    n_rep = 500
    p = {"f": [], "wald": [], "dtf": [], "pdc": []}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in range(SEED0, SEED0 + n_rep):
            ts = simulate(scenario("null-ar-pair", seed=seed))
            r = granger_tests(ts, "X", "Y")
            p["f"].append(r.f_pvalue)
            p["wald"].append(r.wald_pvalue)
            for stat in ("dtf", "pdc"):
                s = spectral_significance_surrogate(ts, "X", "Y", HistorySpec(1), stat, 199,
                                                    "circular-shift", seed=seed, n_freqs=64)
                p[stat].append(s.p_values)
    elapsed = time.perf_counter() - start
    for key in ("f", "wald"):
        pv = np.array(p[key])
        assert 0.03 <= np.mean(pv <= 0.05) <= 0.08, key
        assert stats.kstest(pv, "uniform").pvalue > 0.01, key
    for key in ("dtf", "pdc"):
        pv = np.array(p[key])                         # (n_rep, n_freqs)
        rates = np.mean(pv <= 0.05, axis=0)
        assert np.all((rates >= 0.03) & (rates <= 0.08)), key
        mid = pv.shape[1] // 4
        assert stats.kstest(pv[:, mid], "uniform").pvalue > 0.01, key
    assert elapsed < 300.0


def test_criterion_04_power():
    forward, reverse = [], []
    for seed in range(SEED0, SEED0 + 200):
        ts = simulate(scenario("unidir-var1", seed=seed))
        xy = granger_tests(ts, "X", "Y")
        yx = granger_tests(ts, "Y", "X")
        forward.append((xy.f_pvalue < 0.05, xy.wald_pvalue < 0.05))
        reverse.append((yx.f_pvalue < 0.05, yx.wald_pvalue < 0.05))
    forward, reverse = np.array(forward), np.array(reverse)
    assert np.all(forward.mean(axis=0) >= 0.95)
    assert np.all(reverse.mean(axis=0) <= 0.08)


def test_criterion_05_normalizations():
    for name, p in (("unidir-var1", 1), ("chain-xwy", 3)):
        model, _ = fit_var(simulate(scenario(name, seed=SEED0)), history=HistorySpec(p))
        dec = spectral_decompose(model, 512)
        d = model.dim
        np.testing.assert_allclose((dtf_matrix(dec) ** 2).sum(axis=2), 1.0, atol=1e-10)
        np.testing.assert_allclose((pdc_matrix(dec) ** 2).sum(axis=1), 1.0, atol=1e-10)
        eye = np.broadcast_to(np.eye(d), dec.transfer.shape)
        assert np.max(np.abs(dec.transfer @ dec.theta - eye)) < 1e-10
        S = dec.spectrum
        assert np.max(np.abs(S - np.conj(np.swapaxes(S, -1, -2)))) < 1e-12


def test_criterion_06_te_identity():
    ts = simulate(scenario("unidir-var1", seed=SEED0, n_times=10_000))
    for p in (1, 2):
        h = HistorySpec(p)
        assert te_gaussian(ts, "X", "Y", h).value == 0.5 * granger_tests(ts, "X", "Y", h).f_geweke
    gauss = te_gaussian(ts, "X", "Y").value
    kern = te_kernel(ts, "X", "Y").value
    assert abs(kern - gauss) <= 0.25 * gauss
    for estimator in ("gaussian", "kernel"):
        local = te_local(ts, "X", "Y", estimator=estimator)
        vals = local.local_values[np.isfinite(local.local_values)]
        assert abs(vals.mean() - local.value) < 1e-10


def test_criterion_07_degenerate_window():
    ts = simulate(scenario("unidir-var1", seed=SEED0, n_times=2000))
    T = ts.n_times
    traj = tv_var_window(ts, window_len=T, step=T)
    model, _ = fit_var(ts)
    assert traj.states.shape[0] == 1
    assert traj.states[0].tobytes() == model.coeffs.ravel().tobytes()
    cfg = KalmanConfig(q_variant="fixed", r_variant="constant_1",
                       init_state_cov=1e6 * np.eye(4))
    kal = tv_var_kalman(ts, config=cfg)
    assert np.max(np.abs(kal.states[-1] - model.coeffs.ravel())) < 1e-3


def test_criterion_08_tracking():
    crit = stats.chi2.ppf(0.99, 1)
    reach, cross, pre_rate = [], [], []
    for seed in range(SEED0, SEED0 + 100):
        spec = scenario("step-onset", seed=seed)
        traj = tv_var_kalman(simulate(spec), config=KalmanConfig(uc=0.02, r_variant="schack"))
        W = tv_causality(traj, 1, 0).values
        t = traj.times
        onset = spec.n_times // 2
        post = (t >= onset) & (t < onset + 500)
        reach.append(np.any(traj.states[post, 1] >= 0.4))
        cross.append(np.any(W[post] > crit))
        pre = (t >= 100) & (t < onset)
        pre_rate.append(np.mean(W[pre] > crit))
    assert np.mean(reach) >= 0.9
    assert np.mean(cross) >= 0.9
    assert np.mean(pre_rate) <= 0.10


def test_criterion_09_basis_recovery():
    rmse = []
    for seed in range(SEED0, SEED0 + 50):
        spec = scenario("sinusoidal-coupling", seed=seed, n_times=2000, n_trials=20)
        traj = tv_var_basis(simulate(spec), n_basis=8)
        truth = spec.coefficient_path()[traj.times.astype(int), 0, 0, 1]
        rmse.append(np.sqrt(np.mean((traj.states[:, 1] - truth) ** 2)))
    assert np.median(rmse) < 0.08


def test_criterion_10_conditional_discrimination():
    h = HistorySpec(2)
    pair, cond = [], []
    for seed in range(SEED0, SEED0 + 200):
        ts = simulate(scenario("chain-xwy", seed=seed))
        pair.append(conditional_granger_f_test(ts, "X", "Y", (), h).f_pvalue < 0.05)
        cond.append(conditional_granger_f_test(ts, "X", "Y", ["W"], h).f_pvalue < 0.05)
    assert np.mean(pair) >= 0.8
    assert np.mean(cond) <= 0.10


def test_criterion_11_em_sanity():
    for name, spec in builtin_scenarios().items():
        _, traj = kalman_em(simulate(spec.replace(seed=SEED0)), n_iter=50)
        path = np.array(traj.config["log_likelihood_path"])
        assert len(path) == 51
        assert np.all(np.diff(path) >= -1e-8 * np.maximum(1.0, np.abs(path[:-1]))), name
    cfg, _ = kalman_em(simulate(scenario("unidir-var1", seed=SEED0, n_times=2000)), n_iter=50)
    assert np.trace(cfg.Q) < 0.01 * np.trace(cfg.R)


def _cli_outputs(workdir, args_list, threads):
    env = {**os.environ, "GRANGERLAB_THREADS": str(threads)}
    os.makedirs(workdir)
    for args in args_list:
        proc = subprocess.run([sys.executable, "-m", "grangerlab.cli", *args], cwd=workdir,
                              env=env, capture_output=True, check=False)
        assert proc.returncode == 0, proc.stderr.decode()
    files = {}
    for root, _, names in os.walk(workdir):
        for n in names:
            path = os.path.join(root, n)
            with open(path, "rb") as fh:
                files[os.path.relpath(path, workdir)] = fh.read()
    return files


def test_criterion_12_cli_determinism(tmp_path):
    data = tmp_path / "data.csv"
    write_csv(simulate(scenario("unidir-var1", seed=SEED0, n_times=500)), data, single_file=True)
    step = tmp_path / "step.csv"
    write_csv(simulate(scenario("step-onset", seed=SEED0)), step, single_file=True)
    d, s = str(data), str(step)
    commands = [
        ["significance", "-i", d, "--stat", "dtf", "--nfreq", "32", "--n-surrogates", "99",
         "--seed", "3", "-o", "sig.json", "--null-csv", "null.csv"],
        ["significance", "-i", d, "--stat", "f", "--scheme", "block-permutation",
         "--n-surrogates", "99", "--seed", "3", "-o", "sigf.json"],
        ["te", "-i", d, "--n-perm", "99", "--seed", "4", "-o", "te.json"],
        ["gc-spectral", "-i", d, "--stat", "pdc", "--nfreq", "64", "-o", "spec.json",
         "--plot-data", "pdc.csv"],
        ["gc-tv", "-i", s, "--method", "kalman", "--uc", "0.02", "--source", "X",
         "--target", "Y", "-o", "tv.json", "--plot-data", "tv.csv"],
        ["simulate", "--scenario", "step-onset", "--seed", "7", "--out-dir", "sim",
         "-o", "sim.json"],
    ]
    runs = [_cli_outputs(str(tmp_path / f"run{k}"), commands, threads)
            for k, threads in enumerate((1, 1, 4))]
    assert len(runs[0]) >= 9
    assert runs[0] == runs[1] == runs[2]
