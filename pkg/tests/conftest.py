import numpy as np
import pytest

from grangerlab import GeneratorSpec, TimeSeriesSet, scenario, simulate


def ar1_series(coef, n_times, seed, n_trials=1, noise=1.0):
    """Univariate AR(1) via the generator."""
    spec = GeneratorSpec("stationary-var", np.array([[[coef]]]), np.array([[noise]]),
                         n_times=n_times, n_trials=n_trials, seed=seed)
    return simulate(spec)


def var_series(coeffs, n_times, seed, noise_cov=None, n_trials=1, names=()):
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim == 2:
        coeffs = coeffs[None]
    d = coeffs.shape[1]
    spec = GeneratorSpec("stationary-var", coeffs,
                         np.eye(d) if noise_cov is None else noise_cov,
                         n_times=n_times, n_trials=n_trials, seed=seed, channel_names=names)
    return simulate(spec)


def white_noise(n_times, d, seed, n_trials=1):
    rng = np.random.default_rng(seed)
    return TimeSeriesSet(rng.standard_normal((n_trials, n_times, d)))


@pytest.fixture(scope="session")
def unidir_long():
    """The one-way coupled pair (X drives Y) at T = 10^4."""
    return simulate(scenario("unidir-var1", seed=123, n_times=10_000))


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::test_criterion_")[1]
        _ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        number, _, label = name.partition("_")
        terminalreporter.write_line(
            f"criterion {int(number):2d} {_ACCEPTANCE[name]}  {label.replace('_', ' ')}")
