import numpy as np
import pytest

from grangerlab import (
    GeneratorSpec,
    HistorySpec,
    builtin_scenarios,
    fit_var,
    scenario,
    simulate,
    stationarity_screen,
)
from grangerlab.errors import UnstableSpec, ValidationError
from grangerlab.simulation import companion_radius


def test_zero_coefficients_reproduce_noise_cov():
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, -0.5], [0.0, -0.5, 0.5]])
    spec = GeneratorSpec("stationary-var", np.zeros((1, 3, 3)), cov, n_times=100_000, seed=4)
    x = simulate(spec).values[0]
    sample = np.cov(x, rowvar=False)
    assert np.all(np.abs(sample - cov) <= 0.05 * np.sqrt(np.outer(np.diag(cov), np.diag(cov))))


def test_bit_identical_for_fixed_seed():
    spec = scenario("sinusoidal-coupling", n_trials=3, n_times=300, seed=9)
    assert simulate(spec).values.tobytes() == simulate(spec).values.tobytes()
    other = simulate(spec.replace(seed=10)).values
    assert not np.array_equal(other, simulate(spec).values)


def test_trials_are_independent_streams():
    spec = scenario("unidir-var1", n_trials=2, n_times=200)
    v = simulate(spec).values
    assert not np.array_equal(v[0], v[1])
    # trial k does not depend on how many trials follow it
    first = simulate(spec.replace(n_trials=1)).values
    np.testing.assert_array_equal(first[0], v[0])


def test_unit_root_is_unstable():
    with pytest.raises(UnstableSpec):
        simulate(GeneratorSpec("stationary-var", [[1.0]], [[1.0]], n_times=100))
    step = scenario("step-onset").replace(schedule={"row": 0, "col": 0, "after": 1.2,
                                                    "lag": 0, "onset": 0.5})
    assert companion_radius(step.coeffs) < 1
    with pytest.raises(UnstableSpec):
        simulate(step)


def test_seed_is_mandatory_and_kind_known():
    with pytest.raises(ValidationError):
        GeneratorSpec("stationary-var", [[0.5]], [[1.0]], n_times=10, seed=None)
    with pytest.raises(ValidationError):
        GeneratorSpec("garch", [[0.5]], [[1.0]], n_times=10)
    with pytest.raises(ValidationError):
        scenario("no-such-thing")


def test_builtin_catalog_contents():
    cat = builtin_scenarios()
    assert set(cat) >= {"unidir-var1", "null-ar-pair", "step-onset", "sinusoidal-coupling",
                        "chain-xwy"}
    u = cat["unidir-var1"]
    np.testing.assert_array_equal(u.coeffs[0], [[0.5, 0.4], [0.0, 0.7]])
    np.testing.assert_array_equal(u.noise_cov, np.eye(2))
    assert u.channel_names == ("Y", "X")
    path = cat["step-onset"].coefficient_path()[:, 0, 0, 1]
    T = cat["step-onset"].n_times
    assert np.all(path[: T // 2] == 0.0) and np.all(path[T // 2:] == 0.5)
    chain = cat["chain-xwy"]
    names = chain.channel_names
    x, w, y = (names.index(c) for c in "XWY")
    assert chain.coeffs[0, y, x] == 0.0
    assert chain.coeffs[0, w, x] != 0.0 and chain.coeffs[0, y, w] != 0.0
    for spec in cat.values():
        radius = companion_radius(spec.coefficient_path() if spec.time_varying else spec.coeffs)
        assert np.max(radius) < 1


def test_truth_carries_schedule():
    t = scenario("step-onset", n_times=20).truth()
    assert len(t["coefficient_path"]) == 20
    assert t["schedule"]["after"] == 0.5
    assert "coefficient_path" not in scenario("unidir-var1").truth()


def test_stationary_output_passes_screen():
    flags = [stationarity_screen(simulate(scenario("unidir-var1", seed=s))).flag
             for s in range(200)]
    assert np.mean(flags) < 0.05


def test_refit_recovers_generator():
    for name in ("unidir-var1", "chain-xwy"):
        spec = scenario(name, n_times=1_000_000, seed=21)
        model, _ = fit_var(simulate(spec), history=HistorySpec(spec.order))
        assert np.max(np.abs(model.coeffs - spec.coeffs)) < 0.02
