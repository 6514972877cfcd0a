import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdwols import (
    ConvergenceError,
    PropensityFit,
    SeparationWarning,
    WeightKind,
    balancing_weight,
    balancing_weights,
    fit_multinomial_logit,
    generalized_propensity,
    verify_balancing,
)
from gdwols.simulation import SimConfig, generate_panel

from .conftest import make_panel

BASELINE_COUNTS = (315, 17, 22, 150)


def counts_panel(counts, covariates=None, names=()):
    levels = np.repeat(np.arange(len(counts)), counts)
    return make_panel(levels, np.zeros(len(levels)), covariates, names,
                      categories=tuple(str(k) for k in range(len(counts))))


def test_intercept_only_closed_form_counts():
    fit = fit_multinomial_logit(counts_panel(BASELINE_COUNTS))
    expected = [math.log(c / BASELINE_COUNTS[0]) for c in BASELINE_COUNTS[1:]]
    np.testing.assert_allclose(fit.alpha[:, 0], expected, atol=1e-8)
    np.testing.assert_allclose(fit.alpha[:, 0], [-2.919, -2.661, -0.742], atol=1e-3)
    np.testing.assert_allclose(generalized_propensity(fit, []), np.array(BASELINE_COUNTS) / 504, atol=1e-12)
    assert fit.converged


def test_equal_counts_give_zero_intercepts():
    fit = fit_multinomial_logit(counts_panel((20, 20, 20)))
    np.testing.assert_allclose(fit.alpha, 0.0, atol=1e-12)


def test_recovers_known_alpha_under_logit():
    # 2500 subjects x 4 stages = 10,000 stage observations
    panel = generate_panel(SimConfig(n=2500, seed=20))
    fit = fit_multinomial_logit(panel.dataset, ("Sex", "CD4"))
    truth = np.array([SimConfig().alpha1, SimConfig().alpha2])
    z = (fit.alpha - truth) / fit.standard_errors().reshape(truth.shape)
    assert np.all(np.abs(z) < 3), z


def test_loglik_non_decreasing():
    panel = generate_panel(SimConfig(n=300, seed=4))
    fit = fit_multinomial_logit(panel.dataset, ("Sex", "CD4"))
    diffs = np.diff(fit.loglik_trace)
    assert np.all(diffs >= -1e-12 * abs(fit.loglik_trace[0]))
    assert fit.iterations >= 2


def test_score_is_below_tol_at_convergence():
    panel = generate_panel(SimConfig(n=300, seed=5))
    ds = panel.dataset
    fit = fit_multinomial_logit(ds, ("Sex", "CD4"))
    x = np.column_stack([np.ones(ds.n_obs), ds.covariates])
    probs = fit.predict_dataset(ds)
    onehot = np.eye(ds.coding.m)[ds.levels]
    score = (onehot[:, 1:] - probs[:, 1:]).T @ x
    assert np.max(np.abs(score)) < 1e-8


def test_non_convergence_carries_last_iterate():
    panel = generate_panel(SimConfig(n=300, seed=5))
    with pytest.raises(ConvergenceError) as err:
        fit_multinomial_logit(panel.dataset, ("Sex", "CD4"), max_iter=1)
    assert err.value.fit.iterations == 1
    assert not err.value.fit.converged


def test_missing_category_rejected():
    ds = make_panel([0, 0, 2], [0.0] * 3, categories=("a", "b", "c"))
    with pytest.raises(ValueError, match="never observed"):
        fit_multinomial_logit(ds)


def test_separation_flagged():
    x = np.r_[np.linspace(-3, -1, 10), np.linspace(1, 3, 10)][:, None]
    ds = make_panel(np.repeat([0, 1], 10), np.zeros(20), x, ("x",))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            fit = fit_multinomial_logit(ds, ("x",), max_iter=100)
        except ConvergenceError as exc:
            fit = exc.fit
    assert fit.separation
    if fit.converged:
        assert any(issubclass(w.category, SeparationWarning) for w in caught)


def test_no_separation_flag_on_overlapping_data():
    panel = generate_panel(SimConfig(n=300, seed=5))
    with warnings.catch_warnings():
        warnings.simplefilter("error", SeparationWarning)
        assert not fit_multinomial_logit(panel.dataset, ("Sex", "CD4")).separation


def test_fit_json_roundtrip():
    panel = generate_panel(SimConfig(n=100, seed=6))
    fit = fit_multinomial_logit(panel.dataset, ("Sex", "CD4"))
    back = PropensityFit.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.alpha, fit.alpha)
    np.testing.assert_array_equal(back.predict_dataset(panel.dataset), fit.predict_dataset(panel.dataset))


def test_generalized_propensity_examples():
    zero = PropensityFit(make_panel([0], [0.0], categories="abcd").coding, (), np.zeros((3, 1)), True, 0, 0.0)
    np.testing.assert_allclose(generalized_propensity(zero, []), [0.25] * 4, atol=1e-15)
    two = PropensityFit(make_panel([0], [0.0]).coding, (), np.array([[math.log(3.0)]]), True, 0, 0.0)
    np.testing.assert_allclose(generalized_propensity(two, []), [0.25, 0.75], atol=1e-15)
    with pytest.raises(ValueError):
        generalized_propensity(two, [1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_probabilities_on_simplex(m, k, seed):
    rng = np.random.default_rng(seed)
    fit = PropensityFit(make_panel([0], [0.0], categories=tuple(str(j) for j in range(m))).coding,
                        tuple(f"x{j}" for j in range(k)), rng.normal(scale=5, size=(m - 1, k + 1)), True, 0, 0.0)
    p = fit.predict(rng.normal(scale=3, size=(50, k)))
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_balancing_weight_examples():
    third = np.full(3, 1 / 3)
    for a in range(3):
        assert balancing_weight(third, a, "ipt") == pytest.approx(3.0, rel=1e-15)
    gps = np.array([0.25, 0.25, 0.5])
    assert balancing_weight(gps, 2, WeightKind.OVERLAP) == pytest.approx(0.2, rel=1e-15)
    assert balancing_weight(gps, 0, WeightKind.OVERLAP) == pytest.approx(0.4, rel=1e-15)
    prods = [gps[a] * balancing_weight(gps, a, "overlap") for a in range(3)]
    np.testing.assert_allclose(prods, 0.1, rtol=1e-15)


@pytest.mark.parametrize("bad", [[0.0, 1.0], [0.5, 0.5, 0.0], [1.2, -0.2], [np.nan, 0.5]])
def test_invalid_gps(bad):
    with pytest.raises(ValueError):
        balancing_weight(bad, 0, "ipt")
    with pytest.raises(ValueError):
        verify_balancing(bad, "overlap")


def test_verify_balancing_examples():
    assert verify_balancing(np.full(4, 0.25), "ipt") == 0.0
    assert verify_balancing([0.1, 0.2, 0.7], "ipt") <= 1e-12
    assert verify_balancing([0.1, 0.2, 0.7], "overlap") <= 1e-12


def test_weight_bounds_and_vector_form(rng):
    probs = rng.dirichlet(np.ones(3), size=500)
    levels = rng.integers(0, 3, size=500)
    w_ipt = balancing_weights(probs, levels, "ipt")
    w_ov = balancing_weights(probs, levels, "overlap")
    assert np.all(w_ipt > 1)
    assert np.all((w_ov > 0) & (w_ov < 1))
    for i in (0, 17, 499):
        assert w_ov[i] == pytest.approx(balancing_weight(probs[i], levels[i], "overlap"), rel=1e-14)
    capped = balancing_weights(probs, levels, "ipt", trim=5.0)
    assert capped.max() <= 5.0


def test_weight_kind_parse():
    assert WeightKind.parse("IPT") is WeightKind.IPT
    assert WeightKind.parse(WeightKind.OVERLAP) is WeightKind.OVERLAP
    with pytest.raises(ValueError):
        WeightKind.parse("stabilized")
