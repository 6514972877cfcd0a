import json

import numpy as np
import pytest

from gdwols import DesignSpec, estimate_itr
from gdwols.bootstrap import replicate_rng
from gdwols.estimation import GdwolsFit
from gdwols.simulation import (
    PARAMETERS,
    LinearLinkError,
    SimConfig,
    allocation_probs,
    conditional_mean,
    evaluate_policy,
    generate_panel,
    make_test_panel,
    model_spec,
    run_monte_carlo,
    true_optimal,
    truncated_normal_mean,
    truncated_normal_sample,
)

DEFAULTS = SimConfig()


def test_truncated_normal_support_and_moments():
    rng = np.random.default_rng(0)
    narrow = truncated_normal_sample(350, 100, 300, 300 + 1e-9, rng, size=1000)
    assert np.all((narrow >= 300) & (narrow <= 300 + 1e-9))
    x = truncated_normal_sample(350, 100, 50, 550, rng, size=1_000_000)
    se = x.std() / 1000
    assert abs(x.mean() - truncated_normal_mean(350, 100, 50, 550)) < 3 * se
    y = truncated_normal_sample(0, 1, -1, 1, rng, size=200_000)
    assert abs(y.mean()) < 3 * y.std() / np.sqrt(len(y))
    with pytest.raises(ValueError):
        truncated_normal_sample(0, 0, -1, 1, rng)


def test_truncated_mean_oracle_against_quadrature():
    from scipy import integrate, stats
    num = integrate.quad(lambda t: t * stats.norm.pdf(t, 350, 100), 50, 550)[0]
    den = stats.norm.cdf(550, 350, 100) - stats.norm.cdf(50, 350, 100)
    assert truncated_normal_mean(350, 100, 50, 550) == pytest.approx(num / den, rel=1e-10)


def test_allocation_examples():
    np.testing.assert_allclose(allocation_probs([1, 0, 300], (0, 0, 0), (0, 0, 0)), [1 / 3] * 3, atol=1e-15)
    x = [1, 1, 350]
    np.testing.assert_allclose(allocation_probs(x, DEFAULTS.alpha1, DEFAULTS.alpha2, "paper_linear"),
                               [0.3226, 0.3387, 0.3387], atol=1e-4)
    np.testing.assert_allclose(allocation_probs(x, DEFAULTS.alpha1, DEFAULTS.alpha2), [0.1489, 0.4255, 0.4255], atol=1e-4)


def test_paper_linear_negative_predictor():
    with pytest.raises(LinearLinkError, match="Sex=0, CD4=50"):
        allocation_probs([1, 0, 50], DEFAULTS.alpha1, DEFAULTS.alpha2, "paper_linear")
    with pytest.raises(LinearLinkError):
        generate_panel(DEFAULTS.replace(n=200, link="paper_linear", seed=1))


def test_allocation_sums_to_one(rng):
    x = np.column_stack([np.ones(1000), rng.integers(0, 2, 1000), rng.uniform(50, 550, 1000)])
    p = allocation_probs(x, DEFAULTS.alpha1, DEFAULTS.alpha2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    hi = x[x[:, 2] > 300]
    hi = hi[(hi @ np.array(DEFAULTS.alpha2)) >= 0]
    q = allocation_probs(hi, DEFAULTS.alpha1, DEFAULTS.alpha2, "paper_linear")
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        SimConfig(noise_sd=0)
    with pytest.raises(ValueError):
        SimConfig(cd4_init={"mean": 350, "sd": 100, "lo": 550, "hi": 50})
    with pytest.raises(ValueError):
        SimConfig(link="probit")
    with pytest.raises(ValueError):
        SimConfig.from_dict({"n": 10, "bogus": 1})
    null = SimConfig(null_effects=True)
    assert null.psi1 == null.psi2 == (0.0, 0.0, 0.0)
    back = SimConfig.from_dict(json.loads(json.dumps(DEFAULTS.to_dict())))
    assert back == DEFAULTS


def test_generate_deterministic_and_structural():
    a = generate_panel(SimConfig(n=10, seed=42))
    b = generate_panel(SimConfig(n=10, seed=42))
    for f in ("subject_ids", "stage_index", "levels", "outcome", "covariates"):
        np.testing.assert_array_equal(getattr(a.dataset, f), getattr(b.dataset, f))
    p = generate_panel(SimConfig(n=500, seed=3))
    cd4 = p.cd4.reshape(500, 4)
    sex = p.sex.reshape(500, 4)
    assert np.all((cd4 >= 50) & (cd4 <= 550))
    assert np.all(sex == sex[:, :1])
    assert np.all(np.bincount(np.unique(p.dataset.subject_ids, return_inverse=True)[1]) == 4)


def test_every_category_assigned_at_n1000():
    counts = generate_panel(SimConfig(n=1000, seed=11)).dataset.category_counts()
    assert np.all(counts > 0.05 * counts.sum())


def test_outcome_model_noise_structure():
    cfg = SimConfig(n=3000, seed=13)
    p = generate_panel(cfg)
    mu = conditional_mean(p.cd4, p.sex, p.dataset.levels, cfg)
    resid = (p.dataset.outcome - mu).reshape(cfg.n, 4)
    b = p.truth.random_intercepts
    eps = resid - b[:, None]
    assert eps.std() == pytest.approx(3.0, rel=0.03)
    assert b.std() == pytest.approx(0.5, rel=0.05)


def test_null_effects_arm_means():
    cfg = SimConfig(n=2500, seed=14, null_effects=True)
    p = generate_panel(cfg)
    ds = p.dataset
    # with psi = 0 the outcome depends on treatment only through CD4; remove the known mean
    resid = ds.outcome - conditional_mean(p.cd4, p.sex, ds.levels, cfg)
    for k in (1, 2):
        d = resid[ds.levels == k].mean() - resid[ds.levels == 0].mean()
        se = np.sqrt(resid[ds.levels == k].var() / np.sum(ds.levels == k) + resid[ds.levels == 0].var()
                     / np.sum(ds.levels == 0))
        assert abs(d) < 4 * se


def test_model_specs():
    m4 = model_spec(4)
    assert [t.label for t in m4.design.treatment_free_terms] == ["exp(CD4/200)", "sqrt(CD4)"]
    assert m4.propensity_covariates == ("Sex", "CD4")
    m1 = model_spec(1)
    assert not m1.treatment_free_correct and not m1.treatment_model_correct
    assert m1.propensity_covariates == ()
    m2, m3 = model_spec(2), model_spec(3)
    assert (m2.treatment_free_correct, m2.treatment_model_correct) == (False, True)
    assert (m3.treatment_free_correct, m3.treatment_model_correct) == (True, False)
    for k in (1, 2, 3, 4):
        assert model_spec(k).design.blip_terms == ("Sex", "CD4")
    with pytest.raises(ValueError):
        model_spec(5)


def test_true_optimal_examples():
    assert true_optimal([1, 1, 400], (0, 0, 0), (0, 0, 0)) == 0
    assert true_optimal([1, 1, 400], DEFAULTS.psi1, DEFAULTS.psi2) == 1
    assert true_optimal([1, 0, 500], DEFAULTS.psi1, DEFAULTS.psi2) == 2


def oracle_fit(cfg):
    spec = model_spec(4)
    return GdwolsFit(spec.design, generate_panel(cfg.replace(n=1)).dataset.coding, np.zeros(3), cfg.psi.copy(),
                     None, ())


def test_evaluate_policy_oracle():
    cfg = SimConfig(seed=1)
    test = make_test_panel(cfg, 500, 1)
    ev = evaluate_policy(oracle_fit(cfg), test, cfg)
    assert ev.agreement_rate == 1.0
    assert ev.value_opt == ev.value_true_opt
    assert all(ev.value_opt >= u for u in ev.uniform_values)


def test_evaluate_policy_dominance():
    cfg = SimConfig(seed=2)
    test = make_test_panel(cfg, 500, 2)
    panel = generate_panel(cfg.replace(n=100))
    for mid in (1, 2, 3, 4):
        s = model_spec(mid)
        _, _, fit = estimate_itr(panel.dataset, s.design, s.propensity_covariates, "ipt")
        ev = evaluate_policy(fit, test, cfg)
        assert 0 <= ev.agreement_rate <= 1
        assert ev.value_opt <= ev.value_true_opt


def test_evaluate_policy_covariate_mismatch():
    cfg = SimConfig(seed=2)
    test = make_test_panel(cfg, 10, 2)
    fit = oracle_fit(cfg)
    bad = GdwolsFit(DesignSpec((), ("Age",)), fit.coding, np.zeros(1), np.zeros((2, 2)), None, ())
    with pytest.raises(KeyError):
        evaluate_policy(bad, test, cfg)


def test_monte_carlo_smoke_and_determinism():
    cfg = SimConfig(seed=3)
    a = run_monte_carlo(cfg, models=(1, 4), kinds=("ipt",), sizes=(100,), replicates=2, test_subjects=200)
    assert len(a.estimates) == 2 * 2 * len(PARAMETERS)
    for m in (1, 4):
        assert len(a.estimates_for(m, "ipt", 100, "psi1.CD4")) == 2
    assert len(a.summary()) == 2 * len(PARAMETERS)
    b = run_monte_carlo(cfg, models=(1, 4), kinds=("ipt",), sizes=(100,), replicates=2, test_subjects=200, workers=2)
    assert a.estimates == b.estimates
    assert a.evaluations == b.evaluations


def test_monte_carlo_replicate_streams():
    cfg = SimConfig(seed=3)
    res = run_monte_carlo(cfg, models=(4,), kinds=("ipt",), sizes=(50,), replicates=1, test_subjects=20)
    panel = generate_panel(cfg.replace(n=50), replicate_rng(3, 50, 0))
    s = model_spec(4)
    _, _, fit = estimate_itr(panel.dataset, s.design, s.propensity_covariates, "ipt")
    assert [r.estimate for r in res.estimates] == fit.psi.ravel().tolist()


def test_monte_carlo_records_failures():
    # three subjects leave some categories empty often enough to trigger failures
    res = run_monte_carlo(SimConfig(seed=4), models=(4,), kinds=("ipt",), sizes=(1,), replicates=3, test_subjects=10)
    assert res.failures
    assert all(np.isnan(r.estimate) for r in res.estimates[:6]) or len(res.failures) < 3
    assert len(res.summary()) == len(PARAMETERS)


def test_monte_carlo_rejects_bad_arguments():
    with pytest.raises(ValueError):
        run_monte_carlo(SimConfig(seed=1), replicates=0)
    with pytest.raises(ValueError):
        run_monte_carlo(SimConfig(seed=1), models=(7,), replicates=1)
