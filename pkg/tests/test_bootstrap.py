import numpy as np
import pytest

from gdwols import DesignSpec, InferenceOptions, bootstrap_inference, estimate_itr
from gdwols.bootstrap import replicate_rng
from gdwols.simulation import SimConfig, generate_panel, model_spec

from .conftest import make_panel


def test_options_validation():
    with pytest.raises(ValueError):
        InferenceOptions(method="jackknife")
    with pytest.raises(ValueError):
        InferenceOptions(method="bootstrap", replicates=0)
    with pytest.raises(ValueError):
        InferenceOptions(confidence_level=1.0)


def test_identical_subjects_give_zero_se():
    n = 10
    ds = make_panel(np.tile([0, 1], n), np.tile([1.0, 3.0], n), subject_ids=np.repeat(np.arange(n), 2).astype(str),
                    stages=np.tile([0, 1], n))
    res = bootstrap_inference(ds, DesignSpec((), ()), (), "ipt", InferenceOptions("bootstrap", 30, seed=1))
    np.testing.assert_array_equal(res.se, 0.0)
    np.testing.assert_allclose(res.lower, [1.0, 2.0], atol=1e-12)


def test_fixed_seed_is_bit_identical_and_worker_independent():
    panel = generate_panel(SimConfig(n=60, seed=8))
    spec = model_spec(4)
    opts = InferenceOptions("bootstrap", 12, seed=99)
    a = bootstrap_inference(panel.dataset, spec.design, spec.propensity_covariates, "overlap", opts)
    b = bootstrap_inference(panel.dataset, spec.design, spec.propensity_covariates, "overlap", opts)
    c = bootstrap_inference(panel.dataset, spec.design, spec.propensity_covariates, "overlap",
                            InferenceOptions("bootstrap", 12, seed=99, workers=2))
    for r in (b, c):
        np.testing.assert_array_equal(a.estimates, r.estimates)
        np.testing.assert_array_equal(a.se, r.se)
        np.testing.assert_array_equal(a.lower, r.lower)
    other = bootstrap_inference(panel.dataset, spec.design, spec.propensity_covariates, "overlap",
                                InferenceOptions("bootstrap", 12, seed=100))
    assert not np.array_equal(a.estimates, other.estimates)


def test_bootstrap_se_close_to_sandwich():
    panel = generate_panel(SimConfig(n=1000, seed=31))
    spec = model_spec(4)
    _, _, fit = estimate_itr(panel.dataset, spec.design, spec.propensity_covariates, "ipt")
    res = bootstrap_inference(panel.dataset, spec.design, spec.propensity_covariates, "ipt",
                              InferenceOptions("bootstrap", 300, seed=5))
    ratio = res.se[3:] / fit.se[3:]
    assert np.all(np.abs(ratio - 1) < 0.2), ratio
    assert res.n_failed == 0


def test_failed_replicates_are_counted():
    # one of two subjects carries the only treated row, so some resamples lack category 1
    ds = make_panel([0, 0, 1, 0], [1.0, 2.0, 3.0, 4.0], subject_ids=["a", "a", "b", "c"], stages=[0, 1, 0, 0])
    res = bootstrap_inference(ds, DesignSpec((), ()), (), "ipt", InferenceOptions("bootstrap", 40, seed=3))
    assert 0 < res.n_failed < 40
    assert len(res.failures) == res.n_failed
    assert res.estimates.shape == (40 - res.n_failed, 2)


def test_bootstrap_errors():
    ds = make_panel([0, 1], [1.0, 2.0], subject_ids=["a", "a"], stages=[0, 1])
    with pytest.raises(ValueError, match="two subjects"):
        bootstrap_inference(ds, DesignSpec((), ()), (), "ipt", InferenceOptions("bootstrap", 5, seed=1))
    ds = make_panel([0, 0, 0], [1.0, 2.0, 3.0], categories=("0", "1"))
    with pytest.raises(RuntimeError, match="all 5"):
        bootstrap_inference(ds, DesignSpec((), ()), (), "ipt", InferenceOptions("bootstrap", 5, seed=1))


def test_replicate_streams_are_distinct():
    a = replicate_rng(1, 0).random(4)
    assert np.array_equal(a, replicate_rng(1, 0).random(4))
    assert not np.array_equal(a, replicate_rng(1, 1).random(4))
    assert not np.array_equal(a, replicate_rng(2, 0).random(4))
