"""Longitudinal data generator for the three-arm simulation study.

Each subject has a fixed Sex, a CD4 random walk reflected into
``[lo, hi]`` by clamping, a subject random intercept and a multinomial
treatment per stage. Outcomes follow

    Y = X^beta beta + 1{A=1} X^psi psi_1 + 1{A=2} X^psi psi_2 + b_i + eps_ij

with ``X^beta = (1, exp(CD4/200), sqrt(CD4))`` and ``X^psi = (1, Sex, CD4)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

from ..data_model import DesignSpec, PanelDataset, Term, TreatmentCoding
from ..estimation import GdwolsFit, optimal_levels

__all__ = [
    "TruncatedNormal",
    "SimConfig",
    "SimTruth",
    "SimulatedPanel",
    "ModelSpec",
    "EvalResult",
    "LinearLinkError",
    "truncated_normal_sample",
    "truncated_normal_mean",
    "allocation_probs",
    "generate_panel",
    "model_spec",
    "true_optimal",
    "conditional_mean",
    "evaluate_policy",
    "SIM_CODING",
]

SIM_CODING = TreatmentCoding(("0", "1", "2"))
COVARIATES = ("Sex", "CD4")


class LinearLinkError(ValueError):
    """The literal (exponential-free) allocation formula left the probability simplex."""


@dataclass(frozen=True)
class TruncatedNormal:
    mean: float = 350.0
    sd: float = 100.0
    lo: float = 50.0
    hi: float = 550.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("truncated normal sd must be positive")
        if not self.lo < self.hi:
            raise ValueError("truncation bounds need lo < hi")


def _vec3(v) -> tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected a length-3 vector, got {v!r}")
    return t


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    stages_per_subject: int = 4
    alpha1: tuple[float, float, float] = (-0.5, -0.2, 0.005)
    alpha2: tuple[float, float, float] = (-1.0, -0.4, 0.007)
    beta: tuple[float, float, float] = (45.0, -10.0, 1.0)
    psi1: tuple[float, float, float] = (-10.0, 5.0, 0.02)
    psi2: tuple[float, float, float] = (-30.0, -7.0, 0.1)
    sex_prob: float = 0.7
    cd4_init: TruncatedNormal = field(default_factory=TruncatedNormal)
    cd4_step_sd: float = 5.0
    random_intercept_sd: float = 0.5
    noise_sd: float = 3.0
    link: str = "logit"
    null_effects: bool = False
    seed: int | None = None

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta", "psi1", "psi2"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        if isinstance(self.cd4_init, Mapping):
            object.__setattr__(self, "cd4_init", TruncatedNormal(**self.cd4_init))
        elif not isinstance(self.cd4_init, TruncatedNormal):
            object.__setattr__(self, "cd4_init", TruncatedNormal(*self.cd4_init))
        if self.null_effects:
            object.__setattr__(self, "psi1", (0.0, 0.0, 0.0))
            object.__setattr__(self, "psi2", (0.0, 0.0, 0.0))
        if self.n < 1 or self.stages_per_subject < 1:
            raise ValueError("n and stages_per_subject must be positive")
        if not 0.0 <= self.sex_prob <= 1.0:
            raise ValueError("sex_prob must lie in [0, 1]")
        if min(self.cd4_step_sd, self.random_intercept_sd, self.noise_sd) <= 0:
            raise ValueError("all standard deviations must be positive")
        if self.link not in ("logit", "paper_linear"):
            raise ValueError(f"unknown link {self.link!r}; expected 'logit' or 'paper_linear'")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    @property
    def psi(self) -> np.ndarray:
        return np.array([self.psi1, self.psi2])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in ("alpha1", "alpha2", "beta", "psi1", "psi2"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown scenario fields: {unknown}")
        return cls(**dict(d))


def truncated_normal_sample(mean: float, sd: float, lo: float, hi: float, rng: np.random.Generator,
                            size=None):
    """Inverse-CDF draw from N(mean, sd^2) restricted to [lo, hi]."""
    if not sd > 0 or not lo < hi:
        raise ValueError("need sd > 0 and lo < hi")
    a = ndtr((lo - mean) / sd)
    b = ndtr((hi - mean) / sd)
    u = rng.uniform(a, b, size=size)
    x = mean + sd * ndtri(u)
    return np.clip(x, lo, hi)


def truncated_normal_mean(mean: float, sd: float, lo: float, hi: float) -> float:
    """Analytic E[X] for the truncated normal (used as a test oracle)."""
    alpha, beta = (lo - mean) / sd, (hi - mean) / sd
    phi = lambda z: np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)  # noqa: E731
    mass = ndtr(beta) - ndtr(alpha)
    return float(mean + sd * (phi(alpha) - phi(beta)) / mass)


def allocation_probs(x_alpha, alpha1, alpha2, link: str = "logit") -> np.ndarray:
    """Treatment probabilities ``(p0, p1, p2)`` for rows ``x_alpha = (1, Sex, CD4)``."""
    x = np.atleast_2d(np.asarray(x_alpha, dtype=float))
    eta = np.column_stack([x @ np.asarray(alpha1, dtype=float), x @ np.asarray(alpha2, dtype=float)])
    if link == "logit":
        full = np.column_stack([np.zeros(len(x)), eta])
        probs = np.exp(full - logsumexp(full, axis=1, keepdims=True))
    elif link == "paper_linear":
        bad = np.flatnonzero(np.any(eta < 0, axis=1))
        if bad.size:
            i = int(bad[0])
            raise LinearLinkError(
                f"linear allocation formula gives a negative probability at Sex={x[i, 1]:g}, CD4={x[i, 2]:g} "
                f"(X.alpha1={eta[i, 0]:.4g}, X.alpha2={eta[i, 1]:.4g}); {bad.size} row(s) affected"
            )
        probs = np.column_stack([np.ones(len(x)), eta]) / (1.0 + eta.sum(axis=1))[:, None]
    else:
        raise ValueError(f"unknown link {link!r}")
    return probs[0] if np.ndim(x_alpha) == 1 else probs


def conditional_mean(cd4: np.ndarray, sex: np.ndarray, level, config: SimConfig) -> np.ndarray:
    """Noise-free E[Y | CD4, Sex, A=level] under the generating model."""
    xb = np.column_stack([np.ones_like(cd4), np.exp(cd4 / 200.0), np.sqrt(cd4)])
    xp = np.column_stack([np.ones_like(cd4), sex, cd4])
    blips = np.column_stack([np.zeros(len(cd4)), xp @ config.psi.T])
    level = np.broadcast_to(np.asarray(level), cd4.shape)
    return xb @ np.asarray(config.beta) + blips[np.arange(len(cd4)), level]


def true_optimal(x_psi, psi1, psi2):
    """Optimal level under the true blip coefficients (argmax rule, strict > 0)."""
    x = np.atleast_2d(np.asarray(x_psi, dtype=float))
    levels = optimal_levels(x @ np.array([psi1, psi2], dtype=float).T)
    return int(levels[0]) if np.ndim(x_psi) == 1 else levels


@dataclass(frozen=True, eq=False)
class SimTruth:
    config: SimConfig
    random_intercepts: np.ndarray
    optimal_levels: np.ndarray

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "psi": {"psi1": list(self.config.psi1), "psi2": list(self.config.psi2)},
            "random_intercepts": self.random_intercepts.tolist(),
            "optimal_treatment": [SIM_CODING.ordered[k] for k in self.optimal_levels.tolist()],
        }


@dataclass(frozen=True, eq=False)
class SimulatedPanel:
    dataset: PanelDataset
    truth: SimTruth

    @property
    def sex(self) -> np.ndarray:
        return self.dataset.column("Sex")

    @property
    def cd4(self) -> np.ndarray:
        return self.dataset.column("CD4")


def generate_panel(config: SimConfig, rng: np.random.Generator | None = None) -> SimulatedPanel:
    """Draw one panel of ``config.n`` subjects x ``config.stages_per_subject`` stages."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n, k = config.n, config.stages_per_subject
    init = config.cd4_init
    b = rng.normal(0.0, config.random_intercept_sd, size=n)
    sex = rng.binomial(1, config.sex_prob, size=n).astype(float)
    cd4 = np.empty((n, k))
    levels = np.empty((n, k), dtype=np.int64)
    y = np.empty((n, k))
    for j in range(k):
        if j == 0:
            cd4[:, 0] = truncated_normal_sample(init.mean, init.sd, init.lo, init.hi, rng, size=n)
        else:
            cd4[:, j] = np.clip(cd4[:, j - 1] + rng.normal(0.0, config.cd4_step_sd, size=n), init.lo, init.hi)
        x_alpha = np.column_stack([np.ones(n), sex, cd4[:, j]])
        probs = allocation_probs(x_alpha, config.alpha1, config.alpha2, config.link)
        u = rng.random(n)
        levels[:, j] = np.minimum((u[:, None] > np.cumsum(probs, axis=1)[:, :-1]).sum(axis=1), 2)
        eps = rng.normal(0.0, config.noise_sd, size=n)
        y[:, j] = conditional_mean(cd4[:, j], sex, levels[:, j], config) + b + eps
    sex_rows = np.repeat(sex, k)
    cd4_rows = cd4.ravel()
    dataset = PanelDataset(
        coding=SIM_CODING,
        subject_ids=np.repeat(np.arange(1, n + 1), k).astype(str),
        stage_index=np.tile(np.arange(k), n),
        levels=levels.ravel(),
        outcome=y.ravel(),
        covariates=np.column_stack([sex_rows, cd4_rows]),
        covariate_names=COVARIATES,
    )
    x_psi = np.column_stack([np.ones(n * k), sex_rows, cd4_rows])
    truth = SimTruth(config, b, true_optimal(x_psi, config.psi1, config.psi2))
    return SimulatedPanel(dataset, truth)


@dataclass(frozen=True)
class ModelSpec:
    id: int
    design: DesignSpec
    propensity_covariates: tuple[str, ...]
    treatment_free_correct: bool
    treatment_model_correct: bool


_LINEAR_TF = (Term("Sex"), Term("CD4"))
_TRANSFORMED_TF = (Term("CD4", "exp_scaled", 200.0), Term("CD4", "sqrt"))
_BLIP = ("Sex", "CD4")


def model_spec(model_id: int) -> ModelSpec:
    """The four nuisance-model specifications of the simulation study.

    1: both wrong; 2: treatment model right; 3: treatment-free model right; 4: both right.
    Blip covariates are always (1, Sex, CD4) on the linear scale.
    """
    if model_id not in (1, 2, 3, 4):
        raise ValueError(f"model id must be 1, 2, 3 or 4, got {model_id!r}")
    tf_ok = model_id in (3, 4)
    ps_ok = model_id in (2, 4)
    return ModelSpec(
        id=model_id,
        design=DesignSpec(_TRANSFORMED_TF if tf_ok else _LINEAR_TF, _BLIP),
        propensity_covariates=COVARIATES if ps_ok else (),
        treatment_free_correct=tf_ok,
        treatment_model_correct=ps_ok,
    )


@dataclass(frozen=True)
class EvalResult:
    agreement_rate: float
    value_opt: float
    uniform_values: tuple[float, ...]
    value_true_opt: float


def evaluate_policy(fit: GdwolsFit, test: SimulatedPanel, config: SimConfig | None = None) -> EvalResult:
    """Agreement with the true rule and noise-free mean outcome of the estimated rule."""
    config = config or test.truth.config
    ds = test.dataset
    missing = fit.spec.covariates_used() - set(ds.covariate_names)
    if missing:
        raise KeyError(f"test panel lacks covariates {sorted(missing)} used by the fit")
    if fit.coding.ordered != ds.coding.ordered:
        raise ValueError("fit and test panel use different treatment codings")
    est = fit.recommend(ds)
    cd4, sex = test.cd4, test.sex
    a_opt = test.truth.optimal_levels
    value_opt = float(conditional_mean(cd4, sex, est, config).mean())
    per_level = np.column_stack([conditional_mean(cd4, sex, lev, config) for lev in range(ds.coding.m)])
    # pointwise maximum, so value_opt <= value_true_opt holds exactly
    value_true = float(per_level.max(axis=1).mean())
    uniform = tuple(float(v) for v in per_level.mean(axis=0))
    return EvalResult(float(np.mean(est == a_opt)), value_opt, uniform, value_true)
