"""Generalized propensity scores and balancing weights.

The propensity model is a multinomial logit with the coding's reference
category as baseline, fitted by full Newton iterations on the pooled
patient-stage rows (within-subject correlation is ignored).
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .data_model import INTERCEPT, PanelDataset, TreatmentCoding

__all__ = [
    "WeightKind",
    "PropensityFit",
    "ConvergenceError",
    "SeparationWarning",
    "fit_multinomial_logit",
    "generalized_propensity",
    "balancing_weight",
    "balancing_weights",
    "verify_balancing",
]


class WeightKind(str, enum.Enum):
    IPT = "ipt"
    OVERLAP = "overlap"

    @classmethod
    def parse(cls, value) -> "WeightKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown weight kind {value!r}; expected 'ipt' or 'overlap'") from None


class ConvergenceError(RuntimeError):
    """Newton iterations did not converge; ``fit`` holds the last iterate."""

    def __init__(self, message: str, fit: "PropensityFit"):
        super().__init__(message)
        self.fit = fit


class SeparationWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Fitted multinomial logit.

    ``alpha[l]`` holds the coefficients (intercept first) of the log-odds of
    category a_{l+1} against the reference.
    """

    coding: TreatmentCoding
    covariate_names: tuple[str, ...]
    alpha: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    vcov: np.ndarray | None = None
    separation: bool = False
    loglik_trace: tuple[float, ...] = ()

    @property
    def coefficient_names(self) -> tuple[str, ...]:
        return (INTERCEPT,) + self.covariate_names

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != len(self.covariate_names):
            raise ValueError(f"expected {len(self.covariate_names)} covariates, got {x.shape[1]}")
        eta = np.column_stack([np.ones(len(x)), x]) @ self.alpha.T
        return np.column_stack([np.zeros(len(x)), eta])

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Probabilities in a_0..a_{m-1} order, one row per covariate row."""
        eta = self.linear_predictor(x)
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))

    def predict_dataset(self, dataset: PanelDataset) -> np.ndarray:
        return self.predict(_covariate_block(dataset, self.covariate_names))

    def standard_errors(self) -> np.ndarray | None:
        if self.vcov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None)).reshape(self.alpha.shape)

    def to_dict(self) -> dict:
        return {
            "coding": self.coding.to_dict(),
            "covariate_names": list(self.covariate_names),
            "alpha": self.alpha.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
            "separation": self.separation,
            "vcov": None if self.vcov is None else self.vcov.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PropensityFit":
        vcov = d.get("vcov")
        return cls(
            coding=TreatmentCoding.from_dict(d["coding"]),
            covariate_names=tuple(d["covariate_names"]),
            alpha=np.asarray(d["alpha"], dtype=float),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            log_likelihood=float(d["log_likelihood"]),
            vcov=None if vcov is None else np.asarray(vcov, dtype=float),
            separation=bool(d.get("separation", False)),
        )


def _covariate_block(dataset: PanelDataset, names: Sequence[str]) -> np.ndarray:
    if not names:
        return np.empty((dataset.n_obs, 0))
    return np.column_stack([dataset.column(c) for c in names])


def _loglik(x: np.ndarray, onehot: np.ndarray, coef: np.ndarray) -> tuple[float, np.ndarray]:
    eta = np.column_stack([np.zeros(len(x)), x @ coef.T])
    lse = logsumexp(eta, axis=1)
    ll = float(np.sum(np.sum(onehot * eta, axis=1) - lse))
    return ll, np.exp(eta - lse[:, None])


def _information(x: np.ndarray, probs: np.ndarray) -> np.ndarray:
    p = probs[:, 1:]
    k = x.shape[1]
    m1 = p.shape[1]
    w = -np.einsum("il,im->ilm", p, p)
    idx = np.arange(m1)
    w[:, idx, idx] += p
    info = np.einsum("ilm,ia,ib->lamb", w, x, x)
    return info.reshape(m1 * k, m1 * k)


def fit_multinomial_logit(
    dataset: PanelDataset,
    covariates: Sequence[str] = (),
    tol: float = 1e-8,
    max_iter: int = 100,
    ridge: float = 1e-8,
) -> PropensityFit:
    """Maximum-likelihood multinomial logit by Newton's method.

    Each Newton step is halved until the log-likelihood does not decrease;
    iteration stops once the sup-norm of the score is below ``tol``.

    Raises
    ------
    ValueError
        If a category is never observed.
    ConvergenceError
        After ``max_iter`` iterations without convergence.
    """
    coding = dataset.coding
    counts = dataset.category_counts()
    if np.any(counts == 0):
        missing = [coding.ordered[k] for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"treatment categories never observed: {missing}")
    names = tuple(covariates)
    x = np.column_stack([np.ones(dataset.n_obs), _covariate_block(dataset, names)])
    n, k = x.shape
    m1 = coding.m - 1
    onehot = np.zeros((n, coding.m))
    onehot[np.arange(n), dataset.levels] = 1.0

    coef = np.zeros((m1, k))
    ll, probs = _loglik(x, onehot, coef)
    trace = [ll]
    converged = False
    it = 0
    info = _information(x, probs)
    while it < max_iter:
        score = ((onehot[:, 1:] - probs[:, 1:]).T @ x).ravel()
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = np.linalg.solve(info + ridge * np.eye(len(info)), score)
        it += 1
        t = 1.0
        for _ in range(50):
            trial = coef + t * step.reshape(m1, k)
            ll_new, probs_new = _loglik(x, onehot, trial)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        coef, ll, probs = trial, ll_new, probs_new
        trace.append(ll)
        info = _information(x, probs)

    try:
        vcov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        vcov = None
    p_obs = probs[np.arange(n), dataset.levels]
    # near-certain fitted assignments are the usual separation signature
    p_rest = np.sum(probs * (1.0 - onehot), axis=1)
    separation = bool(np.min(p_obs) < 1e-10 or np.min(p_rest) < 1e-10)
    fit = PropensityFit(coding, names, coef, converged, it, ll, vcov, separation, tuple(trace))
    if not converged:
        raise ConvergenceError(f"multinomial logit did not converge in {max_iter} iterations", fit)
    if separation:
        warnings.warn("quasi-complete separation: some fitted probabilities are within 1e-10 of 0 or 1",
                      SeparationWarning, stacklevel=2)
    return fit


def generalized_propensity(fit: PropensityFit, x) -> np.ndarray:
    """Probability vector (a_0..a_{m-1}) for one covariate vector."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != len(fit.covariate_names):
        raise ValueError(f"expected {len(fit.covariate_names)} covariates, got {x.shape[0]}")
    return fit.predict(x[None, :])[0]


def _check_gps(gps: np.ndarray) -> np.ndarray:
    gps = np.asarray(gps, dtype=float)
    if np.any(~np.isfinite(gps)) or np.any(gps <= 0) or np.any(gps >= 1):
        raise ValueError("generalized propensity components must lie strictly inside (0, 1)")
    return gps


def balancing_weight(gps, a: int, kind: WeightKind | str) -> float:
    """Weight for an observation that received level ``a`` (0-based, a_0..a_{m-1})."""
    gps = _check_gps(gps)
    kind = WeightKind.parse(kind)
    if kind is WeightKind.IPT:
        return float(1.0 / gps[a])
    return float(1.0 / (gps[a] * np.sum(1.0 / gps)))


def balancing_weights(probs: np.ndarray, levels: np.ndarray, kind: WeightKind | str,
                      trim: float | None = None) -> np.ndarray:
    """Vectorized :func:`balancing_weight`; ``trim`` caps weights from above (off by default)."""
    probs = _check_gps(probs)
    kind = WeightKind.parse(kind)
    p_obs = probs[np.arange(len(levels)), levels]
    if kind is WeightKind.IPT:
        w = 1.0 / p_obs
    else:
        w = 1.0 / (p_obs * np.sum(1.0 / probs, axis=1))
    if trim is not None:
        w = np.minimum(w, trim)
    return w


def verify_balancing(gps, kind: WeightKind | str) -> float:
    """Largest pairwise gap in pi(a) * w(a) across categories.

    ``gps`` may be a single vector or a matrix of rows; the maximum over all
    rows is returned.
    """
    gps = np.atleast_2d(_check_gps(gps))
    kind = WeightKind.parse(kind)
    if kind is WeightKind.IPT:
        w = 1.0 / gps
    else:
        w = 1.0 / (gps * np.sum(1.0 / gps, axis=1, keepdims=True))
    prod = gps * w
    return float(np.max(prod.max(axis=1) - prod.min(axis=1)))
