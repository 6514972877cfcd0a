"""Weighted least-squares solution of the G-dWOLS estimating equations.

With an independence working correlation the estimating equation
``sum_i z_i w_i (y_i - z_i' theta) = 0`` is exactly weighted least squares
on the stacked design ``z_i = [X^beta | 1{A=a_1} X^psi | ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as scl
from scipy.stats import norm

from .data_model import DesignMatrix, DesignSpec, PanelDataset, TreatmentCoding, blip_matrix, build_design_matrix
from .propensity import PropensityFit, WeightKind, balancing_weights, fit_multinomial_logit

__all__ = [
    "RankDeficiencyError",
    "GdwolsFit",
    "CoefficientRow",
    "fit_gdwols",
    "sandwich_vcov",
    "blip_contrast",
    "optimal_treatment",
    "optimal_levels",
    "confidence_intervals",
    "estimate_itr",
]


class RankDeficiencyError(ValueError):
    def __init__(self, message: str, columns: Sequence[str]):
        super().__init__(message)
        self.columns = list(columns)


@dataclass(frozen=True, eq=False)
class GdwolsFit:
    """Fitted treatment-free and blip coefficients.

    ``psi[l]`` is the blip block for category ``coding.nonreference[l]``.
    ``vcov`` is over the stacked parameter vector ``(beta, psi_1, ..., psi_{m-1})``.
    """

    spec: DesignSpec
    coding: TreatmentCoding
    beta: np.ndarray
    psi: np.ndarray
    vcov: np.ndarray | None
    column_labels: tuple[tuple[str, str], ...]
    weight_kind: WeightKind | None = None
    n_subjects: int = 0
    n_obs: int = 0
    residuals: np.ndarray | None = None
    fitted: np.ndarray | None = None
    subject_ids: np.ndarray | None = None
    stage_index: np.ndarray | None = None
    score_sup_norm: float = 0.0
    score_scale: float = 1.0

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.beta, self.psi.ravel()])

    @property
    def se(self) -> np.ndarray | None:
        if self.vcov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def contrasts(self, x_psi: np.ndarray) -> np.ndarray:
        """Blip contrasts, shape (n, m-1), for rows of X^psi (intercept included)."""
        x_psi = np.atleast_2d(np.asarray(x_psi, dtype=float))
        if x_psi.shape[1] != self.spec.r:
            raise ValueError(f"x_psi must have length {self.spec.r} (intercept first), got {x_psi.shape[1]}")
        return x_psi @ self.psi.T

    def blip_covariates(self, dataset: PanelDataset) -> np.ndarray:
        return blip_matrix(dataset, self.spec)

    def recommend(self, dataset: PanelDataset) -> np.ndarray:
        """Recommended level (a_0..a_{m-1} index) for every row of ``dataset``."""
        return optimal_levels(self.contrasts(self.blip_covariates(dataset)))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "coding": self.coding.to_dict(),
            "beta": self.beta.tolist(),
            "psi": self.psi.tolist(),
            "vcov": None if self.vcov is None else self.vcov.tolist(),
            "column_labels": [list(c) for c in self.column_labels],
            "weight_kind": None if self.weight_kind is None else self.weight_kind.value,
            "n_subjects": self.n_subjects,
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GdwolsFit":
        kind = d.get("weight_kind")
        vcov = d.get("vcov")
        return cls(
            spec=DesignSpec.from_dict(d["spec"]),
            coding=TreatmentCoding.from_dict(d["coding"]),
            beta=np.asarray(d["beta"], dtype=float),
            psi=np.asarray(d["psi"], dtype=float).reshape(len(d["coding"]["categories"]) - 1, -1),
            vcov=None if vcov is None else np.asarray(vcov, dtype=float),
            column_labels=tuple(tuple(c) for c in d["column_labels"]),
            weight_kind=None if kind is None else WeightKind.parse(kind),
            n_subjects=int(d.get("n_subjects", 0)),
            n_obs=int(d.get("n_obs", 0)),
        )


def _solve_wls(z: np.ndarray, y: np.ndarray, w: np.ndarray, labels) -> np.ndarray:
    sw = np.sqrt(w)
    a = z * sw[:, None]
    q, r, piv = scl.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(a.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < z.shape[1]:
        dropped = [" / ".join(labels[j]) for j in piv[rank:]]
        raise RankDeficiencyError(
            f"design matrix is rank deficient (rank {rank} < {z.shape[1]}); collinear columns: {dropped}", dropped
        )
    theta = np.empty(z.shape[1])
    theta[piv] = scl.solve_triangular(r, q.T @ (y * sw))
    return theta


def sandwich_vcov(design: np.ndarray, weights: np.ndarray, residuals: np.ndarray,
                  subject_ids: np.ndarray) -> np.ndarray:
    """Cluster-robust ``B^-1 M B^-1`` with clusters given by ``subject_ids``.

    ``B = sum_i z_i w_i z_i'``; ``M`` sums outer products of per-subject
    score totals. No small-sample correction is applied, and the
    variability from estimating the weights is not propagated.
    """
    z = np.asarray(design, dtype=float)
    w = np.asarray(weights, dtype=float)
    bread = z.T @ (z * w[:, None])
    _, inverse = np.unique(np.asarray(subject_ids), return_inverse=True)
    scores = z * (w * residuals)[:, None]
    totals = np.zeros((inverse.max() + 1, z.shape[1]))
    np.add.at(totals, inverse, scores)
    meat = totals.T @ totals
    try:
        half = scl.solve(bread, meat, assume_a="sym")
        vcov = scl.solve(bread, half.T, assume_a="sym")
    except (scl.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"singular bread matrix in sandwich estimator: {exc}") from None
    return (vcov + vcov.T) / 2.0


def fit_gdwols(dataset: PanelDataset, spec: DesignSpec, weights, weight_kind: WeightKind | str | None = None,
               compute_vcov: bool = True, design: DesignMatrix | None = None) -> GdwolsFit:
    """Solve the weighted estimating equations for ``(beta, psi_1, ..., psi_{m-1})``.

    Parameters
    ----------
    dataset : PanelDataset
    spec : DesignSpec
    weights : array_like, shape (n_obs,)
        Strictly positive balancing weights.
    weight_kind : WeightKind, optional
        Recorded on the fit for reporting only.
    compute_vcov : bool
        Skip the sandwich (used inside bootstrap loops).
    design : DesignMatrix, optional
        Precomputed ``build_design_matrix(dataset, spec)``.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (dataset.n_obs,):
        raise ValueError(f"expected {dataset.n_obs} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and strictly positive")
    counts = dataset.category_counts()
    if np.any(counts == 0):
        missing = [dataset.coding.ordered[k] for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"treatment categories with zero total weight (no observations): {missing}")
    dm = design if design is not None else build_design_matrix(dataset, spec)
    z = dm.matrix
    y = dataset.outcome
    theta = _solve_wls(z, y, w, dm.column_labels)
    fitted = z @ theta
    resid = y - fitted
    ee = z.T @ (w * resid)
    scale = float(np.max(np.abs(z).T @ (w * np.abs(y)))) + 1.0
    vcov = sandwich_vcov(z, w, resid, dataset.subject_ids) if compute_vcov else None
    p = spec.p
    return GdwolsFit(
        spec=spec,
        coding=dataset.coding,
        beta=theta[:p],
        psi=theta[p:].reshape(dataset.coding.m - 1, spec.r),
        vcov=vcov,
        column_labels=dm.column_labels,
        weight_kind=None if weight_kind is None else WeightKind.parse(weight_kind),
        n_subjects=dataset.n_subjects,
        n_obs=dataset.n_obs,
        residuals=resid,
        fitted=fitted,
        subject_ids=dataset.subject_ids,
        stage_index=dataset.stage_index,
        score_sup_norm=float(np.max(np.abs(ee))),
        score_scale=scale,
    )


def blip_contrast(fit: GdwolsFit, x_psi, a: str) -> float:
    """``x_psi . psi_a``; identically 0 for the reference category."""
    level = fit.coding.level(a)
    x_psi = np.asarray(x_psi, dtype=float).ravel()
    if x_psi.shape[0] != fit.spec.r:
        raise ValueError(f"x_psi must have length {fit.spec.r} (intercept first)")
    if level == 0:
        return 0.0
    return float(x_psi @ fit.psi[level - 1])


def optimal_levels(contrasts: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Argmax rule: best non-reference level if its contrast is > 0, else 0.

    Ties go to the smallest level index. Contrasts within
    ``rtol * max(1, max|contrast|)`` of each other (or of zero) count as
    tied, so exact ties survive floating-point rounding.
    """
    c = np.atleast_2d(np.asarray(contrasts, dtype=float))
    top = c.max(axis=1)
    tol = rtol * np.maximum(1.0, np.abs(c).max(axis=1))
    best = np.argmax(c >= (top - tol)[:, None], axis=1)
    return np.where(top > tol, best + 1, 0)


def optimal_treatment(fit: GdwolsFit, x_psi) -> str:
    level = int(optimal_levels(fit.contrasts(x_psi))[0])
    return fit.coding.ordered[level]


@dataclass(frozen=True)
class CoefficientRow:
    block: str
    term: str
    estimate: float
    se: float
    lower: float
    upper: float
    significant: bool


def confidence_intervals(fit: GdwolsFit, level: float = 0.95, se=None) -> list[CoefficientRow]:
    """Wald intervals ``estimate +/- z_{(1+level)/2} * SE``.

    ``se`` overrides the sandwich standard errors (e.g. bootstrap SEs).
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    if se is None:
        se = fit.se
        if se is None:
            raise ValueError("fit has no covariance matrix")
    se = np.asarray(se, dtype=float)
    q = norm.ppf((1.0 + level) / 2.0)
    rows = []
    for (block, term), est, s in zip(fit.column_labels, fit.params, se):
        lo, hi = est - q * s, est + q * s
        rows.append(CoefficientRow(block, term, float(est), float(s), float(lo), float(hi),
                                   bool(lo > 0 or hi < 0)))
    return rows


def estimate_itr(dataset: PanelDataset, spec: DesignSpec, propensity_covariates: Sequence[str],
                 weight_kind: WeightKind | str, compute_vcov: bool = True, trim: float | None = None,
                 ) -> tuple[PropensityFit, np.ndarray, GdwolsFit]:
    """Propensity fit, balancing weights and G-dWOLS fit in one call."""
    kind = WeightKind.parse(weight_kind)
    ps = fit_multinomial_logit(dataset, propensity_covariates)
    probs = ps.predict_dataset(dataset)
    w = balancing_weights(probs, dataset.levels, kind, trim=trim)
    fit = fit_gdwols(dataset, spec, w, weight_kind=kind, compute_vcov=compute_vcov)
    return ps, w, fit
