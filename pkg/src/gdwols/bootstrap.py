"""Subject-level bootstrap for G-dWOLS.

Every replicate redraws whole subjects with replacement and refits the
propensity model, the weights and the outcome regression, so the spread
reflects the estimation of the weights as well.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import DesignSpec, PanelDataset
from .estimation import estimate_itr
from .propensity import ConvergenceError, WeightKind

__all__ = ["InferenceOptions", "BootstrapResult", "bootstrap_inference", "replicate_rng"]

_FIT_ERRORS = (ValueError, np.linalg.LinAlgError, ConvergenceError, FloatingPointError)


@dataclass(frozen=True)
class InferenceOptions:
    method: str = "sandwich"
    replicates: int = 500
    confidence_level: float = 0.95
    seed: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.method not in ("sandwich", "bootstrap"):
            raise ValueError(f"unknown inference method {self.method!r}")
        if self.method == "bootstrap" and self.replicates < 1:
            raise ValueError("bootstrap needs at least one replicate")
        if not 0.0 < self.confidence_level < 1.0:
            raise ValueError("confidence_level must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    estimates: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_failed: int
    replicates: int
    confidence_level: float
    failures: tuple[str, ...] = ()


def replicate_rng(seed: int | None, *key: int) -> np.random.Generator:
    """Independent stream for one replicate, keyed by (seed, *key)."""
    entropy = 0 if seed is None else seed
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=tuple(int(k) for k in key)))


def _resample(dataset: PanelDataset, groups: list[np.ndarray], rng: np.random.Generator) -> PanelDataset:
    picks = rng.integers(0, len(groups), size=len(groups))
    rows = np.concatenate([groups[g] for g in picks])
    # a subject drawn twice becomes two clusters
    new_ids = np.repeat(np.arange(len(picks)).astype(str), [len(groups[g]) for g in picks])
    return dataset.take(rows, subject_ids=new_ids)


def _one_replicate(args):
    dataset, groups, spec, covariates, kind, seed, b = args
    rng = replicate_rng(seed, b)
    sample = _resample(dataset, groups, rng)
    try:
        _, _, fit = estimate_itr(sample, spec, covariates, kind, compute_vcov=False)
    except _FIT_ERRORS as exc:
        return b, None, f"replicate {b}: {exc}"
    return b, fit.params, None


def bootstrap_inference(dataset: PanelDataset, spec: DesignSpec, propensity_covariates: Sequence[str],
                        weight_kind: WeightKind | str, options: InferenceOptions) -> BootstrapResult:
    """Bootstrap SEs (replicate SD) and percentile intervals.

    Replicate ``b`` draws from its own stream keyed by ``(seed, b)``, so the
    result does not depend on ``options.workers``.
    """
    if options.replicates < 1:
        raise ValueError("bootstrap needs at least one replicate")
    groups = list(dataset.subject_rows().values())
    if len(groups) < 2:
        raise ValueError("bootstrap needs at least two subjects")
    kind = WeightKind.parse(weight_kind)
    tasks = [(dataset, groups, spec, tuple(propensity_covariates), kind, options.seed, b)
             for b in range(options.replicates)]
    if options.workers > 1:
        with ProcessPoolExecutor(max_workers=options.workers) as pool:
            results = list(pool.map(_one_replicate, tasks, chunksize=max(1, len(tasks) // (4 * options.workers))))
    else:
        results = [_one_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    ok = [r[1] for r in results if r[1] is not None]
    failures = tuple(r[2] for r in results if r[2] is not None)
    if not ok:
        raise RuntimeError(f"all {options.replicates} bootstrap replicates failed; first error: {failures[0]}")
    est = np.vstack(ok)
    if len(est) > 1:
        se = np.where(np.ptp(est, axis=0) == 0, 0.0, est.std(axis=0, ddof=1))
    else:
        se = np.zeros(est.shape[1])
    alpha = 1.0 - options.confidence_level
    lower, upper = np.quantile(est, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
    return BootstrapResult(est, se, lower, upper, len(failures), options.replicates,
                           options.confidence_level, failures)
