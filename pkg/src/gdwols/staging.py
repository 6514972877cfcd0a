"""From raw CD4 visits and injections to stage-level utility records.

CD4(t) between visits is the straight line joining the two readings; it
is never extrapolated past the first or last visit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "CD4Series",
    "TreatmentStage",
    "StageRecord",
    "UtilityWeights",
    "interpolate_cd4",
    "fraction_above",
    "segment_stages",
    "stage_readings",
    "stage_utility",
    "tailoring_history",
    "build_stage_records",
    "feasible_actions",
]

RESPONSE_THRESHOLD = 500.0
ELIGIBILITY_THRESHOLD = 550.0
MAX_INJECTIONS = 3


@dataclass(frozen=True, eq=False)
class CD4Series:
    times: np.ndarray
    values: np.ndarray
    injections: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ValueError("times and values must be equal-length, non-empty 1-d sequences")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("CD4 series contains non-finite entries")
        if np.any(np.diff(t) <= 0):
            i = int(np.flatnonzero(np.diff(t) <= 0)[0])
            raise ValueError(f"visit times must be strictly increasing (t[{i}]={t[i]}, t[{i + 1}]={t[i + 1]})")
        if np.any(v <= 0):
            raise ValueError("CD4 counts must be positive")
        inj = tuple(sorted((float(d), int(k)) for d, k in self.injections))
        for day, count in inj:
            if count < 0:
                raise ValueError(f"negative injection count at day {day}")
            if day < t[0] or day > t[-1]:
                raise ValueError(f"injection at day {day} lies outside the observed range [{t[0]}, {t[-1]}]")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "injections", inj)


@dataclass(frozen=True)
class TreatmentStage:
    start_time: float
    end_time: float
    n_injections: int
    cd4_first: float

    def __post_init__(self):
        if not self.end_time > self.start_time:
            raise ValueError("a stage must have end_time > start_time")
        if not 0 <= self.n_injections <= MAX_INJECTIONS:
            raise ValueError(f"n_injections must be in 0..{MAX_INJECTIONS}, got {self.n_injections}")


@dataclass(frozen=True)
class UtilityWeights:
    eta: float

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass(frozen=True)
class StageRecord:
    stage: TreatmentStage
    u_g: float
    u_inj: int
    hx: int
    resp: float
    log_resp: float
    covariates: Mapping[str, float] = field(default_factory=dict)

    def utility(self, eta: float) -> float:
        return stage_utility(self, UtilityWeights(eta))


def interpolate_cd4(series: CD4Series, t):
    """Piecewise-linear CD4 at time(s) ``t``; raises outside the observed range."""
    ta = np.asarray(t, dtype=float)
    if np.any(ta < series.times[0]) or np.any(ta > series.times[-1]):
        raise ValueError(f"t={t} outside observed range [{series.times[0]}, {series.times[-1]}]")
    out = np.interp(ta, series.times, series.values)
    return float(out) if out.ndim == 0 else out


def fraction_above(series: CD4Series, start: float, end: float, threshold: float = RESPONSE_THRESHOLD) -> float:
    """Share of ``[start, end]`` with interpolated CD4 >= ``threshold``.

    Exact: each linear piece contributes the length on which it sits at or
    above the threshold.
    """
    if not end > start:
        raise ValueError(f"degenerate interval [{start}, {end}]")
    inner = series.times[(series.times > start) & (series.times < end)]
    knots = np.concatenate([[start], inner, [end]])
    vals = interpolate_cd4(series, knots)
    total = 0.0
    for t0, t1, v0, v1 in zip(knots[:-1], knots[1:], vals[:-1], vals[1:]):
        up0, up1 = v0 >= threshold, v1 >= threshold
        if up0 and up1:
            total += t1 - t0
        elif up0 or up1:
            tc = t0 + (threshold - v0) / (v1 - v0) * (t1 - t0)
            total += (tc - t0) if up0 else (t1 - tc)
    return min(1.0, max(0.0, total / (end - start)))


def segment_stages(series: CD4Series, nominal_length: float = 90.0,
                   eligibility_threshold: float = ELIGIBILITY_THRESHOLD,
                   tolerance: float = 15.0) -> list[TreatmentStage]:
    """Split a visit sequence into treatment stages.

    A stage opens at a visit with CD4 below ``eligibility_threshold`` that
    is not inside another stage, and closes at the first later visit at
    least ``nominal_length - tolerance`` days after opening (or at the last
    visit). The closing visit may open the next stage. Injections dated in
    ``[start, end)`` count toward the stage; the final visit's day is
    included for a stage ending there.
    """
    t, v = series.times, series.values
    n = len(t)
    min_gap = nominal_length - tolerance
    stages = []
    i = 0
    while i < n - 1:
        if v[i] >= eligibility_threshold:
            i += 1
            continue
        later = np.flatnonzero(t[i + 1:] >= t[i] + min_gap)
        j = i + 1 + int(later[0]) if later.size else n - 1
        start, end = float(t[i]), float(t[j])
        last = j == n - 1
        count = sum(k for day, k in series.injections if start <= day < end or (last and day == end))
        stages.append(TreatmentStage(start, end, int(count), float(v[i])))
        i = j
    return stages


def stage_readings(series: CD4Series, stage: TreatmentStage) -> np.ndarray:
    """Observed CD4 values at visits in ``[start, end]``."""
    mask = (series.times >= stage.start_time) & (series.times <= stage.end_time)
    return series.values[mask]


def stage_utility(record: StageRecord, weights: UtilityWeights | float) -> float:
    eta = weights.eta if isinstance(weights, UtilityWeights) else UtilityWeights(float(weights)).eta
    return eta * record.u_g + (1.0 - eta) * record.u_inj


def tailoring_history(stages: Sequence[tuple[TreatmentStage, Sequence[float]]]) -> list[tuple[int, float, float]]:
    """(Hx, Resp, logResp) for each stage of one subject, in time order.

    Resp is the per-injection maximal rise over the first reading of the most
    recent earlier stage that had injections.
    """
    out = []
    prev = None
    for stage, readings in stages:
        if prev is None:
            out.append((0, 0.0, 0.0))
        else:
            p_stage, p_read = prev
            p_read = np.asarray(p_read, dtype=float)
            if p_read.size == 0:
                raise ValueError(f"injected stage starting at {p_stage.start_time} has no CD4 readings")
            resp = float(p_read.max() - p_read[0]) / p_stage.n_injections
            out.append((1, resp, math.log(resp + 1.0)))
        if stage.n_injections > 0:
            prev = (stage, readings)
    return out


def build_stage_records(series: CD4Series, covariates: Mapping[str, float] | None = None,
                        nominal_length: float = 90.0, eligibility_threshold: float = ELIGIBILITY_THRESHOLD,
                        tolerance: float = 15.0, response_threshold: float = RESPONSE_THRESHOLD,
                        ) -> list[StageRecord]:
    stages = segment_stages(series, nominal_length, eligibility_threshold, tolerance)
    history = tailoring_history([(s, stage_readings(series, s)) for s in stages])
    covariates = dict(covariates or {})
    return [
        StageRecord(
            stage=s,
            u_g=fraction_above(series, s.start_time, s.end_time, response_threshold),
            u_inj=-s.n_injections,
            hx=hx,
            resp=resp,
            log_resp=log_resp,
            covariates=covariates,
        )
        for s, (hx, resp, log_resp) in zip(stages, history)
    ]


def feasible_actions(weights: UtilityWeights | float, max_injections: int = MAX_INJECTIONS) -> frozenset[int]:
    """Injection counts that can be optimal at utility weight eta.

    ``k`` injections can beat none only if ``eta > k / (1 + k)``, since
    ``U^g <= 1`` and ``U(eta) >= 0`` without injections.
    """
    eta = weights.eta if isinstance(weights, UtilityWeights) else UtilityWeights(float(weights)).eta
    return frozenset(k for k in range(max_injections + 1) if k == 0 or eta > k / (1.0 + k))
