"""Panel data containers, treatment coding and design matrices.

A panel is stored column-wise (one numpy array per field) so that the
estimators can work on it directly; :class:`StageObservation` is the
row view used for construction and iteration.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "TreatmentCoding",
    "StageObservation",
    "PanelDataset",
    "Term",
    "DesignSpec",
    "DesignMatrix",
    "BalanceRow",
    "BalanceTable",
    "build_design_matrix",
    "smd_table",
]

INTERCEPT = "(Intercept)"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TreatmentCoding:
    """Ordered treatment categories with one reference level.

    ``categories`` keeps the order in which non-reference levels are
    numbered: ``nonreference[0]`` is a_1, ``nonreference[1]`` is a_2, etc.
    """

    categories: tuple[str, ...]
    reference_index: int = 0

    def __post_init__(self):
        cats = tuple(str(c) for c in self.categories)
        object.__setattr__(self, "categories", cats)
        if len(cats) < 2:
            raise ValueError("a treatment coding needs at least two categories")
        if len(set(cats)) != len(cats):
            raise ValueError(f"duplicate treatment labels in {cats}")
        if not 0 <= self.reference_index < len(cats):
            raise ValueError(f"reference_index {self.reference_index} out of range")

    @property
    def m(self) -> int:
        return len(self.categories)

    @property
    def reference(self) -> str:
        return self.categories[self.reference_index]

    @property
    def nonreference(self) -> tuple[str, ...]:
        return tuple(c for i, c in enumerate(self.categories) if i != self.reference_index)

    @property
    def ordered(self) -> tuple[str, ...]:
        """Labels in a_0, a_1, ..., a_{m-1} order (reference first)."""
        return (self.reference,) + self.nonreference

    def level(self, label: str) -> int:
        """Position of ``label`` in a_0..a_{m-1} order (0 is the reference)."""
        try:
            return self.ordered.index(str(label))
        except ValueError:
            raise KeyError(f"unknown treatment category {label!r}; known: {self.categories}") from None

    def encode(self, labels: Iterable) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.ordered)}
        out = []
        for lab in labels:
            try:
                out.append(lookup[str(lab)])
            except KeyError:
                raise KeyError(f"unknown treatment category {lab!r}; known: {self.categories}") from None
        return np.asarray(out, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"categories": list(self.categories), "reference_index": self.reference_index}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreatmentCoding":
        return cls(tuple(d["categories"]), int(d.get("reference_index", 0)))


@dataclass(frozen=True)
class StageObservation:
    subject_id: str
    stage_index: int
    covariates: Mapping[str, float]
    treatment: str
    outcome: float


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Subject-clustered patient-stage observations.

    Parameters
    ----------
    coding : TreatmentCoding
    subject_ids : array of str, shape (n_obs,)
    stage_index : array of int, shape (n_obs,)
    levels : array of int, shape (n_obs,)
        Treatment level in a_0..a_{m-1} order (0 = reference).
    outcome : array of float, shape (n_obs,)
    covariates : array of float, shape (n_obs, n_covariates)
    covariate_names : tuple of str
    """

    coding: TreatmentCoding
    subject_ids: np.ndarray
    stage_index: np.ndarray
    levels: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    _col: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = _frozen(np.array(self.subject_ids).astype(str))
        stage = _frozen(np.array(self.stage_index, dtype=np.int64))
        levels = _frozen(np.array(self.levels, dtype=np.int64))
        y = _frozen(np.array(self.outcome, dtype=float))
        names = tuple(str(c) for c in self.covariate_names)
        x = np.array(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(ids), len(names)) if names else np.empty((len(ids), 0))
        x = _frozen(x)
        n = len(ids)
        if not (len(stage) == len(levels) == len(y) == x.shape[0] == n):
            raise ValueError("panel columns have inconsistent lengths")
        if x.shape[1] != len(names):
            raise ValueError("covariate matrix width does not match covariate_names")
        if len(set(names)) != len(names):
            raise ValueError("duplicate covariate names")
        if n and (levels.min() < 0 or levels.max() >= self.coding.m):
            raise ValueError("treatment levels out of range for the coding")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise ValueError(f"non-finite covariate in row {bad} (subject {ids[bad]})")
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise ValueError(f"non-finite outcome in row {bad} (subject {ids[bad]})")
        if np.any(stage < 0):
            raise ValueError("stage_index must be nonnegative")
        keys = set()
        for s, j in zip(ids.tolist(), stage.tolist()):
            if (s, j) in keys:
                raise ValueError(f"duplicate (subject_id, stage_index) = ({s}, {j})")
            keys.add((s, j))
        for attr, val in (("subject_ids", ids), ("stage_index", stage), ("levels", levels),
                          ("outcome", y), ("covariates", x), ("covariate_names", names)):
            object.__setattr__(self, attr, val)
        object.__setattr__(self, "_col", {c: i for i, c in enumerate(names)})

    @classmethod
    def from_observations(cls, coding: TreatmentCoding, observations: Sequence[StageObservation],
                          covariate_names: Sequence[str] | None = None) -> "PanelDataset":
        observations = list(observations)
        if covariate_names is None:
            covariate_names = list(observations[0].covariates) if observations else []
        names = tuple(covariate_names)
        x = np.empty((len(observations), len(names)))
        for i, ob in enumerate(observations):
            if set(ob.covariates) != set(names):
                raise ValueError(f"observation {i} covariates {sorted(ob.covariates)} != {sorted(names)}")
            x[i] = [ob.covariates[c] for c in names]
        return cls(
            coding=coding,
            subject_ids=np.array([str(o.subject_id) for o in observations], dtype=str),
            stage_index=np.array([o.stage_index for o in observations], dtype=np.int64),
            levels=coding.encode(o.treatment for o in observations),
            outcome=np.array([o.outcome for o in observations], dtype=float),
            covariates=x,
            covariate_names=names,
        )

    @property
    def n_obs(self) -> int:
        return len(self.outcome)

    @property
    def n_subjects(self) -> int:
        return len(np.unique(self.subject_ids))

    @property
    def treatments(self) -> list[str]:
        ordered = self.coding.ordered
        return [ordered[k] for k in self.levels.tolist()]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self._col[name]]
        except KeyError:
            raise KeyError(f"unknown covariate {name!r}; available: {list(self.covariate_names)}") from None

    def observations(self) -> list[StageObservation]:
        treatments = self.treatments
        return [
            StageObservation(
                subject_id=str(self.subject_ids[i]),
                stage_index=int(self.stage_index[i]),
                covariates=dict(zip(self.covariate_names, self.covariates[i].tolist())),
                treatment=treatments[i],
                outcome=float(self.outcome[i]),
            )
            for i in range(self.n_obs)
        ]

    def category_counts(self) -> np.ndarray:
        return np.bincount(self.levels, minlength=self.coding.m)

    def with_outcome(self, outcome: np.ndarray) -> "PanelDataset":
        return PanelDataset(self.coding, self.subject_ids, self.stage_index, self.levels,
                            outcome, self.covariates, self.covariate_names)

    def take(self, rows: np.ndarray, subject_ids: np.ndarray | None = None) -> "PanelDataset":
        """Row subset; ``subject_ids`` may relabel clusters (used by the bootstrap)."""
        ids = self.subject_ids[rows] if subject_ids is None else subject_ids
        return PanelDataset(self.coding, ids, self.stage_index[rows], self.levels[rows],
                            self.outcome[rows], self.covariates[rows], self.covariate_names)

    def subject_rows(self) -> dict[str, np.ndarray]:
        """Map subject id -> row indices, in first-appearance order."""
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(self.subject_ids.tolist()):
            groups.setdefault(s, []).append(i)
        return {s: np.asarray(rows, dtype=np.int64) for s, rows in groups.items()}


# --------------------------------------------------------------------------
# Design specification

_EXP_RE = re.compile(r"^exp\(\s*([^/()]+?)\s*/\s*([0-9.eE+-]+)\s*\)$")
_SQRT_RE = re.compile(r"^sqrt\(\s*([^()]+?)\s*\)$")


@dataclass(frozen=True)
class Term:
    """A treatment-free regressor: a covariate with an optional transform.

    ``transform`` is one of ``"identity"``, ``"exp_scaled"`` (``exp(x / scale)``)
    or ``"sqrt"``.
    """

    covariate: str
    transform: str = "identity"
    scale: float | None = None

    def __post_init__(self):
        if self.transform not in ("identity", "exp_scaled", "sqrt"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.transform == "exp_scaled":
            if self.scale is None or not math.isfinite(self.scale) or self.scale == 0:
                raise ValueError("exp_scaled needs a finite nonzero scale")
        elif self.scale is not None:
            raise ValueError(f"transform {self.transform!r} takes no scale")

    @classmethod
    def parse(cls, text: str) -> "Term":
        """Parse ``"CD4"``, ``"sqrt(CD4)"`` or ``"exp(CD4/200)"``."""
        s = text.strip()
        m = _EXP_RE.match(s)
        if m:
            return cls(m.group(1), "exp_scaled", float(m.group(2)))
        m = _SQRT_RE.match(s)
        if m:
            return cls(m.group(1), "sqrt")
        if "(" in s or ")" in s:
            raise ValueError(f"cannot parse term {text!r}")
        return cls(s)

    @property
    def label(self) -> str:
        if self.transform == "exp_scaled":
            return f"exp({self.covariate}/{self.scale:g})"
        if self.transform == "sqrt":
            return f"sqrt({self.covariate})"
        return self.covariate

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            if self.transform == "exp_scaled":
                return np.exp(x / self.scale)
            if self.transform == "sqrt":
                return np.where(x >= 0, np.sqrt(np.abs(x)), np.nan)
        return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class DesignSpec:
    """Treatment-free terms and blip covariates; both get an implicit intercept."""

    treatment_free_terms: tuple[Term, ...] = ()
    blip_terms: tuple[str, ...] = ()

    def __post_init__(self):
        tf = tuple(t if isinstance(t, Term) else Term.parse(str(t)) for t in self.treatment_free_terms)
        object.__setattr__(self, "treatment_free_terms", tf)
        object.__setattr__(self, "blip_terms", tuple(str(b) for b in self.blip_terms))

    @property
    def p(self) -> int:
        return 1 + len(self.treatment_free_terms)

    @property
    def r(self) -> int:
        return 1 + len(self.blip_terms)

    def width(self, m: int) -> int:
        return self.p + (m - 1) * self.r

    def covariates_used(self) -> set[str]:
        return {t.covariate for t in self.treatment_free_terms} | set(self.blip_terms)

    def validate(self, covariate_names: Sequence[str]) -> None:
        missing = sorted(self.covariates_used() - set(covariate_names))
        if missing:
            raise KeyError(f"design references unknown covariates {missing}")

    def to_dict(self) -> dict:
        return {"treatment_free": [t.label for t in self.treatment_free_terms],
                "blip": list(self.blip_terms)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DesignSpec":
        return cls(tuple(Term.parse(t) for t in d.get("treatment_free", [])), tuple(d.get("blip", [])))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    matrix: np.ndarray
    column_labels: tuple[tuple[str, str], ...]
    p: int
    r: int

    def blip_covariates(self) -> np.ndarray:
        """X^psi for every row, regardless of treatment received."""
        m1 = (self.matrix.shape[1] - self.p) // self.r
        blocks = self.matrix[:, self.p:].reshape(len(self.matrix), m1, self.r)
        return blocks.sum(axis=1)


def treatment_free_matrix(dataset: PanelDataset, spec: DesignSpec) -> np.ndarray:
    cols = [np.ones(dataset.n_obs)]
    for term in spec.treatment_free_terms:
        raw = dataset.column(term.covariate)
        val = term.evaluate(raw)
        bad = np.flatnonzero(~np.isfinite(val))
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"term {term.label} is non-finite at row {i} (subject {dataset.subject_ids[i]}, "
                f"stage {dataset.stage_index[i]}, {term.covariate}={raw[i]!r})"
            )
        cols.append(val)
    return np.column_stack(cols)


def blip_matrix(dataset: PanelDataset, spec: DesignSpec) -> np.ndarray:
    cols = [np.ones(dataset.n_obs)] + [dataset.column(c) for c in spec.blip_terms]
    return np.column_stack(cols)


def build_design_matrix(dataset: PanelDataset, spec: DesignSpec) -> DesignMatrix:
    """Stack ``[X^beta | 1{A=a_1} X^psi | ... | 1{A=a_{m-1}} X^psi]`` row by row."""
    spec.validate(dataset.covariate_names)
    xb = treatment_free_matrix(dataset, spec)
    xp = blip_matrix(dataset, spec)
    m = dataset.coding.m
    blocks = [xb]
    for lev in range(1, m):
        blocks.append(xp * (dataset.levels == lev)[:, None])
    labels = [("treatment_free", INTERCEPT)] + [("treatment_free", t.label) for t in spec.treatment_free_terms]
    blip_names = [INTERCEPT] + list(spec.blip_terms)
    for cat in dataset.coding.nonreference:
        labels += [(f"blip[{cat}]", b) for b in blip_names]
    mat = _frozen(np.hstack(blocks))
    return DesignMatrix(mat, tuple(labels), spec.p, spec.r)


# --------------------------------------------------------------------------
# Balance diagnostics


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    binary: bool
    counts: tuple[int, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]
    smd: float


@dataclass(frozen=True)
class BalanceTable:
    categories: tuple[str, ...]
    n: tuple[int, ...]
    rows: tuple[BalanceRow, ...]

    def __getitem__(self, covariate: str) -> BalanceRow:
        for row in self.rows:
            if row.covariate == covariate:
                return row
        raise KeyError(covariate)

    def imbalanced(self, threshold: float = 0.1) -> list[str]:
        return [r.covariate for r in self.rows if r.smd > threshold]


def _pair_smd(m1: float, v1: float, m2: float, v2: float) -> float:
    diff = abs(m1 - m2)
    pooled = math.sqrt((v1 + v2) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / pooled


def smd_table(dataset: PanelDataset, covariates: Sequence[str] | None = None) -> BalanceTable:
    """Per-category summaries and the maximum pairwise standardized mean difference.

    Continuous covariates use ``|m_j - m_k| / sqrt((s_j^2 + s_k^2) / 2)`` with
    sample SDs; 0/1 covariates use proportions with binomial variances
    ``p (1 - p)``. Categories absent from the data are skipped.
    """
    if covariates is None:
        covariates = dataset.covariate_names
    counts = dataset.category_counts()
    present = [k for k in range(dataset.coding.m) if counts[k] > 0]
    if len(present) < 2:
        raise ValueError("SMD needs at least two treatment categories present")
    rows = []
    for name in covariates:
        x = dataset.column(name)
        binary = bool(np.all((x == 0) | (x == 1)))
        means, sds, cnts, variances = [], [], [], []
        for k in present:
            xk = x[dataset.levels == k]
            mu = float(xk.mean())
            if binary:
                var = mu * (1.0 - mu)
                cnts.append(int(xk.sum()))
            else:
                var = float(xk.var(ddof=1)) if len(xk) > 1 else 0.0
                cnts.append(len(xk))
            means.append(mu)
            variances.append(var)
            sds.append(math.sqrt(var))
        smd = 0.0
        for a, b in combinations(range(len(present)), 2):
            smd = max(smd, _pair_smd(means[a], variances[a], means[b], variances[b]))
        rows.append(BalanceRow(name, binary, tuple(cnts), tuple(means), tuple(sds), smd))
    ordered = dataset.coding.ordered
    return BalanceTable(tuple(ordered[k] for k in present), tuple(int(counts[k]) for k in present), tuple(rows))
