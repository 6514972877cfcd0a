"""CSV and JSON readers and writers.

Floats are written with ``repr`` so a write/read cycle reproduces every
value bit for bit.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data_model import PanelDataset, TreatmentCoding
from .staging import CD4Series, StageRecord, UtilityWeights, stage_utility

__all__ = [
    "InputError",
    "write_panel_csv",
    "read_panel_csv",
    "infer_coding",
    "read_cd4_csv",
    "read_injections_csv",
    "read_baseline_csv",
    "load_series",
    "STAGE_COLUMNS",
    "write_stage_csv",
    "read_stage_csv",
    "stage_panel",
    "write_json",
    "read_json",
    "fmt",
]

PANEL_COLUMNS = ("subject_id", "stage_index", "treatment", "outcome")
STAGE_COLUMNS = ("subject_id", "stage_index", "start", "end", "n_inj", "cd4_first", "u_g", "u_inj", "hx",
                 "log_resp")
STAGE_COVARIATES = ("cd4_first", "hx", "log_resp")


class InputError(ValueError):
    """Malformed input file; the message names the file and line."""


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def _open_rows(path, required: Sequence[str]) -> tuple[list[str], list[tuple[int, dict]]]:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: missing required column(s) {missing}; header is {header}")
        rows = [(i + 2, row) for i, row in enumerate(reader)]
    return list(header), rows


def _num(path, line: int, column: str, text) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise InputError(f"{path}:{line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise InputError(f"{path}:{line}: column {column!r} is not finite: {text!r}")
    return v


def _int(path, line: int, column: str, text) -> int:
    v = _num(path, line, column, text)
    if v != int(v):
        raise InputError(f"{path}:{line}: column {column!r} must be an integer, got {text!r}")
    return int(v)


def infer_coding(labels: Iterable[str]) -> TreatmentCoding:
    """Sorted distinct labels, numerically when every label parses as a number."""
    uniq = sorted(set(labels))
    try:
        uniq.sort(key=float)
    except ValueError:
        pass
    return TreatmentCoding(tuple(uniq))


def write_panel_csv(dataset: PanelDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*PANEL_COLUMNS, *dataset.covariate_names])
        labels = dataset.coding.ordered
        for i in range(dataset.n_obs):
            w.writerow([dataset.subject_ids[i], int(dataset.stage_index[i]), labels[dataset.levels[i]],
                        fmt(dataset.outcome[i]), *(fmt(v) for v in dataset.covariates[i])])


def read_panel_csv(path, coding: TreatmentCoding | None = None) -> PanelDataset:
    header, rows = _open_rows(path, PANEL_COLUMNS)
    covs = [c for c in header if c not in PANEL_COLUMNS]
    if not rows:
        raise InputError(f"{path}: no data rows")
    if coding is None:
        try:
            coding = infer_coding(r["treatment"] for _, r in rows)
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from None
    known = set(coding.categories)
    sid, stage, lev, y, x = [], [], [], [], []
    for line, r in rows:
        if r["treatment"] not in known:
            raise InputError(f"{path}:{line}: treatment {r['treatment']!r} is not one of {list(coding.ordered)}")
        sid.append(r["subject_id"])
        stage.append(_int(path, line, "stage_index", r["stage_index"]))
        lev.append(coding.level(r["treatment"]))
        y.append(_num(path, line, "outcome", r["outcome"]))
        x.append([_num(path, line, c, r[c]) for c in covs])
    try:
        return PanelDataset(coding, np.array(sid, dtype=str), np.array(stage), np.array(lev), np.array(y),
                            np.array(x, dtype=float).reshape(len(rows), len(covs)), tuple(covs))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def read_cd4_csv(path) -> dict[str, tuple[list[float], list[float]]]:
    _, rows = _open_rows(path, ("subject_id", "day", "cd4"))
    out: dict[str, tuple[list[float], list[float]]] = {}
    for line, r in rows:
        days, vals = out.setdefault(r["subject_id"], ([], []))
        day = _num(path, line, "day", r["day"])
        if days and day <= days[-1]:
            raise InputError(f"{path}:{line}: visit days for subject {r['subject_id']!r} are not strictly "
                             f"increasing ({days[-1]:g} then {day:g})")
        days.append(day)
        vals.append(_num(path, line, "cd4", r["cd4"]))
    return out


def read_injections_csv(path) -> dict[str, list[tuple[float, int]]]:
    _, rows = _open_rows(path, ("subject_id", "day", "n_injections"))
    out: dict[str, list[tuple[float, int]]] = defaultdict(list)
    for line, r in rows:
        k = _int(path, line, "n_injections", r["n_injections"])
        if k < 0:
            raise InputError(f"{path}:{line}: negative n_injections")
        out[r["subject_id"]].append((_num(path, line, "day", r["day"]), k))
    return dict(out)


def read_baseline_csv(path) -> tuple[tuple[str, ...], dict[str, dict[str, float]]]:
    header, rows = _open_rows(path, ("subject_id",))
    names = tuple(c for c in header if c != "subject_id")
    clash = set(names) & set(STAGE_COLUMNS)
    if clash:
        raise InputError(f"{path}: baseline columns clash with stage columns: {sorted(clash)}")
    out = {}
    for line, r in rows:
        if r["subject_id"] in out:
            raise InputError(f"{path}:{line}: duplicate subject {r['subject_id']!r}")
        out[r["subject_id"]] = {c: _num(path, line, c, r[c]) for c in names}
    return names, out


def load_series(cd4_path, injections_path=None) -> dict[str, CD4Series]:
    visits = read_cd4_csv(cd4_path)
    inj = read_injections_csv(injections_path) if injections_path is not None else {}
    unknown = sorted(set(inj) - set(visits))
    if unknown:
        raise InputError(f"{injections_path}: subjects without CD4 visits: {unknown}")
    out = {}
    for sid, (days, vals) in visits.items():
        try:
            out[sid] = CD4Series(days, vals, tuple(inj.get(sid, ())))
        except ValueError as exc:
            raise InputError(f"subject {sid!r}: {exc}") from None
    return out


def write_stage_csv(records: Mapping[str, Sequence[StageRecord]], path, baseline_names: Sequence[str] = (),
                    eta: float | None = None) -> None:
    """One row per stage. ``u_eta`` is appended when ``eta`` is given."""
    if eta is not None:
        UtilityWeights(eta)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*STAGE_COLUMNS, *baseline_names] + (["u_eta"] if eta is not None else []))
        for sid, recs in records.items():
            for j, rec in enumerate(recs):
                s = rec.stage
                row = [sid, j, fmt(s.start_time), fmt(s.end_time), s.n_injections, fmt(s.cd4_first),
                       fmt(rec.u_g), rec.u_inj, rec.hx, fmt(rec.log_resp)]
                row += [fmt(rec.covariates[c]) for c in baseline_names]
                if eta is not None:
                    row.append(fmt(stage_utility(rec, eta)))
                w.writerow(row)


def read_stage_csv(path) -> tuple[tuple[str, ...], list[dict]]:
    """Stage rows with numeric fields parsed; returns (extra column names, rows)."""
    header, rows = _open_rows(path, STAGE_COLUMNS)
    extra = tuple(c for c in header if c not in STAGE_COLUMNS and c != "u_eta")
    out = []
    for line, r in rows:
        d = {"subject_id": r["subject_id"], "stage_index": _int(path, line, "stage_index", r["stage_index"]),
             "n_inj": _int(path, line, "n_inj", r["n_inj"])}
        for c in ("start", "end", "cd4_first", "u_g", "u_inj", "hx", "log_resp", *extra):
            d[c] = _num(path, line, c, r[c])
        out.append(d)
    if not out:
        raise InputError(f"{path}: no stage rows")
    return extra, out


def stage_panel(rows: Sequence[Mapping], eta: float, covariates: Sequence[str] | None = None,
                categories: Sequence[str] = ("0", "1", "2", "3")) -> PanelDataset:
    """Panel with treatment = injection count and outcome = U(eta)."""
    eta = UtilityWeights(eta).eta
    if covariates is None:
        covariates = [c for c in rows[0] if c not in ("subject_id", "stage_index", "start", "end", "n_inj",
                                                      "u_g", "u_inj")]
    coding = TreatmentCoding(tuple(categories))
    y = np.array([eta * r["u_g"] + (1.0 - eta) * r["u_inj"] for r in rows])
    x = np.array([[float(r[c]) for c in covariates] for r in rows], dtype=float).reshape(len(rows), len(covariates))
    return PanelDataset(
        coding,
        np.array([r["subject_id"] for r in rows], dtype=str),
        np.array([r["stage_index"] for r in rows]),
        coding.encode(str(r["n_inj"]) for r in rows),
        y,
        x,
        tuple(covariates),
    )


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
