"""Monte Carlo study over models x weight kinds x sample sizes.

One dataset is drawn per (sample size, replicate) and every model/weight
combination is fitted to it, so cells are compared on common random
numbers. Streams are keyed by (seed, sample size, replicate) and the
out-of-sample test panel has its own key; results do not depend on the
number of worker processes.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from ..bootstrap import replicate_rng
from ..estimation import estimate_itr
from ..propensity import ConvergenceError, WeightKind
from .generate import SimConfig, SimulatedPanel, evaluate_policy, generate_panel, model_spec

__all__ = [
    "PARAMETERS",
    "EstimateRow",
    "EvalRow",
    "CellSummary",
    "MonteCarloResult",
    "run_monte_carlo",
    "make_test_panel",
]

PARAMETERS = tuple(f"psi{l}.{t}" for l in (1, 2) for t in ("intercept", "Sex", "CD4"))
_TEST_KEY = 7_777_777
_FIT_ERRORS = (ValueError, np.linalg.LinAlgError, ConvergenceError, FloatingPointError)


@dataclass(frozen=True)
class EstimateRow:
    model: int
    kind: str
    n: int
    replicate: int
    parameter: str
    estimate: float
    se: float


@dataclass(frozen=True)
class EvalRow:
    model: int
    kind: str
    n: int
    replicate: int
    agreement_rate: float
    value_opt: float
    uniform_values: tuple[float, ...]
    value_true_opt: float


@dataclass(frozen=True)
class CellSummary:
    model: int
    kind: str
    n: int
    parameter: str
    truth: float
    n_ok: int
    mean: float
    median: float
    q1: float
    q3: float
    mean_bias: float
    mc_se: float
    coverage: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    @property
    def z_bias(self) -> float:
        if self.mc_se == 0:
            return 0.0 if self.mean_bias == 0 else math.inf
        return self.mean_bias / self.mc_se


def make_test_panel(config: SimConfig, subjects: int, seed: int | None) -> SimulatedPanel:
    return generate_panel(config.replace(n=subjects), replicate_rng(seed, _TEST_KEY))


def _run_task(args):
    config, n, r, models, kinds, seed, test, level = args
    panel = generate_panel(config.replace(n=n), replicate_rng(seed, n, r))
    est_rows, eval_rows, failures = [], [], []
    for mid in models:
        spec = model_spec(mid)
        for kind in kinds:
            try:
                _, _, fit = estimate_itr(panel.dataset, spec.design, spec.propensity_covariates, kind)
            except _FIT_ERRORS as exc:
                failures.append(f"model {mid} {kind} n={n} replicate {r}: {exc}")
                est_rows += [EstimateRow(mid, kind, n, r, p, math.nan, math.nan) for p in PARAMETERS]
                eval_rows.append(EvalRow(mid, kind, n, r, math.nan, math.nan, (math.nan,) * 3, math.nan))
                continue
            psi = fit.psi.ravel()
            se = fit.se[spec.design.p:]
            est_rows += [EstimateRow(mid, kind, n, r, p, float(e), float(s)) for p, e, s in zip(PARAMETERS, psi, se)]
            ev = evaluate_policy(fit, test, config)
            eval_rows.append(EvalRow(mid, kind, n, r, ev.agreement_rate, ev.value_opt, ev.uniform_values,
                                     ev.value_true_opt))
    return est_rows, eval_rows, failures


@dataclass(frozen=True, eq=False)
class MonteCarloResult:
    config: SimConfig
    models: tuple[int, ...]
    kinds: tuple[str, ...]
    sizes: tuple[int, ...]
    replicates: int
    estimates: tuple[EstimateRow, ...]
    evaluations: tuple[EvalRow, ...]
    failures: tuple[str, ...]
    confidence_level: float = 0.95

    def cells(self) -> list[tuple[int, str, int]]:
        return [(m, k, n) for m in self.models for k in self.kinds for n in self.sizes]

    def estimates_for(self, model: int, kind: str, n: int, parameter: str) -> np.ndarray:
        return np.array([r.estimate for r in self.estimates
                         if (r.model, r.kind, r.n, r.parameter) == (model, kind, n, parameter)])

    def evals_for(self, model: int, kind: str, n: int) -> list[EvalRow]:
        return [r for r in self.evaluations if (r.model, r.kind, r.n) == (model, kind, n)]

    def summary(self) -> list[CellSummary]:
        truth = dict(zip(PARAMETERS, self.config.psi.ravel().tolist()))
        q = norm.ppf((1.0 + self.confidence_level) / 2.0)
        groups: dict[tuple, list[EstimateRow]] = {}
        for row in self.estimates:
            groups.setdefault((row.model, row.kind, row.n, row.parameter), []).append(row)
        out = []
        for (m, k, n) in self.cells():
            for p in PARAMETERS:
                rows = [r for r in groups.get((m, k, n, p), []) if math.isfinite(r.estimate)]
                est = np.array([r.estimate for r in rows])
                se = np.array([r.se for r in rows])
                t = truth[p]
                if len(est) == 0:
                    out.append(CellSummary(m, k, n, p, t, 0, *(math.nan,) * 7))
                    continue
                q1, med, q3 = np.quantile(est, [0.25, 0.5, 0.75])
                sd = float(est.std(ddof=1)) if len(est) > 1 else math.nan
                covered = np.abs(est - t) <= q * se
                out.append(CellSummary(m, k, n, p, t, len(est), float(est.mean()), float(med), float(q1),
                                       float(q3), float(est.mean() - t), sd / math.sqrt(len(est)),
                                       float(covered.mean())))
        return out

    def eval_summary(self) -> list[dict]:
        out = []
        for (m, k, n) in self.cells():
            rows = [r for r in self.evals_for(m, k, n) if math.isfinite(r.agreement_rate)]
            if not rows:
                out.append({"model": m, "kind": k, "n": n, "n_ok": 0})
                continue
            uni = np.array([r.uniform_values for r in rows]).mean(axis=0)
            out.append({
                "model": m, "kind": k, "n": n, "n_ok": len(rows),
                "agreement_rate": float(np.mean([r.agreement_rate for r in rows])),
                "value_opt": float(np.mean([r.value_opt for r in rows])),
                "value_true_opt": float(np.mean([r.value_true_opt for r in rows])),
                **{f"value_a{j}": float(v) for j, v in enumerate(uni)},
            })
        return out

    def write_estimates_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "kind", "n", "replicate", "parameter", "estimate", "se"])
            for r in self.estimates:
                w.writerow([r.model, r.kind, r.n, r.replicate, r.parameter, repr(r.estimate), repr(r.se)])

    def write_eval_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "kind", "n", "replicate", "agreement_rate", "value_opt",
                        "value_a0", "value_a1", "value_a2", "value_true_opt"])
            for r in self.evaluations:
                w.writerow([r.model, r.kind, r.n, r.replicate, repr(r.agreement_rate), repr(r.value_opt),
                            *(repr(v) for v in r.uniform_values), repr(r.value_true_opt)])

    def write_summary_markdown(self, path) -> None:
        lines = [
            "# Monte Carlo summary",
            "",
            f"Replicates per cell: {self.replicates}. Null effects: {self.config.null_effects}. "
            f"Link: {self.config.link}.",
            "",
            "## Blip estimates",
            "",
            "| model | kind | n | parameter | truth | median | IQR | mean bias | MC SE | bias/SE | coverage |",
            "|---|---|---|---|---|---|---|---|---|---|---|",
        ]
        for s in self.summary():
            lines.append(
                f"| {s.model} | {s.kind} | {s.n} | {s.parameter} | {s.truth:g} | {s.median:.4g} | {s.iqr:.4g} "
                f"| {s.mean_bias:.4g} | {s.mc_se:.3g} | {s.z_bias:.2f} | {s.coverage:.3f} |"
            )
        lines += ["", "## Out-of-sample policy evaluation", "",
                  "| model | kind | n | agreement | value_opt | value_a0 | value_a1 | value_a2 | value_true_opt |",
                  "|---|---|---|---|---|---|---|---|---|"]
        for e in self.eval_summary():
            if e["n_ok"] == 0:
                lines.append(f"| {e['model']} | {e['kind']} | {e['n']} | failed | | | | | |")
                continue
            lines.append(
                f"| {e['model']} | {e['kind']} | {e['n']} | {e['agreement_rate']:.4f} | {e['value_opt']:.4f} "
                f"| {e['value_a0']:.4f} | {e['value_a1']:.4f} | {e['value_a2']:.4f} | {e['value_true_opt']:.4f} |"
            )
        if self.failures:
            lines += ["", "## Failed fits", ""] + [f"- {f}" for f in self.failures]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_monte_carlo(config: SimConfig, models: Sequence[int] = (1, 2, 3, 4),
                    kinds: Iterable[WeightKind | str] = ("ipt", "overlap"), sizes: Sequence[int] = (100, 1000),
                    replicates: int = 200, seed: int | None = None, test_subjects: int = 2500,
                    workers: int = 1, confidence_level: float = 0.95) -> MonteCarloResult:
    """Run every (model, kind, n) cell for ``replicates`` replicates.

    ``seed`` defaults to ``config.seed``. The test panel has
    ``test_subjects * config.stages_per_subject`` observations (10,000 at
    the defaults).
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    seed = config.seed if seed is None else seed
    kinds = tuple(WeightKind.parse(k).value for k in kinds)
    models = tuple(int(m) for m in models)
    for m in models:
        model_spec(m)
    sizes = tuple(int(n) for n in sizes)
    test = make_test_panel(config, test_subjects, seed)
    tasks = [(config, n, r, models, kinds, seed, test, confidence_level) for n in sizes for r in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    else:
        results = [_run_task(t) for t in tasks]
    est_rows, eval_rows, failures = [], [], []
    for e, v, f in results:
        est_rows += e
        eval_rows += v
        failures += f
    order = {(m, k, n): i for i, (m, k, n) in enumerate((m, k, n) for m in models for k in kinds for n in sizes)}
    est_rows.sort(key=lambda r: (order[(r.model, r.kind, r.n)], r.replicate, PARAMETERS.index(r.parameter)))
    eval_rows.sort(key=lambda r: (order[(r.model, r.kind, r.n)], r.replicate))
    return MonteCarloResult(config, models, kinds, sizes, replicates, tuple(est_rows), tuple(eval_rows),
                            tuple(failures), confidence_level)
