"""``gdwols`` command-line interface.

Exit codes: 0 success, 1 a check failed, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bootstrap import InferenceOptions, bootstrap_inference
from .data_model import DesignSpec, PanelDataset, TreatmentCoding
from .estimation import confidence_intervals, estimate_itr, optimal_levels
from .io import (
    InputError,
    fmt,
    load_series,
    read_baseline_csv,
    read_json,
    read_panel_csv,
    read_stage_csv,
    stage_panel,
    write_json,
    write_panel_csv,
    write_stage_csv,
)
from .propensity import ConvergenceError, WeightKind, verify_balancing
from .simulation import LinearLinkError, SimConfig, generate_panel, myopic_vs_dynamic_check, run_monte_carlo
from .staging import MAX_INJECTIONS, build_stage_records, feasible_actions

__all__ = [
    "FitConfig",
    "parse_grid",
    "cmd_simulate",
    "cmd_stages",
    "cmd_fit",
    "cmd_sweep_eta",
    "cmd_profiles",
    "cmd_mc",
    "cmd_check_myopic",
    "main",
]

log = logging.getLogger("gdwols")

OK, CHECK_FAILED, INPUT_ERROR = 0, 1, 2
BALANCE_TOL = 1e-12
_HX_NAMES = ("hx", "Hx")
_LOGRESP_NAMES = ("log_resp", "logResp")


class CommandError(Exception):
    def __init__(self, message: str, code: int = INPUT_ERROR):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class FitConfig:
    """Fit configuration as read from JSON.

    Keys: ``treatment_free`` and ``blip`` (term lists), ``propensity``
    (covariate list, empty for intercept-only), ``weights`` (``ipt`` or
    ``overlap``), optional ``categories`` (reference first), ``trim`` and
    ``inference`` (``method``, ``replicates``, ``confidence_level``, ``seed``,
    ``workers``).
    """

    design: DesignSpec
    propensity: tuple[str, ...] = ()
    weights: WeightKind = WeightKind.IPT
    categories: tuple[str, ...] | None = None
    trim: float | None = None
    inference: InferenceOptions = field(default_factory=InferenceOptions)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitConfig":
        allowed = {"treatment_free", "blip", "propensity", "weights", "categories", "trim", "inference"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise CommandError(f"unknown fit-config keys {unknown}; allowed: {sorted(allowed)}")
        try:
            design = DesignSpec.from_dict({"treatment_free": d.get("treatment_free", []), "blip": d.get("blip", [])})
            inf = dict(d.get("inference") or {})
            return cls(
                design=design,
                propensity=tuple(d.get("propensity", ())),
                weights=WeightKind.parse(d.get("weights", "ipt")),
                categories=None if d.get("categories") is None else tuple(str(c) for c in d["categories"]),
                trim=d.get("trim"),
                inference=InferenceOptions(**inf),
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise CommandError(f"invalid fit config: {exc}") from None

    def with_weights(self, kind) -> "FitConfig":
        if kind is None:
            return self
        return FitConfig(self.design, self.propensity, WeightKind.parse(kind), self.categories, self.trim,
                         self.inference)

    def to_dict(self) -> dict:
        i = self.inference
        return {
            **self.design.to_dict(),
            "propensity": list(self.propensity),
            "weights": self.weights.value,
            "categories": None if self.categories is None else list(self.categories),
            "trim": self.trim,
            "inference": {"method": i.method, "replicates": i.replicates, "confidence_level": i.confidence_level,
                          "seed": i.seed, "workers": i.workers},
        }


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` (inclusive) into a grid rounded to 12 decimals."""
    try:
        start, stop, step = (float(t) for t in text.split(":"))
    except ValueError:
        raise CommandError(f"grid must look like start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise CommandError(f"grid needs step > 0 and stop >= start, got {text!r}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    grid = np.round(start + step * np.arange(n), 12)
    if grid[0] < 0 or grid[-1] > 1:
        raise CommandError(f"eta grid must lie within [0, 1], got {text!r}")
    return grid


def _load_fit_config(path) -> FitConfig:
    d = read_json(path)
    if isinstance(d, Mapping) and "config" in d and "gdwols" in d:
        d = d["config"]
    if not isinstance(d, Mapping):
        raise CommandError(f"{path}: fit config must be a JSON object")
    return FitConfig.from_dict(d)


def _stem(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# --------------------------------------------------------------------- simulate


def cmd_simulate(out, scenario=None, seed: int | None = None, link: str | None = None, null: bool = False,
                 n: int | None = None, truth=None) -> int:
    """Draw a simulated panel and write it plus a truth sidecar JSON."""
    d = read_json(scenario) if scenario is not None else {}
    try:
        config = SimConfig.from_dict(d)
        changes = {k: v for k, v in (("seed", seed), ("link", link), ("n", n)) if v is not None}
        if null:
            changes["null_effects"] = True
        config = config.replace(**changes)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid scenario: {exc}") from None
    try:
        panel = generate_panel(config)
    except LinearLinkError as exc:
        raise CommandError(f"cannot simulate with link={config.link!r}: {exc}") from None
    out = Path(out)
    write_panel_csv(panel.dataset, out)
    write_json(panel.truth.to_dict(), truth if truth is not None else _stem(out, ".truth.json"))
    log.info("wrote %d observations on %d subjects to %s", panel.dataset.n_obs, panel.dataset.n_subjects, out)
    return OK


# ----------------------------------------------------------------------- stages


def cmd_stages(cd4, injections, out, eta: float | None = None, baseline=None, nominal_length: float = 90.0,
               tolerance: float = 15.0) -> int:
    series = load_series(cd4, injections)
    names, base = (), {}
    if baseline is not None:
        names, base = read_baseline_csv(baseline)
        missing = sorted(set(series) - set(base))
        if missing:
            raise CommandError(f"{baseline}: no baseline row for subjects {missing}")
    records = {}
    for sid, s in series.items():
        try:
            records[sid] = build_stage_records(s, base.get(sid, {}), nominal_length=nominal_length,
                                               tolerance=tolerance)
        except ValueError as exc:
            raise CommandError(f"subject {sid!r}: {exc}") from None
    if eta is not None and not 0.0 <= eta <= 1.0:
        raise CommandError(f"eta must lie in [0, 1], got {eta}")
    write_stage_csv(records, out, names, eta)
    log.info("wrote %d stages for %d subjects to %s", sum(map(len, records.values())), len(records), out)
    return OK


# -------------------------------------------------------------------------- fit


def _fit(dataset: PanelDataset, cfg: FitConfig, compute_vcov: bool = True):
    try:
        cfg.design.validate(dataset.covariate_names)
        missing = sorted(set(cfg.propensity) - set(dataset.covariate_names))
        if missing:
            raise KeyError(f"propensity covariates not in data: {missing}")
        return estimate_itr(dataset, cfg.design, cfg.propensity, cfg.weights, compute_vcov=compute_vcov,
                            trim=cfg.trim)
    except (ValueError, KeyError, ConvergenceError, np.linalg.LinAlgError) as exc:
        raise CommandError(f"estimation failed: {exc}", INPUT_ERROR) from None


def cmd_fit(panel, config, out, weights: str | None = None, seed: int | None = None) -> int:
    """Fit G-dWOLS; writes fit.json plus coefficient and residual tables."""
    cfg = _load_fit_config(config).with_weights(weights)
    if seed is not None:
        i = cfg.inference
        cfg = FitConfig(cfg.design, cfg.propensity, cfg.weights, cfg.categories, cfg.trim,
                        InferenceOptions(i.method, i.replicates, i.confidence_level, seed, i.workers))
    coding = None
    if cfg.categories is not None:
        coding = TreatmentCoding(cfg.categories)
    ds = read_panel_csv(panel, coding)
    ps, w, fit = _fit(ds, cfg)
    probs = ps.predict_dataset(ds)
    gap = verify_balancing(probs, cfg.weights)
    log.info("balancing audit (%s): max |pi*w gap| = %.3g over %d observations", cfg.weights.value, gap, ds.n_obs)
    inf = cfg.inference
    if inf.method == "bootstrap":
        boot = bootstrap_inference(ds, cfg.design, cfg.propensity, cfg.weights, inf)
        se, lower, upper = boot.se, boot.lower, boot.upper
        inference = {"method": "bootstrap", "replicates": inf.replicates, "failed": boot.n_failed, "seed": inf.seed,
                     "se": se.tolist(), "lower": lower.tolist(), "upper": upper.tolist()}
        rows = []
        for (block, term), est, s, lo, hi in zip(fit.column_labels, fit.params, se, lower, upper):
            rows.append((block, term, est, s, lo, hi, bool(lo > 0 or hi < 0)))
    else:
        inference = {"method": "sandwich"}
        rows = [(r.block, r.term, r.estimate, r.se, r.lower, r.upper, r.significant)
                for r in confidence_intervals(fit, inf.confidence_level)]
    out = Path(out)
    write_json({
        "config": cfg.to_dict(),
        "n_obs": ds.n_obs,
        "n_subjects": ds.n_subjects,
        "propensity": ps.to_dict(),
        "gdwols": fit.to_dict(),
        "inference": {**inference, "confidence_level": inf.confidence_level},
        "balancing_audit": {"kind": cfg.weights.value, "max_gap": gap, "passed": bool(gap <= BALANCE_TOL)},
        "estimating_equation": {"sup_norm": fit.score_sup_norm, "scale": fit.score_scale},
    }, out)
    with open(_stem(out, ".coefficients.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["block", "term", "estimate", "se", "lower", "upper", "significant", "formatted"])
        for block, term, est, s, lo, hi, sig in rows:
            wr.writerow([block, term, fmt(est), fmt(s), fmt(lo), fmt(hi), int(sig),
                         f"{est:.3f} ({lo:.3f}, {hi:.3f}){'*' if sig else ''}"])
    with open(_stem(out, ".residuals.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subject_id", "stage_index", "fitted", "residual"])
        for sid, j, f, r in zip(ds.subject_ids, ds.stage_index, fit.fitted, fit.residuals):
            wr.writerow([sid, int(j), fmt(f), fmt(r)])
    if gap > BALANCE_TOL:
        log.error("balancing audit failed: gap %.3g exceeds %.0e", gap, BALANCE_TOL)
        return CHECK_FAILED
    return OK


# -------------------------------------------------------------------- sweep-eta


def _stage_categories(rows) -> tuple[str, ...]:
    present = sorted({int(r["n_inj"]) for r in rows})
    if 0 not in present:
        raise CommandError("no stage with zero injections; the reference category is empty")
    return tuple(str(k) for k in present)


def _stage_covariates(cfg: FitConfig) -> list[str]:
    used = cfg.design.covariates_used() | set(cfg.propensity)
    return sorted(used)


def cmd_sweep_eta(stages, config, out, grid: str = "0:1:0.05", weights: str | None = None) -> int:
    """Refit on U(eta) over a grid and count recommendations per injection count."""
    cfg = _load_fit_config(config).with_weights(weights)
    etas = parse_grid(grid)
    _, rows = read_stage_csv(stages)
    covs = _stage_covariates(cfg)
    missing = [c for c in covs if c not in rows[0]]
    if missing:
        raise CommandError(f"{stages}: fit config uses columns not in the stage file: {missing}")
    cats = _stage_categories(rows)
    n_failed = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["eta", *(f"n_a{k}" for k in range(MAX_INJECTIONS + 1)), "feasible", "status"])
        for eta in etas:
            feas = ";".join(str(k) for k in sorted(feasible_actions(float(eta))))
            ds = stage_panel(rows, float(eta), covs, cats)
            try:
                _, _, fit = _fit(ds, cfg, compute_vcov=False)
            except CommandError as exc:
                n_failed += 1
                wr.writerow([fmt(float(eta)), *([""] * (MAX_INJECTIONS + 1)), feas, f"failed: {exc}"])
                continue
            rec = fit.recommend(ds)
            counts = np.zeros(MAX_INJECTIONS + 1, dtype=int)
            for lev in rec:
                counts[int(cats[lev])] += 1
            wr.writerow([fmt(float(eta)), *counts.tolist(), feas, "ok"])
    if n_failed:
        log.warning("%d of %d eta values failed to fit", n_failed, len(etas))
    return OK


# --------------------------------------------------------------------- profiles


def _load_profiles(path, blip: Sequence[str]) -> list[tuple[str, dict[str, float]]]:
    d = read_json(path)
    items = d.get("profiles", d) if isinstance(d, Mapping) else d
    if isinstance(items, Mapping):
        items = [{"name": k, "covariates": v} for k, v in items.items()]
    out = []
    for i, item in enumerate(items):
        name = str(item.get("name", f"profile{i + 1}"))
        cov = {k: float(v) for k, v in dict(item.get("covariates", {})).items()}
        hx = next((cov[k] for k in _HX_NAMES if k in cov), None)
        if hx is not None and hx == 0:
            for k in _LOGRESP_NAMES:
                if k in cov or k in blip:
                    cov[k] = 0.0
        missing = [c for c in blip if c not in cov]
        if missing:
            raise CommandError(f"{path}: profile {name!r} lacks blip covariate(s) {missing}")
        out.append((name, cov))
    if not out:
        raise CommandError(f"{path}: no profiles")
    return out


def cmd_profiles(fit, profiles, stages, out, grid: str = "0:1:0.01", svg=None) -> int:
    """Blip contrasts per (profile, eta, injection count), re-estimated at each eta."""
    cfg = _load_fit_config(fit)
    blip = list(cfg.design.blip_terms)
    profs = _load_profiles(profiles, blip)
    etas = parse_grid(grid)
    _, rows = read_stage_csv(stages)
    covs = _stage_covariates(cfg)
    missing = [c for c in covs if c not in rows[0]]
    if missing:
        raise CommandError(f"{stages}: fit config uses columns not in the stage file: {missing}")
    cats = _stage_categories(rows)
    x = np.array([[1.0, *(cov[c] for c in blip)] for _, cov in profs])
    curves = []
    for eta in etas:
        ds = stage_panel(rows, float(eta), covs, cats)
        _, _, f = _fit(ds, cfg, compute_vcov=False)
        c = f.contrasts(x)
        best = optimal_levels(c)
        for i, (name, cov) in enumerate(profs):
            for lev, cat in enumerate(cats):
                val = 0.0 if lev == 0 else float(c[i, lev - 1])
                curves.append((name, float(eta), cat, val, cats[int(best[i])]))
    with open(out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["profile", "eta", "category", "contrast", "recommended", *blip])
        echo = {name: [fmt(cov[c]) for c in blip] for name, cov in profs}
        for name, eta, cat, val, rec in curves:
            wr.writerow([name, fmt(eta), cat, fmt(val), rec, *echo[name]])
    if svg is not None:
        _write_svg(curves, [p for p, _ in profs], cats, svg)
    return OK


def _write_svg(curves, names, cats, path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise CommandError("SVG output needs matplotlib (pip install 'artifact[plot]')") from None
    matplotlib.rcParams["svg.hashsalt"] = "gdwols"
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.2), squeeze=False, sharey=True)
    for ax, name in zip(axes[0], names):
        for cat in cats:
            pts = [(e, v) for p, e, c, v, _ in curves if p == name and c == cat]
            ax.plot([e for e, _ in pts], [v for _, v in pts], label=f"{cat} injections")
        ax.axhline(0.0, linestyle=":", color="black", linewidth=1)
        ax.set_title(name)
        ax.set_xlabel("eta")
    axes[0][0].set_ylabel("contrast")
    axes[0][-1].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------- mc


_STUDY_KEYS = {"scenario", "models", "kinds", "sizes", "replicates", "test_subjects", "seed", "workers",
               "confidence_level"}


def cmd_mc(study, out, seed: int | None = None, workers: int | None = None, replicates: int | None = None) -> int:
    """Monte Carlo study; writes estimates.csv, evaluation.csv and summary.md into ``out``."""
    d = read_json(study)
    unknown = sorted(set(d) - _STUDY_KEYS)
    if unknown:
        raise CommandError(f"{study}: unknown study keys {unknown}")
    try:
        config = SimConfig.from_dict(d.get("scenario", {}))
        result = run_monte_carlo(
            config,
            models=d.get("models", (1, 2, 3, 4)),
            kinds=d.get("kinds", ("ipt", "overlap")),
            sizes=d.get("sizes", (100, 1000)),
            replicates=int(replicates if replicates is not None else d.get("replicates", 200)),
            seed=seed if seed is not None else d.get("seed", config.seed),
            test_subjects=int(d.get("test_subjects", 2500)),
            workers=int(workers if workers is not None else d.get("workers", 1)),
            confidence_level=float(d.get("confidence_level", 0.95)),
        )
    except LinearLinkError as exc:
        raise CommandError(f"scenario infeasible: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid study: {exc}") from None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_estimates_csv(out / "estimates.csv")
    result.write_eval_csv(out / "evaluation.csv")
    result.write_summary_markdown(out / "summary.md")
    if result.failures:
        log.warning("%d fits failed; see summary.md", len(result.failures))
    return OK


# ---------------------------------------------------------------- check-myopic


def cmd_check_myopic(env, as_json: bool = False, stream=None) -> int:
    stream = stream or sys.stdout
    d = read_json(env)
    try:
        res = myopic_vs_dynamic_check(d)
    except (ValueError, KeyError, TypeError, AttributeError, StopIteration) as exc:
        raise CommandError(f"{env}: invalid environment: {exc}") from None
    if as_json:
        stream.write(json.dumps(res.to_dict(), indent=2) + "\n")
    else:
        stream.write(f"identical: {'true' if res.identical else 'false'}\n")
        stream.write(f"expected total outcome: myopic {res.myopic_value:.6g}, dynamic {res.dynamic_value:.6g}\n")
        for w in res.witnesses:
            stream.write(f"witness: stage {w.stage}, state {w.state!r}: myopic action {w.myopic_action!r} "
                         f"(value {w.myopic_value:.6g}) < dynamic action {w.dynamic_action!r} "
                         f"(value {w.dynamic_value:.6g})\n")
    return OK if res.identical else CHECK_FAILED


# ------------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdwols", description="G-dWOLS treatment rules for categorical treatments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="draw a simulated panel")
    s.add_argument("scenario", nargs="?", help="scenario JSON (SimConfig fields)")
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="truth sidecar path (default <out stem>.truth.json)")
    s.add_argument("--seed", type=int)
    s.add_argument("--link", choices=("logit", "paper_linear"))
    s.add_argument("--null", action="store_true", help="set every blip coefficient to zero")
    s.add_argument("--n", type=int, help="number of subjects")

    s = sub.add_parser("stages", parents=[common], help="build stage-level utilities from CD4 visits and injections")
    s.add_argument("cd4")
    s.add_argument("injections")
    s.add_argument("--out", required=True)
    s.add_argument("--eta", type=float)
    s.add_argument("--baseline", help="CSV of subject_id plus baseline covariates")
    s.add_argument("--nominal-length", type=float, default=90.0)
    s.add_argument("--tolerance", type=float, default=15.0)

    s = sub.add_parser("fit", parents=[common], help="fit G-dWOLS to a panel CSV")
    s.add_argument("panel")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--weights", choices=("ipt", "overlap"))
    s.add_argument("--seed", type=int, help="bootstrap seed (overrides the config)")

    s = sub.add_parser("sweep-eta", parents=[common], help="recommendation counts over a grid of utility weights")
    s.add_argument("stages")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--grid", default="0:1:0.05")
    s.add_argument("--weights", choices=("ipt", "overlap"))

    s = sub.add_parser("profiles", parents=[common], help="blip contrast curves for patient profiles")
    s.add_argument("fit", help="fit.json or fit-config JSON")
    s.add_argument("profiles")
    s.add_argument("--stages", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", default="0:1:0.01")
    s.add_argument("--svg")

    s = sub.add_parser("mc", parents=[common], help="run a Monte Carlo study")
    s.add_argument("study")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--replicates", type=int)

    s = sub.add_parser("check-myopic", parents=[common],
                       help="compare myopic and dynamic rules in a two-stage environment")
    s.add_argument("env")
    s.add_argument("--json", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.out, args.scenario, args.seed, args.link, args.null, args.n, args.truth)
        if args.command == "stages":
            return cmd_stages(args.cd4, args.injections, args.out, args.eta, args.baseline, args.nominal_length,
                              args.tolerance)
        if args.command == "fit":
            return cmd_fit(args.panel, args.config, args.out, args.weights, args.seed)
        if args.command == "sweep-eta":
            return cmd_sweep_eta(args.stages, args.config, args.out, args.grid, args.weights)
        if args.command == "profiles":
            return cmd_profiles(args.fit, args.profiles, args.stages, args.out, args.grid, args.svg)
        if args.command == "mc":
            return cmd_mc(args.study, args.out, args.seed, args.workers, args.replicates)
        if args.command == "check-myopic":
            return cmd_check_myopic(args.env, args.json)
    except (CommandError, InputError) as exc:
        print(f"gdwols {args.command}: error: {exc}", file=sys.stderr)
        return getattr(exc, "code", INPUT_ERROR)
    except OSError as exc:
        print(f"gdwols {args.command}: error: {exc}", file=sys.stderr)
        return INPUT_ERROR
    return INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
