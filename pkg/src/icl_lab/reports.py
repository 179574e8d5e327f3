"""Fits over a sweep's RunRecords, reference-layout tables, and the static report bundle."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import analysis as A
from .sweep import Manifest
from .tasks import TaskSpec, random_baseline_error
from .training import RunRecord

FITS = ("alpha", "gamma", "emergence", "allocation")
TASK_NAMES = {"linear": "Linear Regression", "sparse_linear": "Sparse Linear", "decision_tree": "Decision Tree"}


class InsufficientData(A.FitError):
    """A fit lacks grid cells; the message names what is missing."""


# ---------------------------------------------------------------------------
# helpers


def _num(v):
    """Deterministic text for CSV cells."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(r.get(h)) for h in header])
    return buf.getvalue()


def _spec(rec: RunRecord) -> TaskSpec:
    return TaskSpec.from_dict(rec.task_spec)


def _by_task(records) -> dict[str, list[RunRecord]]:
    out = defaultdict(list)
    for r in records:
        out[_spec(r).label].append(r)
    return dict(sorted(out.items()))


def _nearest_k(rec: RunRecord, k: int) -> int:
    ks = sorted(rec.eval_table)
    if not ks:
        raise InsufficientData("run has no evaluation table")
    return min(ks, key=lambda x: (abs(x - k), x))


def _arch(rec: RunRecord) -> tuple[int, int]:
    return rec.model_config["depth"], rec.model_config["width"]


def _steps(rec: RunRecord) -> int:
    return rec.train_config["total_steps"]


def _seed_mean(recs, k) -> float:
    return float(np.mean([r.error_at(k) for r in recs]))


# ---------------------------------------------------------------------------
# individual fits


def fit_alpha(records, k: int = 20, n_bootstrap: int = 2000) -> dict:
    """Error at context size ``k`` against parameter count N, per task, with D held
    at the largest trained budget.  Fits against D (pairs and episodes) are
    added when at least four budgets exist at the largest N."""
    out = {}
    for label, recs in _by_task(records).items():
        h = _spec(recs[0]).hierarchy_depth
        d_max = max(_steps(r) for r in recs)
        at_d = [r for r in recs if _steps(r) == d_max]
        cells = defaultdict(list)
        for r in at_d:
            cells[r.n_params].append(r)
        if len(cells) < 4:
            have = sorted({_arch(r) for r in at_d})
            raise InsufficientData(
                f"alpha fit for task {label} needs >= 4 distinct model sizes at steps={d_max}; "
                f"have {len(cells)} ((depth, width) cells {have}); add depth/width grid cells")
        kk = _nearest_k(at_d[0], k)
        pts = [(float(N), _seed_mean(rs, kk)) for N, rs in sorted(cells.items())]
        fit = A.fit_power_law(pts, n_bootstrap=n_bootstrap)
        entry = {"task": label, "family": _spec(recs[0]).family, "h": h, "k": kk, "steps": d_max,
                 "points": pts, "fit": fit.to_dict(), "alpha_theory": A.predict_alpha_theory(h)}
        n_top = max(r.n_params for r in recs)
        top = [r for r in recs if r.n_params == n_top]
        by_d = defaultdict(list)
        for r in top:
            by_d[_steps(r)].append(r)
        if len(by_d) >= 4:
            for unit in ("pairs", "episodes"):
                dpts = [(float(np.mean([r.demonstrations[unit] for r in rs])), _seed_mean(rs, kk))
                        for _, rs in sorted(by_d.items())]
                entry[f"fit_D_{unit}"] = A.fit_power_law(dpts, n_bootstrap=n_bootstrap).to_dict()
        else:
            entry["fit_D"] = f"skipped: {len(by_d)} step budgets at N={n_top} (need >= 4)"
        out[label] = entry
    return out


def table1_rows(alpha: dict | None) -> list[dict]:
    alpha = alpha or {}
    measured = {(TASK_NAMES[v["family"]], v["h"]): v for v in alpha.values()}
    rows = []
    for row in A.table1_discrepancies():
        m = measured.pop((row["task"], row["h"]), None)
        rows.append({**row, **_alpha_measure(m)})
    for (task, h), m in sorted(measured.items()):
        formula = A.predict_alpha_theory(h)
        rows.append({"task": task, "h": h, "alpha_printed": None, "alpha_formula": formula,
                     "alpha_measured_reported": None, "ci_reported": None, "mismatch": None,
                     **_alpha_measure(m)})
    return rows


def _alpha_measure(m) -> dict:
    if m is None:
        return {}
    f = m["fit"]
    return {"alpha_measured": f["exponent"], "ci_low": f["ci_low"], "ci_high": f["ci_high"],
            "r_squared": f["r_squared"], "n_points": f["n_points"]}


TABLE1_HEADER = ["task", "h", "alpha_formula", "alpha_printed", "mismatch", "alpha_measured", "ci_low",
                 "ci_high", "r_squared", "n_points", "alpha_measured_reported", "ci_reported"]


def fit_gamma(records, k_min: int = 2, n_bootstrap: int = 2000, floor: bool = False) -> dict:
    """Context exponent per task from the seed-averaged eval table of the
    largest trained model (largest N, then largest step budget)."""
    out = {}
    for label, recs in _by_task(records).items():
        top_key = max((r.n_params, _steps(r)) for r in recs)
        top = [r for r in recs if (r.n_params, _steps(r)) == top_key]
        ks = sorted(k for k in top[0].eval_table if k >= max(k_min, 1))
        if len(ks) < 4:
            raise InsufficientData(
                f"gamma fit for task {label} needs >= 4 context sizes >= {max(k_min, 1)} in the eval grid; "
                f"have {ks}; add k values to eval.k_grid")
        table = {k: _seed_mean(top, k) for k in ks}
        fit = A.fit_context_exponent(table, floor=floor, n_bootstrap=n_bootstrap)
        out[label] = {"task": label, "h": _spec(top[0]).hierarchy_depth, "n_params": top_key[0],
                      "steps": top_key[1], "n_seeds": len(top), "k": ks,
                      "errors": [table[k] for k in ks], "fit": fit.to_dict()}
    return out


def table4_rows(gamma: dict | None) -> list[dict]:
    gamma = gamma or {}
    rows = []
    fam_rows = {"Linear Regression": "linear", "Sparse Linear": "sparse_linear", "Decision Trees": "decision_tree"}
    for name, g, ci in A.TABLE4:
        fam = fam_rows[name]
        hits = [v for lbl, v in sorted(gamma.items()) if lbl.startswith(fam)]
        if not hits:
            rows.append({"task": name, "gamma_reported": g, "ci_reported": ci})
        for v in hits:
            f = v["fit"]
            rows.append({"task": name, "label": v["task"], "gamma_reported": g, "ci_reported": ci,
                         "gamma_measured": f["exponent"], "ci_low": f["ci_low"], "ci_high": f["ci_high"],
                         "r_squared": f["r_squared"], "n_points": f["n_points"]})
    return rows


TABLE4_HEADER = ["task", "label", "gamma_reported", "ci_reported", "gamma_measured", "ci_low", "ci_high",
                 "r_squared", "n_points"]


def fit_emergence(records, k: int = 10, alpha_level: float = 0.01, baseline_samples: int = 20_000,
                  n_bootstrap: int = 2000) -> dict:
    """Scan model sizes for the first one that beats the random baseline, and
    fit the logistic P(ICL) curve when at least six sizes exist.

    P(ICL) at N is the fraction of seeds whose task errors beat the baseline at
    ``alpha_level``."""
    out = {}
    for label, recs in _by_task(records).items():
        spec = _spec(recs[0])
        d_max = max(_steps(r) for r in recs)
        at_d = [r for r in recs if _steps(r) == d_max]
        cells = defaultdict(list)
        for r in at_d:
            cells[r.n_params].append(r)
        if len(cells) < 2:
            raise InsufficientData(
                f"emergence scan for task {label} needs >= 2 model sizes at steps={d_max}; have "
                f"{sorted({_arch(r) for r in at_d})}; add depth/width grid cells")
        kk = _nearest_k(at_d[0], k)
        base, base_se = random_baseline_error(spec, baseline_samples, seed=0)
        errors = {N: np.concatenate([r.eval_table[kk]["task_errors"] for r in rs]) for N, rs in cells.items()}
        det = A.detect_emergence(errors, base, base_se, alpha_level, n_bootstrap)
        prob = {}
        for N, rs in sorted(cells.items()):
            hits = [A.emergence_pvalue(r.eval_table[kk]["task_errors"], base, base_se, n_bootstrap, seed=i)
                    < alpha_level for i, r in enumerate(rs)]
            prob[N] = float(np.mean(hits))
        entry = {"task": label, "h": spec.hierarchy_depth, "k": kk, "steps": d_max, "baseline": base,
                 "baseline_stderr": base_se, "detection": det.to_dict(),
                 "p_icl": [[float(N), p] for N, p in sorted(prob.items())],
                 "mean_error": [[float(N), float(np.mean(e))] for N, e in sorted(errors.items())]}
        if len(prob) >= 6:
            try:
                entry["sigmoid"] = A.fit_sigmoid_emergence(sorted(prob.items())).to_dict()
            except A.FitError as exc:
                entry["sigmoid"] = f"not fitted: {exc}"
        else:
            entry["sigmoid"] = f"not fitted: {len(prob)} model sizes (need >= 6)"
        if spec.hierarchy_depth >= 1:
            entry["N_c_theory"] = A.predict_critical_scale(kk, spec.hierarchy_depth)
        else:
            entry["N_c_theory"] = "undefined at h=0"
        out[label] = entry
    return out


def table2_rows(emergence: dict | None) -> list[dict]:
    emergence = emergence or {}
    rows = []
    for name, h, nc in A.TABLE2:
        fam = "linear" if h == 0 else f"decision_tree_h{h}"
        m = emergence.get(fam)
        theory = A.predict_critical_scale(10, h) if h >= 1 else None
        row = {"task": name, "h": h, "N_c_reported": nc, "N_c_theory_k10": theory,
               "theory_over_reported": theory / nc if theory else None}
        if m:
            row["N_c_detected"] = m["detection"]["N_c"]
            sig = m["sigmoid"]
            if isinstance(sig, dict):
                row["N_c_sigmoid"], row["kappa_per_decade"] = sig["N_c"], sig["kappa"]
        rows.append(row)
    return rows


TABLE2_HEADER = ["task", "h", "N_c_reported", "N_c_theory_k10", "theory_over_reported", "N_c_detected",
                 "N_c_sigmoid", "kappa_per_decade"]


def fit_allocation(records, k: int = 20, n_bootstrap: int = 2000, budget: str = "params") -> dict:
    """Depth/width exponents per task from seed-averaged errors at the largest step
    budget.  ``budget`` picks the budget variable: parameter count or L*d."""
    out = {}
    for label, recs in _by_task(records).items():
        d_max = max(_steps(r) for r in recs)
        at_d = [r for r in recs if _steps(r) == d_max]
        cells = defaultdict(list)
        for r in at_d:
            cells[_arch(r)].append(r)
        if len(cells) < 4:
            raise InsufficientData(
                f"allocation fit for task {label} needs >= 4 (depth, width) cells at steps={d_max}; "
                f"have {sorted(cells)}")
        kk = _nearest_k(at_d[0], k)
        rows = []
        for (L, d), rs in sorted(cells.items()):
            N = rs[0].n_params if budget == "params" else L * d
            se = float(np.sqrt(np.mean([r.eval_table[kk]["stderr"] ** 2 for r in rs]) / len(rs)))
            rows.append({"N": N, "L": L, "d": d, "error": _seed_mean(rs, kk), "n_seeds": len(rs), "stderr": se})
        if any(r["L"] == 0 for r in rows):
            raise InsufficientData(f"allocation fit for task {label}: depth-0 cells cannot enter a log-log fit")
        fit = A.fit_depth_width([(r["N"], r["L"], r["d"], r["error"]) for r in rows], n_bootstrap=n_bootstrap)
        out[label] = {"task": label, "k": kk, "steps": d_max, "budget": budget, "cells": rows,
                      "fit": fit.to_dict()}
    return out


def table3_rows(allocation: dict | None) -> list[dict]:
    rows = [{"source": "reported", "L": L, "d": d, "N": L * d, "error": e} for L, d, e in A.TABLE3]
    for label, v in sorted((allocation or {}).items()):
        for c in v["cells"]:
            rows.append({"source": f"measured:{label}", "L": c["L"], "d": c["d"], "N": c["N"], "error": c["error"],
                         "stderr": c["stderr"], "n_seeds": c["n_seeds"]})
    return rows


TABLE3_HEADER = ["source", "L", "d", "N", "error", "stderr", "n_seeds"]

FIT_FUNCS = {"alpha": fit_alpha, "gamma": fit_gamma, "emergence": fit_emergence, "allocation": fit_allocation}
TABLES = {
    "alpha": ("table1_alpha.csv", TABLE1_HEADER, table1_rows),
    "emergence": ("table2_emergence.csv", TABLE2_HEADER, table2_rows),
    "allocation": ("table3_depth_width.csv", TABLE3_HEADER, table3_rows),
    "gamma": ("table4_context.csv", TABLE4_HEADER, table4_rows),
}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def run_fit(manifest_dir, which: str, out=None, **kwargs) -> dict:
    """Run one fit over a manifest and write ``fits/<which>.json`` plus its table CSV."""
    if which not in FITS:
        raise ValueError(f"unknown fit {which!r}; choose from {FITS}")
    manifest = Manifest.load(manifest_dir)
    records = manifest.records()
    if not records:
        raise InsufficientData(f"manifest {manifest.path} has no completed runs")
    result = FIT_FUNCS[which](records, **kwargs)
    out = Path(out) if out is not None else manifest.root
    (out / "fits").mkdir(parents=True, exist_ok=True)
    (out / "fits" / f"{which}.json").write_text(_dumps(result))
    name, header, rows = TABLES[which]
    (out / "fits" / name).write_text(_csv(header, rows(result)))
    return result


# ---------------------------------------------------------------------------
# report bundle


def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams.update({"svg.hashsalt": "icl-lab", "svg.fonttype": "none",
                                "path.simplify": False, "figure.figsize": (5.0, 3.6)})
    return plt


def _save(plt, fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _plot_error_curves(plt, records, path: Path) -> None:
    fig, ax = plt.subplots()
    groups = defaultdict(list)
    for r in records:
        groups[(_spec(r).label, *_arch(r), _steps(r))].append(r)
    for (label, L, d, s), rs in sorted(groups.items()):
        ks = [k for k in sorted(rs[0].eval_table) if k > 0]
        ax.plot(ks, [_seed_mean(rs, k) for k in ks], marker="o", ms=3, label=f"{label} L={L} d={d} T={s}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("context size k")
    ax.set_ylabel("ICL error")
    if len(groups) <= 12:
        ax.legend(fontsize=6)
    _save(plt, fig, path)


def _plot_power(plt, pts, fit: dict, xlabel: str, title: str, path: Path) -> None:
    x, y = np.array(pts, dtype=float).T
    fig, ax = plt.subplots()
    ax.loglog(x, y, "o", label="measured")
    grid = np.geomspace(x.min(), x.max(), 50)
    ax.loglog(grid, fit["amplitude"] * grid ** (-fit["exponent"]),
              label=f"fit exponent {fit['exponent']:.3f} [{fit['ci_low']:.3f}, {fit['ci_high']:.3f}]")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("ICL error")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    _save(plt, fig, path)


def _plot_sigmoid(plt, entry: dict, path: Path) -> None:
    pts = np.array(entry["p_icl"], dtype=float)
    fig, ax = plt.subplots()
    ax.semilogx(pts[:, 0], pts[:, 1], "o", label="P(ICL) over seeds")
    if isinstance(entry["sigmoid"], dict):
        fit = A.PhaseFit(**entry["sigmoid"])
        grid = np.geomspace(pts[:, 0].min(), pts[:, 0].max(), 100)
        ax.semilogx(grid, fit.probability(grid), label=f"logistic N_c={fit.N_c:.3g} kappa={fit.kappa:.3g}")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("parameters N")
    ax.set_ylabel("P(ICL)")
    ax.set_title(entry["task"], fontsize=9)
    ax.legend(fontsize=7)
    _save(plt, fig, path)


def _plot_allocation(plt, entry: dict, path: Path) -> None:
    fig, ax = plt.subplots()
    cells = entry["cells"]
    ax.loglog([c["L"] for c in cells], [c["error"] for c in cells], "o")
    for c in cells:
        ax.annotate(f"d={c['d']}", (c["L"], c["error"]), fontsize=6)
    ax.set_xlabel("depth L")
    ax.set_ylabel("ICL error")
    f = entry["fit"]
    ax.set_title(f"{entry['task']}: {f['identifiable']} = {f['depth_exponent']:.3f}", fontsize=8)
    _save(plt, fig, path)


def build_report(manifest_dir, out=None, n_bootstrap: int = 2000) -> dict:
    """Write the static bundle: runs.csv, fit JSON/CSVs and SVG plots.

    Fits that lack data are listed in ``skipped.txt`` rather than failing the
    report.  Returns {fit name: status}."""
    manifest_dir = Path(manifest_dir)
    out = Path(out) if out is not None else manifest_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    try:
        manifest = Manifest.load(manifest_dir)
        records = manifest.records()
    except FileNotFoundError:
        manifest, records = None, []
    if not records:
        (out / "NOTICE").write_text("No completed runs in the manifest; nothing to report.\n")
        (out / "runs.csv").write_text(_csv(RUNS_HEADER, []))
        return {}
    (out / "runs.csv").write_text(_csv(RUNS_HEADER, _run_rows(manifest)))
    plt = _mpl()
    _plot_error_curves(plt, records, out / "error_vs_k.svg")
    status, skipped = {}, []
    for which in FITS:
        try:
            result = FIT_FUNCS[which](records, n_bootstrap=n_bootstrap)
        except A.FitError as exc:
            status[which] = "skipped"
            skipped.append(f"{which}: {exc}")
            continue
        status[which] = "ok"
        (out / f"fit_{which}.json").write_text(_dumps(result))
        name, header, rows = TABLES[which]
        (out / name).write_text(_csv(header, rows(result)))
        for label, entry in sorted(result.items()):
            if which == "alpha":
                _plot_power(plt, entry["points"], entry["fit"], "parameters N",
                            f"{label}: error vs N (k={entry['k']})", out / f"alpha_{label}.svg")
            elif which == "gamma":
                _plot_power(plt, list(zip(entry["k"], entry["errors"])), entry["fit"], "context size k",
                            f"{label}: error vs k", out / f"gamma_{label}.svg")
            elif which == "emergence":
                _plot_sigmoid(plt, entry, out / f"emergence_{label}.svg")
            else:
                _plot_allocation(plt, entry, out / f"allocation_{label}.svg")
    (out / "skipped.txt").write_text("".join(s + "\n" for s in skipped))
    return status


RUNS_HEADER = ["run_id", "status", "task", "depth", "width", "steps", "seed", "n_params", "k", "error", "stderr"]


def _run_rows(manifest: Manifest) -> list[dict]:
    rows = []
    for run_id, entry in sorted(manifest.runs.items()):
        keys = ("status", "task", "depth", "width", "steps", "seed")
        base = {"run_id": run_id, **{k: entry.get(k) for k in keys}}
        if entry["status"] != "done":
            rows.append(base)
            continue
        rec = RunRecord.from_json(manifest.record_path(run_id).read_text())
        for k, v in sorted(rec.eval_table.items()):
            rows.append({**base, "n_params": rec.n_params, "k": k, "error": v["mean"], "stderr": v["stderr"]})
    return rows
