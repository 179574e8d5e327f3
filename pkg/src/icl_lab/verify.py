"""End-to-end checks of the GD construction: oracle equivalence, softmax decay
in width, and the scaling of the effective learning rate."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .construction import (build_constructed_stack, layerwise_discrepancy, loglog_slope, measure_eta_eff,
                           random_regression_episode, softmax_discrepancy)

DEFAULT_D_GRID = (64, 128, 256, 512, 1024)
DEFAULT_L_GRID = (1, 2, 4, 8)
EQUIVALENCE_TOL = 1e-9
SOFTMAX_SLOPE = (-0.5, 0.15)
ETA_SLOPE = (-0.5, 0.1)


@dataclass
class Check:
    name: str
    passed: bool | None  # None: skipped
    value: float | None
    threshold: str
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[Check] = field(default_factory=list)
    eta_rows: list[dict] = field(default_factory=list)
    softmax_rows: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def checks_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "status", "value", "threshold", "detail"])
        for c in self.checks:
            status = "skipped" if c.passed is None else ("pass" if c.passed else "FAIL")
            w.writerow([c.name, status, "" if c.value is None else repr(c.value), c.threshold, c.detail])
        return buf.getvalue()

    def eta_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["L", "d", "eta_eff", "n_episodes", "eta_eff_total", "n_flagged"])
        for r in self.eta_rows:
            w.writerow([r["L"], r["d"], repr(r["eta_eff"]), r["n_episodes"], repr(r["eta_eff_total"]),
                        r["n_flagged"]])
        return buf.getvalue()

    def write(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "construction_checks.csv").write_text(self.checks_csv())
        (out / "eta_eff.csv").write_text(self.eta_csv())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["d", "relative_discrepancy"])
        for r in self.softmax_rows:
            w.writerow([r["d"], repr(r["relative_discrepancy"])])
        (out / "softmax_discrepancy.csv").write_text(buf.getvalue())
        doc = {"ok": self.ok, "checks": [c.__dict__ for c in self.checks]}
        (out / "construction_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _corrupt(stack):
    """Fault injection: let the value projection also read x_1."""
    stack.w_v[0, 0] = 1.0
    return stack


def check_equivalence(L_grid, d_grid, n_episodes: int = 100, seed: int = 0, corrupt_wv: bool = False) -> Check:
    """Linear-attention stack vs the GD oracle, layer by layer, on random episodes
    with k <= 16 and d_x <= 8, for every (L, d) cell."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    where = ""
    for i in range(n_episodes):
        k = int(rng.integers(1, 17))
        d_x = int(rng.integers(1, 9))
        ep = random_regression_episode(rng, k, d_x, noise_std=0.1)
        L = L_grid[i % len(L_grid)]
        d = max(d_grid[i % len(d_grid)], d_x + 1)
        stack = build_constructed_stack(L, d_x, 1, "linear", d)
        if corrupt_wv:
            _corrupt(stack)
        gap = max(layerwise_discrepancy(stack, ep), default=0.0)
        if not gap <= worst:
            worst, where = gap, f"episode {i} (k={k}, d_x={d_x}, L={L}, d={d})"
    return Check("linear_equivalence", bool(worst < EQUIVALENCE_TOL), float(worst), f"< {EQUIVALENCE_TOL:g}",
                 f"worst layer-wise |dw - dw_oracle| at {where}" if where else "")


def check_softmax_decay(d_grid, n_episodes: int = 4, d_x: int = 4, k: int = 8, seed: int = 0,
                        corrupt_wv: bool = False) -> tuple[Check, list[dict]]:
    """Single-layer relative gap between softmax and exact GD across widths,
    averaged over episodes; log-log slope against d."""
    d_grid = sorted(d_grid)
    rng = np.random.default_rng(seed)
    eps = [random_regression_episode(rng, k, d_x) for _ in range(n_episodes)]
    if corrupt_wv:
        gaps = np.mean([[max(layerwise_discrepancy(_corrupt(build_constructed_stack(1, d_x, 1, "softmax", d)), ep,
                                                   relative=True)) for d in d_grid] for ep in eps], axis=0)
    else:
        gaps = np.mean([softmax_discrepancy(ep, d_grid) for ep in eps], axis=0)
    rows = [{"d": d, "relative_discrepancy": float(g)} for d, g in zip(d_grid, gaps)]
    if len(d_grid) < 2:
        return Check("softmax_decay_slope", None, None, "needs >= 2 widths"), rows
    slope = loglog_slope(d_grid, gaps)
    target, tol = SOFTMAX_SLOPE
    return Check("softmax_decay_slope", bool(abs(slope - target) <= tol), slope, f"{target} +/- {tol}",
                 f"widths {d_grid}"), rows


def check_eta(L_grid, d_grid, mode: str = "softmax", n_episodes: int = 8, seed: int = 0,
              corrupt_wv: bool = False) -> tuple[Check, list[dict]]:
    cells = measure_eta_eff(L_grid, d_grid, mode, n_episodes, seed=seed,
                            stack_hook=_corrupt if corrupt_wv else None)
    rows = [c.__dict__.copy() for c in cells]
    good = [c for c in cells if math.isfinite(c.eta_eff) and c.eta_eff > 0]
    if len({c.L * c.d for c in good}) < 2:
        return Check("eta_eff_slope", None, None, "needs >= 2 distinct L*d"), rows
    slope = loglog_slope([c.L * c.d for c in good], [c.eta_eff for c in good])
    target, tol = ETA_SLOPE
    return Check("eta_eff_slope", bool(abs(slope - target) <= tol), slope, f"{target} +/- {tol}",
                 f"{mode} mode, {len(good)} cells"), rows


def verify_construction(d_grid=DEFAULT_D_GRID, L_grid=DEFAULT_L_GRID, mode: str = "softmax", seed: int = 0,
                        corrupt_wv: bool = False, n_episodes: int = 100) -> VerifyReport:
    """Linear equivalence always; softmax decay only in softmax mode; eta_eff in the given mode."""
    d_grid, L_grid = list(d_grid), list(L_grid)
    if not d_grid or not L_grid or min(d_grid) < 2 or min(L_grid) < 1:
        raise ValueError("grids must be nonempty with d >= 2 and L >= 1")
    report = VerifyReport()
    report.checks.append(check_equivalence(L_grid, d_grid, n_episodes, seed, corrupt_wv))
    if mode == "softmax":
        check, rows = check_softmax_decay(d_grid, seed=seed, corrupt_wv=corrupt_wv)
        report.checks.append(check)
        report.softmax_rows = rows
    check, rows = check_eta(L_grid, d_grid, mode, seed=seed, corrupt_wv=corrupt_wv)
    report.checks.append(check)
    report.eta_rows = rows
    return report

