"""Command-line entry point: ``icl-lab <subcommand>``.

Exit codes: 0 success, 1 validation failure (bad flags, spec or manifest),
2 threshold or fit failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis
from .reports import FITS, build_report, run_fit
from .sweep import SpecError, default_out_root, load_sweep, run_sweep
from .tasks import FAMILIES, TaskSpec, TaskSpecError, sample_episode, sample_task, write_episodes_jsonl
from .training import derive_seed
from .verify import DEFAULT_D_GRID, DEFAULT_L_GRID, verify_construction

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("grid must be nonempty")
    return values


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else default_out_root() / default


def cmd_verify_construction(args) -> int:
    report = verify_construction(args.d_grid, args.L_grid, args.mode, args.seed, corrupt_wv=args.corrupt_wv)
    out = _out(args, "construction")
    report.write(out)
    sys.stdout.write(report.checks_csv())
    print(f"report written to {out}")
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_sweep(args) -> int:
    spec = load_sweep(args.spec, seeds=None if args.seed is None else [args.seed])
    out = Path(args.out) if args.out else Path(spec.raw.get("out", default_out_root() / spec.name))
    manifest = run_sweep(spec, out, jobs=args.jobs, force=args.force, max_runs=args.max_runs)
    failed = sorted(k for k, v in manifest.runs.items() if v["status"] == "failed")
    for run_id in failed:
        print(f"FAILED {run_id}: {manifest.runs[run_id].get('error', '')}", file=sys.stderr)
    print(f"manifest: {manifest.path}")
    return EXIT_FAILED if failed else EXIT_OK


def _manifest_dir(args) -> Path:
    if args.manifest:
        p = Path(args.manifest)
        return p.parent if p.suffix == ".json" else p
    if args.out:
        return Path(args.out)
    raise SpecError("give --manifest (a sweep directory or its manifest.json)")


def cmd_fit(args) -> int:
    src = _manifest_dir(args)
    kwargs = {"n_bootstrap": args.n_bootstrap}
    if args.k is not None:
        if args.which == "gamma":
            kwargs["k_min"] = args.k
        else:
            kwargs["k"] = args.k
    result = run_fit(src, args.which, out=args.out, **kwargs)
    for label, entry in sorted(result.items()):
        fit = entry.get("fit") or entry.get("detection")
        print(f"{args.which} {label}: {fit}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = _manifest_dir(args)
    out = Path(args.out) if args.out and args.manifest else src / "report"
    status = build_report(src, out, n_bootstrap=args.n_bootstrap)
    print(f"report bundle in {out}: {status or 'empty (see NOTICE)'}")
    return EXIT_OK


def cmd_gen_episodes(args) -> int:
    kw = {"d_x": args.d_x, "noise_std": args.noise_std}
    if args.family == "sparse_linear":
        kw.update(hierarchy_depth=1, sparsity=args.sparsity)
    elif args.family == "decision_tree":
        kw.update(hierarchy_depth=args.hierarchy_depth)
    spec = TaskSpec(args.family, **kw)
    episodes = (sample_episode(sample_task(spec, derive_seed(args.seed, "gen-task", i)), args.k,
                               derive_seed(args.seed, "gen-episode", i)) for i in range(args.n))
    out = _out(args, "episodes.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_episodes_jsonl(out, episodes)
    print(f"wrote {n} episodes ({spec.label}, k={args.k}) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icl-lab", description="Desk-scale in-context learning laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify-construction", help="check the GD construction against its oracle")
    v.add_argument("--d-grid", type=_int_list, default=list(DEFAULT_D_GRID), help="widths, e.g. 64,128,256")
    v.add_argument("--L-grid", type=_int_list, default=list(DEFAULT_L_GRID), help="depths, e.g. 1,2,4,8")
    v.add_argument("--mode", choices=("softmax", "linear"), default="softmax")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.add_argument("--corrupt-wv", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify_construction)

    s = sub.add_parser("sweep", help="run (or resume) a sweep spec")
    s.add_argument("--spec", required=True, help="YAML sweep spec")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default: spec's jobs, else 1)")
    s.add_argument("--force", action="store_true", help="rerun completed runs / accept a changed spec")
    s.add_argument("--seed", type=int, default=None, help="replace the spec's seed list with this one seed")
    s.add_argument("--max-runs", type=int, default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("fit", help="fit a scaling law over a sweep's runs")
    f.add_argument("which", choices=FITS)
    f.add_argument("--manifest", help="sweep directory or manifest.json")
    f.add_argument("--out", help="where fits/ is written (default: the sweep directory)")
    f.add_argument("--k", type=int, default=None, help="context size (gamma: smallest k used)")
    f.add_argument("--n-bootstrap", type=int, default=2000)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("report", help="write CSVs and SVG plots for a sweep")
    r.add_argument("--manifest", help="sweep directory or manifest.json")
    r.add_argument("--out", help="bundle directory (default: <sweep>/report)")
    r.add_argument("--n-bootstrap", type=int, default=2000)
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("gen-episodes", help="write sampled episodes as JSON Lines")
    g.add_argument("--family", choices=FAMILIES, default="linear")
    g.add_argument("--d-x", type=int, default=20)
    g.add_argument("--k", type=int, default=20)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--sparsity", type=int, default=3)
    g.add_argument("--hierarchy-depth", type=int, default=2)
    g.add_argument("--noise-std", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_episodes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, TaskSpecError, FileNotFoundError, ValueError) as exc:
        if isinstance(exc, analysis.FitError):
            print(f"fit failed: {exc}", file=sys.stderr)
            return EXIT_FAILED
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
