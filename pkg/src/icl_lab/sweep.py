"""Sweep specs, the run manifest, and resumable (optionally parallel) execution."""
from __future__ import annotations

import hashlib
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .model import ModelConfig
from .tasks import TaskSpec
from .training import EvalConfig, RunRecord, TrainConfig, train_run

SCHEMA_VERSION = 1
OUT_ENV = "ICL_LAB_OUT"

_int_list = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}
_task_schema = {
    "type": "object",
    "properties": {
        "family": {"enum": ["linear", "sparse_linear", "decision_tree"]},
        "d_x": {"type": "integer", "minimum": 1},
        "hierarchy_depth": {"type": "integer", "minimum": 0},
        "sparsity": {"type": "integer", "minimum": 1},
        "noise_std": {"type": "number", "minimum": 0},
        "smoothness_beta": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["family"],
    "additionalProperties": False,
}

SWEEP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "icl_lab sweep spec",
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "tasks": {"type": "array", "items": _task_schema, "minItems": 1},
        "model": {
            "type": "object",
            "properties": {
                "depth": _int_list,
                "width": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "pairs": {"type": "array", "minItems": 1,
                          "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                    "minItems": 2, "maxItems": 3}},
                "heads": {"type": "integer", "minimum": 1},
                "k_max": {"type": "integer", "minimum": 1},
                "ffn_multiplier": {"type": "integer", "minimum": 1},
                "positional": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "steps": _int_list,
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "warmup_steps": {"type": "integer", "minimum": 0},
                "floor_lr": {"type": "number", "minimum": 0},
                "k_min": {"type": "integer", "minimum": 0},
                "log_every": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {
                "k_grid": _int_list,
                "n_tasks": {"type": "integer", "minimum": 1},
                "n_queries": {"type": "integer", "minimum": 1},
                "n_bootstrap": {"type": "integer", "minimum": 10},
                "seed": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "seeds": _int_list,
        "jobs": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
    },
    "required": ["schema_version", "tasks", "model", "seeds"],
    "additionalProperties": False,
}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    task: TaskSpec
    train: TrainConfig
    eval: EvalConfig

    def canonical(self) -> dict:
        return {"model": self.model.to_dict(), "task": self.task.to_dict(),
                "train": self.train.to_dict(), "eval": self.eval.to_dict()}

    @property
    def run_id(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return "run-" + hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SweepSpec:
    raw: dict
    runs: list[RunConfig] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.raw.get("name", "sweep")

    @property
    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    @property
    def jobs(self) -> int:
        return int(self.raw.get("jobs", 1))

    def grid_size(self) -> dict:
        m = self.raw["model"]
        shape = {
            "tasks": len(self.raw["tasks"]),
            "architectures": len(m["pairs"]) if "pairs" in m else len(m["depth"]) * len(m["width"]),
            "steps": len(self.raw.get("train", {}).get("steps", [1])),
            "seeds": len(self.raw["seeds"]),
        }
        shape["total"] = shape["tasks"] * shape["architectures"] * shape["steps"] * shape["seeds"]
        return shape


def _task_from(d: dict) -> TaskSpec:
    d = dict(d)
    family = d.pop("family")
    defaults = {"linear": 0, "sparse_linear": 1}
    h = d.pop("hierarchy_depth", defaults.get(family, 2))
    return TaskSpec(family=family, hierarchy_depth=h, **d)


def parse_sweep(raw: dict) -> SweepSpec:
    try:
        jsonschema.validate(raw, SWEEP_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SpecError(f"sweep spec invalid at {path}: {exc.message}") from None
    m = raw["model"]
    if ("pairs" in m) == ("depth" in m or "width" in m):
        raise SpecError("model needs either 'pairs' or both 'depth' and 'width' grids")
    if "pairs" in m:
        archs = [tuple(p[:2]) + ((p[2],) if len(p) > 2 else (m.get("heads", 1),)) for p in m["pairs"]]
    else:
        archs = [(L, d, m.get("heads", 1)) for L, d in itertools.product(m["depth"], m["width"])]
    tr = dict(raw.get("train", {}))
    steps = tr.pop("steps", [TrainConfig.total_steps])
    ev = dict(raw.get("eval", {}))
    if "k_grid" in ev:
        ev["k_grid"] = tuple(sorted(set(ev["k_grid"])))
    eval_cfg = EvalConfig(**ev)
    runs = []
    try:
        for task_raw in raw["tasks"]:
            task = _task_from(task_raw)
            for (L, d, heads), n_steps, seed in itertools.product(archs, steps, raw["seeds"]):
                mc = ModelConfig(depth=L, width=d, heads=heads, d_x=task.d_x, d_y=task.d_y,
                                 k_max=m.get("k_max", 40), ffn_multiplier=m.get("ffn_multiplier", 4),
                                 seed=seed, positional=m.get("positional", True)).validate()
                tc = TrainConfig(total_steps=n_steps, seed=seed, **tr).validate()
                if eval_cfg.k_grid and max(eval_cfg.k_grid) > mc.k_max:
                    raise SpecError(f"eval k_grid reaches {max(eval_cfg.k_grid)} > k_max={mc.k_max}")
                runs.append(RunConfig(mc, task, tc, eval_cfg))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(str(exc)) from None
    ids = [r.run_id for r in runs]
    if len(set(ids)) != len(ids):
        raise SpecError("sweep contains duplicate run configurations")
    return SweepSpec(raw, runs)


def load_sweep(path, seeds=None) -> SweepSpec:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SpecError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise SpecError(f"{path}: expected a mapping at top level")
    if seeds is not None:
        raw["seeds"] = list(seeds)
    return parse_sweep(raw)


# ---------------------------------------------------------------------------
# manifest


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Manifest:
    """Run ledger for one sweep directory.

    Entries are keyed by run id and never removed; statuses only move from
    "pending" to "done", "diverged" or "failed".  Serialisation is sorted, so
    the file depends only on run outcomes, never on execution order.
    """

    FILENAME = "manifest.json"

    def __init__(self, root: Path, spec_hash: str, name: str, runs: dict | None = None):
        self.root = Path(root)
        self.spec_hash = spec_hash
        self.name = name
        self.runs: dict[str, dict] = runs or {}

    @property
    def path(self) -> Path:
        return self.root / self.FILENAME

    @classmethod
    def load(cls, root) -> "Manifest":
        root = Path(root)
        p = root / cls.FILENAME if root.is_dir() or not root.suffix else root
        if p.suffix == ".json" and p.name != cls.FILENAME:
            root = p.parent
        doc = json.loads(p.read_text())
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise SpecError(f"manifest schema version {doc.get('schema_version')} != {SCHEMA_VERSION}")
        return cls(p.parent, doc["spec_hash"], doc.get("name", ""), doc["runs"])

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "name": self.name, "spec_hash": self.spec_hash,
               "runs": {k: self.runs[k] for k in sorted(self.runs)}}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.path, self.to_json())

    def record_path(self, run_id: str) -> Path:
        return self.root / "runs" / f"{run_id}.json"

    def completed(self, run_id: str) -> bool:
        entry = self.runs.get(run_id)
        if not entry or entry["status"] not in ("done", "diverged"):
            return False
        try:
            RunRecord.from_json(self.record_path(run_id).read_text())
        except (OSError, ValueError, KeyError):
            return False
        return True

    def records(self, statuses=("done",)) -> list[RunRecord]:
        out = []
        for run_id in sorted(self.runs):
            if self.runs[run_id]["status"] in statuses:
                out.append(RunRecord.from_json(self.record_path(run_id).read_text()))
        return out

    def check_integrity(self) -> list[str]:
        problems = []
        for run_id, entry in sorted(self.runs.items()):
            if entry["status"] in ("done", "diverged"):
                p = self.record_path(run_id)
                try:
                    RunRecord.from_json(p.read_text())
                except (OSError, ValueError, KeyError) as exc:
                    problems.append(f"{run_id}: {p} unreadable ({exc})")
        return problems


def _summary(rc: RunConfig) -> dict:
    return {"task": rc.task.label, "depth": rc.model.depth, "width": rc.model.width,
            "steps": rc.train.total_steps, "seed": rc.train.seed, "record": f"runs/{rc.run_id}.json"}


def _limit_blas_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def _execute(rc: RunConfig, progress: str | None = None) -> tuple[str, str, float, float]:
    _limit_blas_threads()
    t0 = time.perf_counter()
    c0 = time.process_time()
    log = None
    if progress is not None:
        fh = open(progress, "w", buffering=1)

        def log(step, loss):
            fh.write(f"{step} {loss:.6g} {time.perf_counter() - t0:.0f}s\n")
    record = train_run(rc.model, rc.task, rc.train, rc.eval, log=log)
    return record.status, record.to_json(), time.perf_counter() - t0, time.process_time() - c0


def run_sweep(spec: SweepSpec, out, jobs: int | None = None, force: bool = False,
              max_runs: int | None = None, log=print) -> Manifest:
    """Execute every pending run of ``spec`` under ``out``.

    Completed runs are skipped unless ``force``.  ``max_runs`` stops after
    that many new runs (used to exercise interruption and resume).
    """
    out = Path(out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    jobs = jobs or spec.jobs
    if (out / Manifest.FILENAME).exists():
        manifest = Manifest.load(out)
        if manifest.spec_hash != spec.spec_hash and not force:
            raise SpecError(f"{out} holds a different sweep (spec hash mismatch); use --force or a new --out")
        manifest.spec_hash = spec.spec_hash
    else:
        manifest = Manifest(out, spec.spec_hash, spec.name)
    for rc in spec.runs:
        manifest.runs.setdefault(rc.run_id, {"status": "pending", **_summary(rc)})
    _atomic_write(out / "sweep_spec.json", json.dumps(spec.raw, sort_keys=True, indent=1) + "\n")
    manifest.save()

    progress_dir = out / "progress"
    progress_dir.mkdir(exist_ok=True)
    todo = [rc for rc in spec.runs if force or not manifest.completed(rc.run_id)]
    if max_runs is not None:
        todo = todo[:max_runs]
    log(f"sweep {spec.name}: {len(spec.runs)} runs in grid {spec.grid_size()}, {len(todo)} to execute")

    def finish(rc: RunConfig, status: str, text: str | None, seconds: float, cpu: float = 0.0, error: str = ""):
        if text is not None:
            _atomic_write(manifest.record_path(rc.run_id), text)
            # CSV companion: step,train_loss
            _atomic_write(out / "runs" / f"{rc.run_id}.loss.csv", RunRecord.from_json(text).loss_csv())
        entry = {"status": status, **_summary(rc)}
        if error:
            entry["error"] = error
        manifest.runs[rc.run_id] = entry
        manifest.save()
        with open(out / "timings.jsonl", "a") as fh:
            fh.write(json.dumps({"run_id": rc.run_id, "status": status, "seconds": round(seconds, 3),
                                 "cpu_seconds": round(cpu, 3)}) + "\n")
        log(f"  {rc.run_id} {status} ({seconds:.1f}s) {_summary(rc)}")

    if jobs <= 1:
        for rc in todo:
            t0 = time.perf_counter()
            try:
                status, text, secs, cpu = _execute(rc, str(progress_dir / f"{rc.run_id}.log"))
                finish(rc, status, text, secs, cpu)
            except Exception as exc:  # one failed run must not sink the sweep
                finish(rc, "failed", None, time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_execute, rc, str(progress_dir / f"{rc.run_id}.log")): rc for rc in todo}
            for fut in as_completed(futures):
                rc = futures[fut]
                try:
                    status, text, secs, cpu = fut.result()
                    finish(rc, status, text, secs, cpu)
                except Exception as exc:
                    finish(rc, "failed", None, 0.0, error=f"{type(exc).__name__}: {exc}")
    return manifest


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "icl_runs"))
