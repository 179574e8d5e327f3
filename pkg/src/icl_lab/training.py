"""AdamW + cosine schedule training on an infinite stream of ICL episodes."""
from __future__ import annotations

import csv
import io
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, TransformerModel, count_params, encode_batch, forward_batch, init_model, predict
from .tasks import TaskSpec, evaluate, sample_task

DIVERGENCE_FACTOR = 1e3
LR_GRID = (3e-5, 1e-4, 3e-4)


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(base: int, *parts) -> int:
    """Stable 63-bit seed for a namespaced stream, e.g. ``derive_seed(s, "eval", 3)``."""
    key = [zlib.crc32(str(p).encode()) for p in parts]
    ss = np.random.SeedSequence(entropy=int(base) & (2**63 - 1), spawn_key=key)
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    dropout: float = 0.1
    batch_size: int = 32
    warmup_steps: int = 1000
    total_steps: int = 20_000
    seed: int = 0
    floor_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_min: int = 0
    log_every: int = 10

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("learning_rate > 0, total_steps >= 0 and batch_size >= 1 required")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.warmup_steps < 0 or self.floor_lr < 0 or self.floor_lr > self.learning_rate:
            raise ValueError("warmup_steps >= 0 and 0 <= floor_lr <= learning_rate required")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    k_grid: tuple[int, ...] = (0, 1, 2, 5, 10, 20, 40)
    n_tasks: int = 1000
    n_queries: int = 10
    n_bootstrap: int = 1000
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_grid"] = list(self.k_grid)
        return d


# ---------------------------------------------------------------------------
# optimiser


def cosine_lr(step: int, warmup_steps: int, total_steps: int, peak_lr: float, floor_lr: float = 0.0) -> float:
    """Linear warmup to ``peak_lr``, then half-cosine decay to ``floor_lr`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    progress = (step - warmup_steps) / span
    return floor_lr + 0.5 * (peak_lr - floor_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               config: TrainConfig, step_index: int, lr: float | None = None) -> None:
    """One in-place AdamW update with bias-corrected moments and decoupled decay.

    ``lr`` defaults to the cosine schedule evaluated at ``step_index``.
    """
    if lr is None:
        lr = cosine_lr(step_index, config.warmup_steps, config.total_steps,
                       config.learning_rate, config.floor_lr)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name} at step {step_index}")
    b1, b2 = config.beta1, config.beta2
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# ---------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    model_config: dict
    task_spec: dict
    train_config: dict
    eval_config: dict
    n_params: int
    status: str  # "done" | "diverged"
    loss_trajectory: list[tuple[int, float]]
    eval_table: dict[int, dict]
    demonstrations: dict[str, int]
    divergence_factor: float = DIVERGENCE_FACTOR
    note: str = ""
    wall_clock_s: float | None = None  # kept out of the canonical JSON

    def to_json(self) -> str:
        doc = {
            "model_config": self.model_config,
            "task_spec": self.task_spec,
            "train_config": self.train_config,
            "eval_config": self.eval_config,
            "n_params": self.n_params,
            "status": self.status,
            "divergence_factor": self.divergence_factor,
            "demonstrations": self.demonstrations,
            "loss_trajectory": [[s, v] for s, v in self.loss_trajectory],
            "eval_table": {str(k): v for k, v in sorted(self.eval_table.items())},
            "note": self.note,
        }
        for value in _walk_numbers(doc):
            if not math.isfinite(value):
                raise ValueError("run record contains a non-finite number")
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        return cls(
            model_config=d["model_config"], task_spec=d["task_spec"], train_config=d["train_config"],
            eval_config=d["eval_config"], n_params=d["n_params"], status=d["status"],
            loss_trajectory=[(int(s), float(v)) for s, v in d["loss_trajectory"]],
            eval_table={int(k): v for k, v in d["eval_table"].items()},
            demonstrations=d["demonstrations"], divergence_factor=d["divergence_factor"], note=d["note"],
        )

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "train_loss"])
        for s, v in self.loss_trajectory:
            w.writerow([s, repr(v)])
        return buf.getvalue()

    def error_at(self, k: int) -> float:
        return self.eval_table[k]["mean"]


def _walk_numbers(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _walk_numbers(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _walk_numbers(v)
    elif isinstance(obj, float):
        yield obj


# ---------------------------------------------------------------------------
# data stream


def sample_batch(spec: TaskSpec, batch_size: int, k: int, rng: np.random.Generator):
    """Fresh tasks, one episode each: returns (xs, ys, queries, targets)."""
    xs = np.empty((batch_size, k, spec.d_x))
    ys = np.empty((batch_size, k, spec.d_y))
    queries = np.empty((batch_size, spec.d_x))
    targets = np.empty((batch_size, spec.d_y))
    for b in range(batch_size):
        task = sample_task(spec, rng)
        X = rng.standard_normal((k + 1, spec.d_x))
        fx = evaluate(task, X)
        xs[b] = X[:k]
        ys[b] = fx[:k] + spec.noise_std * rng.standard_normal((k, spec.d_y))
        queries[b] = X[k]
        targets[b] = fx[k]
    return xs, ys, queries, targets


def train_model(model: TransformerModel, spec: TaskSpec, config: TrainConfig, log=None):
    """Train ``model`` in place.  Returns (trajectory, status, demonstrations, note)."""
    config.validate()
    mc = model.config
    if spec.d_x != mc.d_x or spec.d_y != mc.d_y:
        raise ValueError(f"task dims ({spec.d_x}, {spec.d_y}) do not match model ({mc.d_x}, {mc.d_y})")
    params = model.arrays()
    state = AdamState.zeros_like(params)
    trajectory: list[tuple[int, float]] = []
    window: list[float] = []
    pairs = episodes = 0
    initial_loss = None
    for step in range(config.total_steps):
        rng = np.random.default_rng(derive_seed(config.seed, "train", step))
        k = int(rng.integers(config.k_min, mc.k_max + 1))
        xs, ys, qs, targets = sample_batch(spec, config.batch_size, k, rng)
        tokens = encode_batch(xs, ys, qs, mc)
        try:
            with T.Tape() as tape:
                pred = forward_batch(model, tokens, config.dropout, rng)
                loss = T.mse_loss(pred, T.Tensor(targets))
            T.backward(loss, tape)
            grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data)
                     for name, p in model.params.items()}
            adamw_step(params, grads, state, config, step + 1)
        except (T.NumericError, TrainingDiverged) as exc:
            if window:
                trajectory.append((step, float(np.mean(window))))
            return trajectory, "diverged", _demos(pairs, episodes), f"step {step}: {exc}"
        value = loss.item()
        pairs += config.batch_size * k
        episodes += config.batch_size
        if initial_loss is None:
            initial_loss = value
        window.append(value)
        if value > DIVERGENCE_FACTOR * initial_loss:
            trajectory.append((step, float(np.mean(window))))
            return trajectory, "diverged", _demos(pairs, episodes), (
                f"step {step}: loss {value:.4g} exceeded {DIVERGENCE_FACTOR:g} x initial {initial_loss:.4g}")
        if (step + 1) % config.log_every == 0 or step + 1 == config.total_steps:
            trajectory.append((step + 1, float(np.mean(window))))
            if log is not None:
                log(step + 1, trajectory[-1][1])
            window = []
    return trajectory, "done", _demos(pairs, episodes), ""


def _demos(pairs: int, episodes: int) -> dict[str, int]:
    return {"pairs": pairs, "episodes": episodes}


def train_run(model_config: ModelConfig, spec: TaskSpec, config: TrainConfig,
              eval_config: EvalConfig | None = None, log=None, return_model: bool = False):
    """Initialise, train and evaluate one model; returns its RunRecord."""
    eval_config = eval_config or EvalConfig()
    t0 = time.perf_counter()
    model = init_model(model_config)
    trajectory, status, demos, note = train_model(model, spec, config, log=log)
    table = {}
    if status == "done":
        table = evaluate_icl(model, spec, eval_config.k_grid, eval_config.n_tasks, eval_config.n_queries,
                             eval_config.seed, n_bootstrap=eval_config.n_bootstrap)
    record = RunRecord(
        model_config=model_config.to_dict(), task_spec=spec.to_dict(), train_config=config.to_dict(),
        eval_config=eval_config.to_dict(), n_params=count_params(model_config), status=status,
        loss_trajectory=trajectory, eval_table=table, demonstrations=demos, note=note,
        wall_clock_s=time.perf_counter() - t0,
    )
    return (record, model) if return_model else record


# ---------------------------------------------------------------------------
# evaluation


def evaluate_icl(model: TransformerModel, spec: TaskSpec, k_grid, n_tasks: int = 1000,
                 n_queries: int = 10, seed: int = 0, n_bootstrap: int = 1000,
                 chunk_tasks: int = 50) -> dict[int, dict]:
    """Mean squared query error per context size, with bootstrap stderr over tasks.

    Task and episode streams are drawn from an "eval" seed namespace, so they
    never coincide with the training stream.  For each task, the context for
    size k is the first k pairs of one fixed draw, so columns are paired.
    """
    k_grid = sorted(set(int(k) for k in k_grid))
    mc = model.config
    if k_grid and k_grid[-1] > mc.k_max:
        raise ValueError(f"k={k_grid[-1]} exceeds model k_max={mc.k_max}")
    k_top = k_grid[-1] if k_grid else 0
    per_task = {k: np.empty(n_tasks) for k in k_grid}
    for lo in range(0, n_tasks, chunk_tasks):
        idx = range(lo, min(n_tasks, lo + chunk_tasks))
        ctx_x, ctx_y, qx, qy = [], [], [], []
        for i in idx:
            task = sample_task(spec, derive_seed(seed, "eval-task", i))
            rng = np.random.default_rng(derive_seed(seed, "eval-episode", i))
            X = rng.standard_normal((k_top, spec.d_x))
            ctx_x.append(X)
            ctx_y.append(evaluate(task, X) + spec.noise_std * rng.standard_normal((k_top, spec.d_y)))
            Q = rng.standard_normal((n_queries, spec.d_x))
            qx.append(Q)
            qy.append(evaluate(task, Q))
        ctx_x, ctx_y = np.stack(ctx_x), np.stack(ctx_y)
        qx, qy = np.stack(qx), np.stack(qy)
        m = len(idx)
        for k in k_grid:
            xs = np.repeat(ctx_x[:, :k], n_queries, axis=0)
            ys = np.repeat(ctx_y[:, :k], n_queries, axis=0)
            tokens = encode_batch(xs, ys, qx.reshape(m * n_queries, -1), mc)
            pred = predict(model, tokens).reshape(m, n_queries, mc.d_y)
            per_task[k][lo:lo + m] = ((pred - qy) ** 2).sum(axis=-1).mean(axis=1)
    rng = np.random.default_rng(derive_seed(seed, "eval-bootstrap"))
    table = {}
    for k in k_grid:
        errs = per_task[k]
        boot = rng.choice(errs, size=(n_bootstrap, len(errs)), replace=True).mean(axis=1)
        table[k] = {"mean": float(errs.mean()), "stderr": float(boot.std(ddof=1)),
                    "task_errors": [float(e) for e in errs]}
    return table
