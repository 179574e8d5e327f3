"""Synthetic in-context task families: dense linear, sparse linear, decision trees.

Each family carries a declared hierarchy depth (0, 1, and tree depth
respectively).  Generators are pure functions of their seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

FAMILIES = ("linear", "sparse_linear", "decision_tree")


class TaskSpecError(ValueError):
    pass


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class TaskSpec:
    family: str = "linear"
    d_x: int = 20
    d_y: int = 1
    hierarchy_depth: int = 0
    branching_factor: int = 2
    sparsity: int | None = None
    noise_std: float = 0.1
    smoothness_beta: float | None = None  # carried as metadata, never used

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise TaskSpecError(f"unknown task family {self.family!r}; expected one of {FAMILIES}")
        if self.d_x < 1 or self.d_y < 1:
            raise TaskSpecError("d_x and d_y must be positive")
        if self.d_y != 1:
            raise TaskSpecError("only scalar targets (d_y=1) are generated")
        if self.noise_std < 0:
            raise TaskSpecError("noise_std must be nonnegative")
        h = self.hierarchy_depth
        if self.family == "linear" and h != 0:
            raise TaskSpecError("linear tasks have hierarchy depth 0")
        if self.family == "sparse_linear" and h != 1:
            raise TaskSpecError("sparse linear tasks have hierarchy depth 1")
        if self.family == "decision_tree":
            if h < 2:
                raise TaskSpecError("decision trees need depth >= 2")
            if self.branching_factor != 2:
                raise TaskSpecError("decision trees are binary (branching_factor=2)")
        if self.family == "sparse_linear":
            if self.sparsity is None or not 1 <= self.sparsity <= self.d_x:
                raise TaskSpecError(f"sparse_linear needs 1 <= sparsity <= d_x, got {self.sparsity}")
        elif self.sparsity is not None:
            raise TaskSpecError("sparsity is only meaningful for sparse_linear")

    @classmethod
    def linear(cls, d_x=20, noise_std=0.1) -> "TaskSpec":
        return cls("linear", d_x=d_x, hierarchy_depth=0, noise_std=noise_std)

    @classmethod
    def sparse(cls, s=3, d_x=20, noise_std=0.1) -> "TaskSpec":
        return cls("sparse_linear", d_x=d_x, hierarchy_depth=1, sparsity=s, noise_std=noise_std)

    @classmethod
    def tree(cls, depth=2, d_x=20, noise_std=0.1) -> "TaskSpec":
        return cls("decision_tree", d_x=d_x, hierarchy_depth=depth, noise_std=noise_std)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    @property
    def label(self) -> str:
        if self.family == "sparse_linear":
            return f"sparse_linear_s{self.sparsity}"
        if self.family == "decision_tree":
            return f"decision_tree_h{self.hierarchy_depth}"
        return "linear"


@dataclass
class TaskInstance:
    """One sampled function.

    Linear families use ``weights``.  Trees are stored heap-ordered: internal
    node ``i`` has children ``2i+1`` / ``2i+2``; ``split_dims`` and
    ``thresholds`` have ``2**h - 1`` entries and ``leaf_values`` has ``2**h``.
    """

    spec: TaskSpec
    weights: np.ndarray | None = None
    split_dims: np.ndarray | None = None
    thresholds: np.ndarray | None = None
    leaf_values: np.ndarray | None = None


@dataclass
class Episode:
    xs: np.ndarray  # (k, d_x)
    ys: np.ndarray  # (k, d_y)
    query: np.ndarray  # (d_x,)
    target: np.ndarray  # (d_y,)

    @property
    def k(self) -> int:
        return len(self.xs)

    def to_json(self) -> str:
        return json.dumps({
            "xs": self.xs.tolist(), "ys": self.ys.tolist(),
            "query": self.query.tolist(), "target": self.target.tolist(),
        })

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        d = json.loads(line)
        query = np.asarray(d["query"], dtype=float)
        target = np.asarray(d["target"], dtype=float)
        k = len(d["xs"])
        xs = np.asarray(d["xs"], dtype=float).reshape(k, len(query))
        ys = np.asarray(d["ys"], dtype=float).reshape(k, len(target))
        return cls(xs, ys, query, target)


def sample_task(spec: TaskSpec, seed) -> TaskInstance:
    rng = as_rng(seed)
    if spec.family == "linear":
        return TaskInstance(spec, weights=rng.standard_normal(spec.d_x))
    if spec.family == "sparse_linear":
        support = rng.choice(spec.d_x, size=spec.sparsity, replace=False)
        w = np.zeros(spec.d_x)
        w[support] = rng.standard_normal(spec.sparsity)
        return TaskInstance(spec, weights=w)
    n_internal = 2**spec.hierarchy_depth - 1
    return TaskInstance(
        spec,
        split_dims=rng.integers(0, spec.d_x, size=n_internal),
        thresholds=rng.standard_normal(n_internal),
        leaf_values=rng.uniform(-1.0, 1.0, size=n_internal + 1),
    )


def evaluate(task: TaskInstance, x) -> np.ndarray:
    """f(x) for one input of shape (d_x,) or a batch of shape (n, d_x).

    Returns shape (d_y,) or (n, d_y).  Tree ties go right (x[dim] >= threshold).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != task.spec.d_x:
        raise ValueError(f"input has dimension {X.shape[-1]}, task expects {task.spec.d_x}")
    if task.weights is not None:
        # row-wise reduction: a row's value does not depend on the batch it sits in
        out = (X * task.weights).sum(axis=1)
    else:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(task.spec.hierarchy_depth):
            go_right = X[rows, task.split_dims[node]] >= task.thresholds[node]
            node = 2 * node + 1 + go_right
        out = task.leaf_values[node - len(task.thresholds)]
    out = out[:, None]
    return out[0] if single else out


def sample_episode(task: TaskInstance, k: int, seed) -> Episode:
    if k < 0:
        raise ValueError("k must be nonnegative")
    rng = as_rng(seed)
    spec = task.spec
    X = rng.standard_normal((k + 1, spec.d_x))
    fx = evaluate(task, X)
    ys = fx[:k] + spec.noise_std * rng.standard_normal((k, spec.d_y))
    return Episode(xs=X[:k], ys=ys, query=X[k], target=fx[k])


def random_baseline_error(spec: TaskSpec, n_samples: int = 10_000, seed=0,
                          noisy_targets: bool = False) -> tuple[float, float]:
    """Monte-Carlo squared error of the best constant predictor.

    The constant is the marginal mean of f(x) over tasks and inputs, estimated
    from the same draws.  Returns (estimate, standard error).
    """
    if n_samples < 1000:
        raise ValueError("random_baseline_error needs n_samples >= 1000")
    rng = as_rng(seed)
    ys = np.empty(n_samples)
    for i in range(n_samples):
        task = sample_task(spec, rng)
        ys[i] = evaluate(task, rng.standard_normal(spec.d_x))[0]
    if noisy_targets:
        ys = ys + spec.noise_std * rng.standard_normal(n_samples)
    sq = (ys - ys.mean()) ** 2
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(n_samples))


def write_episodes_jsonl(path, episodes: Iterable[Episode]) -> int:
    n = 0
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(ep.to_json() + "\n")
            n += 1
    return n


def read_episodes_jsonl(path) -> list[Episode]:
    with open(path) as fh:
        return [Episode.from_json(line) for line in fh if line.strip()]
