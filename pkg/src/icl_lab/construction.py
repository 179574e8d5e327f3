"""A fixed-weight attention stack whose forward pass runs gradient descent on
in-context linear regression, plus an independent GD oracle to check it against.

Token layout (width ``d``): ``[x (d_x) | y-slot (d_y) | zeros]``.  Context
tokens carry ``y_i`` in the y-slot, query tokens carry 0.  Every layer reads
keys/queries from the x-block and values from the y-slot, and writes its
output back into the y-slot::

    slot_j <- slot_j - (1/sqrt(L)) * sum_i a_ij * slot_i

With linear attention ``a_ij = x_i.x_j / sqrt(d)`` this is exactly one GD step
on ``sum_i (y_i - w.x_i)^2 / 2`` with step ``1/sqrt(L d)``: context slots hold
residuals ``y_i - w.x_i`` and query slots hold ``-w.x``.

Softmax mode uses ``softmax_i(x_i.x_j / sqrt(d))``.  Its constant part is
removed by subtracting a uniform-attention head, and the first-order part is
centred by adding one anchor key ``[-x_i | 0]`` per context pair: anchors are
keys only, their rows are never written, so their values stay 0.  What is left
equals the linear update up to a second-order term of relative size
``O(|x|^2 / sqrt(d))``.

The weights of the implied linear predictor are read off by placing probe
queries ``e_1 .. e_{d_x}`` in the prompt (queries never act as keys, so they do
not interact).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tasks import Episode
from .tensor import ContractError, Tensor

MODES = ("linear", "softmax")


# ---------------------------------------------------------------------------
# oracle


@dataclass
class GDOracle:
    w: np.ndarray
    eta: float

    @classmethod
    def zeros(cls, d_x: int, eta: float) -> "GDOracle":
        return cls(np.zeros(d_x), eta)


def context_gradient(w: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Negative gradient of sum_i (y_i - w.x_i)^2 / 2, i.e. sum_i (y_i - w.x_i) x_i."""
    resid = ys.reshape(-1) - xs @ w
    return xs.T @ resid


def oracle_gd_step(oracle: GDOracle, context: Episode) -> GDOracle:
    """Full-batch step w <- w + eta * sum_i (y_i - w.x_i) x_i (no 1/k factor)."""
    if context.k == 0:
        raise ContractError("gradient step needs a nonempty context")
    return GDOracle(oracle.w + oracle.eta * context_gradient(oracle.w, context.xs, context.ys), oracle.eta)


def oracle_trajectory(episode: Episode, eta: float, steps: int) -> list[np.ndarray]:
    o = GDOracle.zeros(episode.xs.shape[1], eta)
    traj = [o.w.copy()]
    for _ in range(steps):
        o = oracle_gd_step(o, episode)
        traj.append(o.w.copy())
    return traj


# ---------------------------------------------------------------------------
# construction


@dataclass
class ConstructedStack:
    k_steps: int
    d_x: int
    d_y: int
    width: int
    mode: str
    w_q: np.ndarray = field(repr=False)
    w_k: np.ndarray = field(repr=False)
    w_v: np.ndarray = field(repr=False)  # (d_y, width): [0 | I | 0]
    w_o: np.ndarray = field(repr=False)  # (width, d_y): identity into the y-slot

    @property
    def temperature(self) -> float:
        return math.sqrt(self.width)

    @property
    def residual_scale(self) -> float:
        return 1.0 / math.sqrt(self.k_steps) if self.k_steps else 0.0

    @property
    def step_size(self) -> float:
        """GD step implied by the architecture constants: 1 / sqrt(L d)."""
        return self.residual_scale / self.temperature

    def matrices(self) -> dict[str, np.ndarray]:
        return {"W_Q": self.w_q, "W_K": self.w_k, "W_V": self.w_v, "W_O": self.w_o}


def build_constructed_stack(k_steps: int, d_x: int, d_y: int = 1, mode: str = "linear",
                            width: int | None = None) -> ConstructedStack:
    """Fixed {0,1} matrices shared by every layer.

    W_Q = W_K select the x-block, W_V = [0 | I] selects the y-slot and W_O
    writes back into it.  ``width`` defaults to d_x + d_y; larger widths pad
    with zeros and only change the attention temperature sqrt(width).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    width = d_x + d_y if width is None else width
    if k_steps < 0 or d_x < 1 or d_y < 1 or width < d_x + d_y:
        raise ValueError("need k_steps >= 0, positive dims and width >= d_x + d_y")
    sel = np.zeros((width, width))
    sel[:d_x, :d_x] = np.eye(d_x)
    w_v = np.zeros((d_y, width))
    w_v[:, d_x:d_x + d_y] = np.eye(d_y)
    return ConstructedStack(k_steps, d_x, d_y, width, mode, sel.copy(), sel.copy(), w_v, w_v.T.copy())


def _tokens(stack: ConstructedStack, rows_x: np.ndarray, rows_y: np.ndarray | None) -> np.ndarray:
    out = np.zeros((len(rows_x), stack.width))
    out[:, :stack.d_x] = rows_x
    if rows_y is not None:
        out[:, stack.d_x:stack.d_x + stack.d_y] = rows_y.reshape(len(rows_x), stack.d_y)
    return out


def _layer_update(stack: ConstructedStack, H: np.ndarray, n_keys: int) -> np.ndarray:
    """Attention output written to the y-slot for every token (before residual scaling)."""
    keys = H[:n_keys]
    q = T.matmul(Tensor(H), Tensor(stack.w_q))
    k = T.matmul(Tensor(keys), Tensor(stack.w_k))
    v = T.matmul(Tensor(keys), Tensor(stack.w_v.T))  # (n_keys, d_y)
    scores = T.matmul(q, T.transpose(k))
    if stack.mode == "linear":
        weights = T.scale(scores, 1.0 / stack.temperature)
    else:
        att = T.softmax(scores, axis=-1, temperature=stack.temperature)
        uniform = Tensor(np.full(att.shape, 1.0 / n_keys))
        weights = T.scale(T.sub(att, uniform), float(n_keys))
    return T.matmul(T.matmul(weights, v), Tensor(stack.w_o.T)).data


def forward_constructed(stack: ConstructedStack, episode: Episode, probes: np.ndarray | None = None,
                        return_states: bool = False):
    """Run the stack on one episode.

    Returns ``(prediction, implied_w_trajectory)``; the trajectory has
    ``k_steps + 1`` entries starting from w = 0.  ``probes`` (default: the
    standard basis) are the query inputs used to solve for implied weights.
    """
    if episode.k == 0:
        raise ContractError("construction needs a nonempty context")
    if stack.d_y != 1:
        raise ContractError("implied-weight extraction supports d_y = 1 only")
    probes = np.eye(stack.d_x) if probes is None else np.asarray(probes, dtype=float)
    xs, ys = episode.xs, episode.ys.reshape(-1, 1)
    k = episode.k
    H = np.concatenate([
        _tokens(stack, xs, ys),
        _tokens(stack, -xs, None),  # anchors
        _tokens(stack, episode.query[None, :], None),
        _tokens(stack, probes, None),
    ])
    n_keys = 2 * k
    written = np.ones((len(H), 1))
    written[k:n_keys] = 0.0
    slot = stack.d_x
    probe_rows = slice(n_keys + 1, None)

    def implied_w(H):
        w, *_ = np.linalg.lstsq(probes, -H[probe_rows, slot], rcond=None)
        return w

    trajectory = [implied_w(H)]
    states = [H.copy()]
    for layer in range(stack.k_steps):
        upd = _layer_update(stack, H, n_keys)
        H = H - stack.residual_scale * written * upd
        if not np.isfinite(H).all():
            raise T.NumericError(f"non-finite state after constructed layer {layer}")
        trajectory.append(implied_w(H))
        states.append(H.copy())
    prediction = np.array([-H[n_keys, slot]])
    if return_states:
        return prediction, trajectory, states
    return prediction, trajectory


def layerwise_discrepancy(stack: ConstructedStack, episode: Episode, relative: bool = False) -> list[float]:
    """Per layer: distance between the stack's weight update and one oracle step
    taken from the same starting weights with step ``stack.step_size``."""
    _, traj = forward_constructed(stack, episode)
    out = []
    for w0, w1 in zip(traj[:-1], traj[1:]):
        ref = oracle_gd_step(GDOracle(w0, stack.step_size), episode).w - w0
        gap = float(np.linalg.norm((w1 - w0) - ref))
        out.append(gap / float(np.linalg.norm(ref)) if relative else gap)
    return out


def softmax_discrepancy(episode: Episode, widths, k_steps: int = 1) -> list[float]:
    """Largest relative per-layer gap between softmax and exact GD, per width."""
    d_x = episode.xs.shape[1]
    return [max(layerwise_discrepancy(build_constructed_stack(k_steps, d_x, 1, "softmax", d), episode,
                                      relative=True))
            for d in widths]


# ---------------------------------------------------------------------------
# effective learning rate


@dataclass
class EtaCell:
    L: int
    d: int
    eta_eff: float  # mean per-layer ratio |update| / |gradient|
    eta_eff_total: float  # summed over layers
    n_episodes: int
    n_flagged: int  # layer evaluations skipped for a vanishing gradient


def measure_eta_eff(L_grid, d_grid, mode: str = "softmax", n_episodes: int = 8, d_x: int = 4,
                    k: int = 8, seed: int = 0, grad_floor: float = 1e-12, stack_hook=None) -> list[EtaCell]:
    """Measure |attention update| / |context gradient| on random noiseless episodes.

    The update already includes the 1/sqrt(L) residual normalisation, so the
    per-layer ratio is the effective step and its sum over layers the
    cumulative one.  ``stack_hook`` may edit each built stack (fault injection).
    """
    L_grid, d_grid = list(L_grid), list(d_grid)
    if not L_grid or not d_grid:
        raise ValueError("L and d grids must be nonempty")
    rng = np.random.default_rng(seed)
    episodes = [random_regression_episode(rng, k, d_x) for _ in range(n_episodes)]
    cells = []
    for L in L_grid:
        for d in d_grid:
            stack = build_constructed_stack(L, d_x, 1, mode, d)
            if stack_hook is not None:
                stack = stack_hook(stack)
            ratios_per_ep = []
            flagged = 0
            for ep in episodes:
                _, traj = forward_constructed(stack, ep)
                ratios = []
                for w0, w1 in zip(traj[:-1], traj[1:]):
                    g = np.linalg.norm(context_gradient(w0, ep.xs, ep.ys))
                    if g < grad_floor:
                        flagged += 1
                        continue
                    ratios.append(np.linalg.norm(w1 - w0) / g)
                if ratios:
                    ratios_per_ep.append(np.mean(ratios))
            used = len(ratios_per_ep)
            eta = float(np.mean(ratios_per_ep)) if used else float("nan")
            cells.append(EtaCell(L, d, eta, eta * L, used, flagged))
    return cells


def random_regression_episode(rng: np.random.Generator, k: int, d_x: int, noise_std: float = 0.0) -> Episode:
    w = rng.standard_normal(d_x)
    X = rng.standard_normal((k + 1, d_x))
    y = X @ w
    ys = y[:k] + noise_std * rng.standard_normal(k)
    return Episode(X[:k], ys[:, None], X[k], y[k:k + 1])


def loglog_slope(x, y) -> float:
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
