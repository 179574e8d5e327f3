"""Pre-norm transformer that reads a packed ICL prompt and predicts the query's y."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    width: int
    heads: int = 1
    d_x: int = 20
    d_y: int = 1
    k_max: int = 40
    ffn_multiplier: int = 4
    seed: int = 0
    positional: bool = True

    def validate(self) -> "ModelConfig":
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        for name in ("width", "heads", "d_x", "d_y", "k_max", "ffn_multiplier"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.width % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide width={self.width}")
        if self.width < self.d_x + self.d_y:
            raise ConfigError(
                f"width={self.width} cannot hold packed tokens of d_x + d_y = {self.d_x + self.d_y}")
        return self

    @property
    def n_positions(self) -> int:
        return 2 * self.k_max + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Prompt:
    tokens: np.ndarray  # (2k+1, width)
    k: int


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable array, in canonical order."""
    d, f = config.width, config.width * config.ffn_multiplier
    shapes = {"embed.weight": (d, d), "embed.bias": (d,)}
    if config.positional:
        shapes["pos"] = (config.n_positions, d)
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,), p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes.update({
        "final_ln.gain": (d,), "final_ln.bias": (d,),
        "readout.weight": (d, config.d_y), "readout.bias": (config.d_y,),
    })
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad)
                                              for k, v in self.params.items()})

    def save(self, path) -> None:
        doc = {"config": self.config.to_dict(),
               "tensors": {k: T.tensor_to_b64(v) for k, v in self.params.items()}}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=False)

    @classmethod
    def load(cls, path) -> "TransformerModel":
        with open(path) as fh:
            doc = json.load(fh)
        config = ModelConfig.from_dict(doc["config"]).validate()
        params = {k: T.tensor_from_b64(v) for k, v in doc["tensors"].items()}
        expected = param_shapes(config)
        if list(params) != list(expected) or any(params[k].shape != s for k, s in expected.items()):
            raise ConfigError("checkpoint tensors do not match the configured architecture")
        for p in params.values():
            p.requires_grad = True
        return cls(config, params)


def init_model(config: ModelConfig) -> TransformerModel:
    """Gaussian init, deterministic in ``config.seed``.

    Projections get std 1/sqrt(d); the FFN output matrix gets std
    1/sqrt(d * ffn_multiplier).  Biases start at 0 and norm gains at 1.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.width
    proj_std = 1.0 / math.sqrt(d)
    ffn_out_std = 1.0 / math.sqrt(d * config.ffn_multiplier)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith("bias") or name.endswith(".b1") or name.endswith(".b2"):
            arr = np.zeros(shape)
        elif name.endswith("ffn.w2"):
            arr = rng.normal(0.0, ffn_out_std, shape)
        else:
            arr = rng.normal(0.0, proj_std, shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return TransformerModel(config, params)


# ---------------------------------------------------------------------------
# prompt packing


def encode_batch(xs: np.ndarray, ys: np.ndarray, queries: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Pack B episodes of k pairs into a (B, 2k+1, width) token array.

    Row 2i holds x_i in slots [0, d_x); row 2i+1 holds y_i in slots
    [d_x, d_x + d_y); the last row holds the query x with an empty y-slot.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    queries = np.asarray(queries, dtype=float)
    B, k = xs.shape[0], xs.shape[1]
    if k > config.k_max:
        raise CapacityError(f"{k} context pairs exceed k_max={config.k_max}")
    if ys.shape[:2] != (B, k):
        raise ValueError(f"xs {xs.shape} and ys {ys.shape} disagree on batch/context size")
    dx, dy = config.d_x, config.d_y
    tokens = np.zeros((B, 2 * k + 1, config.width))
    tokens[:, 0:2 * k:2, :dx] = xs.reshape(B, k, dx)
    tokens[:, 1:2 * k:2, dx:dx + dy] = ys.reshape(B, k, dy)
    tokens[:, 2 * k, :dx] = queries
    return tokens


def encode_context(xs, ys, query, config: ModelConfig) -> Prompt:
    xs = np.asarray(xs, dtype=float).reshape(-1, config.d_x)
    ys = np.asarray(ys, dtype=float).reshape(-1, config.d_y)
    if len(xs) != len(ys):
        raise ValueError(f"{len(xs)} inputs but {len(ys)} targets")
    tokens = encode_batch(xs[None], ys[None], np.asarray(query, dtype=float)[None], config)
    return Prompt(tokens[0], len(xs))


def decode_prompt(prompt: Prompt, config: ModelConfig):
    """Inverse of :func:`encode_context`: returns (xs, ys, query)."""
    k, dx, dy = prompt.k, config.d_x, config.d_y
    t = prompt.tokens
    return t[0:2 * k:2, :dx].copy(), t[1:2 * k:2, dx:dx + dy].copy(), t[2 * k, :dx].copy()


# ---------------------------------------------------------------------------
# forward pass


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, Tensor._wrap(keep, False))


def _attention(h: Tensor, p: dict, prefix: str, heads: int, last_only: bool = False) -> Tensor:
    """Multi-head attention; with ``last_only`` only the final row issues a query."""
    B, n, d = h.shape
    dh = d // heads

    def split(t, rows):
        return T.transpose(T.reshape(t, (B, rows, heads, dh)), (0, 2, 1, 3))

    hq = T.slice_axis(h, 1, n - 1, n) if last_only else h
    m = hq.shape[1]
    q = split(T.matmul(hq, p[prefix + "wq"]), m)
    k = split(T.matmul(h, p[prefix + "wk"]), n)
    v = split(T.matmul(h, p[prefix + "wv"]), n)
    att = T.softmax(T.matmul(q, T.transpose(k)), axis=-1, temperature=math.sqrt(dh))
    o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, m, d))
    return T.matmul(o, p[prefix + "wo"])


def forward_batch(model: TransformerModel, tokens, dropout: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """(B, n, width) tokens -> (B, d_y) predictions for each final row."""
    cfg, p = model.config, model.params
    x = tokens if isinstance(tokens, Tensor) else Tensor._wrap(np.asarray(tokens, dtype=float), False)
    if x.ndim != 3 or x.shape[-1] != cfg.width:
        raise T.ShapeError(f"prompt rows must have width {cfg.width}, got tokens of shape {x.shape}")
    n = x.shape[1]
    if n > cfg.n_positions:
        raise CapacityError(f"prompt of {n} rows exceeds {cfg.n_positions} positions")
    stage = "embedding"
    try:
        h = T.add(T.matmul(x, p["embed.weight"]), p["embed.bias"])
        if cfg.positional:
            h = T.add(h, T.slice_axis(p["pos"], 0, 0, n))
        for i in range(cfg.depth):
            stage = f"block {i}"
            pre = f"blocks.{i}."
            # only the final row reaches the readout, so the last block
            # computes queries, attention output and FFN for that row alone
            last = i == cfg.depth - 1
            a = T.layer_norm(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            if last:
                h = T.slice_axis(h, 1, n - 1, n)
            h = T.add(h, _dropout(_attention(a, p, pre + "attn.", cfg.heads, last), dropout, rng))
            f = T.layer_norm(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            f = T.gelu(T.add(T.matmul(f, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]))
            f = T.add(T.matmul(f, p[pre + "ffn.w2"]), p[pre + "ffn.b2"])
            h = T.add(h, _dropout(f, dropout, rng))
        stage = "readout"
        last = T.reshape(T.slice_axis(h, 1, h.shape[1] - 1, h.shape[1]), (x.shape[0], cfg.width))
        last = T.layer_norm(last, p["final_ln.gain"], p["final_ln.bias"])
        return T.add(T.matmul(last, p["readout.weight"]), p["readout.bias"])
    except T.NumericError as exc:
        raise T.NumericError(f"{exc} in {stage}") from None


def forward(model: TransformerModel, prompt: Prompt) -> np.ndarray:
    out = forward_batch(model, prompt.tokens[None])
    return out.data[0].copy()


def predict(model: TransformerModel, tokens: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Inference over a (B, n, width) token array, chunked to bound memory."""
    outs = [forward_batch(model, tokens[i:i + chunk]).data for i in range(0, len(tokens), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, model.config.d_y))
