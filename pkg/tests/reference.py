"""Plain-numpy forward pass used as an oracle for the tape-based model."""
import math

import numpy as np


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def reference_forward(params, config, tokens):
    """Every row through every block; read out the last row."""
    p = params
    h = tokens @ p["embed.weight"] + p["embed.bias"]
    n = tokens.shape[1]
    if config.positional:
        h = h + p["pos"][:n]
    H = config.heads
    dh = config.width // H
    for i in range(config.depth):
        pre = f"blocks.{i}."
        a = _ln(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        out = np.zeros_like(h)
        for head in range(H):
            cols = slice(head * dh, (head + 1) * dh)
            q = (a @ p[pre + "attn.wq"])[..., cols]
            k = (a @ p[pre + "attn.wk"])[..., cols]
            v = (a @ p[pre + "attn.wv"])[..., cols]
            s = q @ np.swapaxes(k, -1, -2) / math.sqrt(dh)
            s = np.exp(s - s.max(-1, keepdims=True))
            s /= s.sum(-1, keepdims=True)
            out[..., cols] = s @ v
        h = h + out @ p[pre + "attn.wo"]
        f = _ln(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        h = h + _gelu(f @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
    last = _ln(h[:, -1], p["final_ln.gain"], p["final_ln.bias"])
    return last @ p["readout.weight"] + p["readout.bias"]
