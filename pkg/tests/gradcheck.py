"""Central finite differences against tape gradients."""
import numpy as np

from icl_lab import tensor as T


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f, t: T.Tensor, h: float = 1e-5) -> np.ndarray:
    """d f() / d t.data by central differences; f returns a float."""
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_op(build, inputs, h: float = 1e-5) -> float:
    """Worst relative error over inputs for loss = sum(build(*inputs) * w), w fixed random."""
    with T.Tape():
        probe = build(*inputs)
    w = T.Tensor(np.random.default_rng(123).standard_normal(probe.shape))

    def loss_value():
        return float((build(*inputs).data * w.data).sum())

    with T.Tape() as tape:
        loss = T.sum_(T.mul(build(*inputs), w))
    T.backward(loss, tape)
    worst = 0.0
    for t in inputs:
        if t.requires_grad:
            worst = max(worst, rel_error(t.grad, numeric_grad(loss_value, t, h)))
    return worst
