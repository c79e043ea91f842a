"""Shared oracles for the test-suite: finite differences and random composites."""

import numpy as np

from utvae import diffcore as dc


def central_diff(fn, arr, h=1e-5):
    """Central finite differences of scalar ``fn()`` wrt ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = float(np.sum(fn()))
        arr[i] = old - h
        down = float(np.sum(fn()))
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def composite(seed):
    """A random scalar function touching every primitive; returns (params, f).

    ``f(tape, params)`` evaluates on ``tape`` (or as constants when None).
    """
    rng = np.random.default_rng(seed)
    n, k = 3, 4
    params = {
        "W": dc.Parameter("W", rng.normal(size=(k, k)) * 0.5, dc.Group.GENERATIVE),
        "b": dc.Parameter("b", rng.normal(size=(1, k)) * 0.3, dc.Group.INFERENCE),
        "s": dc.Parameter("s", rng.uniform(0.5, 1.5, size=(n, 1)), dc.Group.AUXILIARY),
    }
    x = rng.normal(size=(n, k))
    order = rng.permutation(6)

    def f(tape, use=None):
        use = params if use is None else use

        def get(pid):
            p = use[pid]
            return dc.Tensor(p.value) if tape is None else tape.watch(p)

        W, b, s = get("W"), get("b"), get("s")
        h = dc.matmul(x, W) + b
        acts = [dc.elu, dc.softplus, dc.tanh, dc.sigmoid,
                lambda v: dc.rectifier(v, "softplus"), lambda v: -v]
        for j in order[:3]:
            h = acts[j](h)
        h = dc.broadcast_to(s, (n, k)) * h - h / (dc.exp(s) + 1.0)
        a = dc.slice_cols(h, 0, 2)
        c = dc.take(h, (slice(None), slice(2, 4)))
        h2 = dc.concat([dc.square(a), dc.log(dc.softplus(c) + 0.1)], axis=1)
        return dc.mean(h2) + dc.sum(dc.mean(h2, axis=0) * 0.5) - dc.sum(dc.log(s))

    return params, f
