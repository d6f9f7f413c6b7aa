"""Central finite-difference oracle, independent of the tape."""

import numpy as np

from tcsaformer import tensor as T


def numeric_grad(f, arrays, name, h):
    """d f / d arrays[name] by central differences; f takes a dict of numpy arrays."""
    base = arrays[name]
    grad = np.zeros(base.shape, dtype=np.float64)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        fp = f({**arrays, name: plus})
        fm = f({**arrays, name: minus})
        grad[i] = (float(fp) - float(fm)) / (2 * h)
    return grad


def tape_grads(build, arrays, dtype):
    ts = {k: T.tensor(v, requires_grad=True, dtype=dtype) for k, v in arrays.items()}
    with T.Tape() as tape:
        out = build(ts)
    tape.backward(out)
    return {k: t.grad.astype(np.float64) for k, t in ts.items()}


def rel_errors(analytic, numeric):
    """Elementwise |a - n| / max(|a|, |n|, 1e-3 * max|n|): relative, floored at the gradient scale."""
    floor = max(1e-3 * float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(build, arrays, dtype=np.float64, h=None, names=None):
    """Compare tape gradients of the scalar ``build(tensors)`` with finite differences.

    The tape runs at ``dtype``. The difference quotients are always evaluated in
    float64 at the same (dtype-rounded) point: f32 forward rounding is ~1e-7
    relative, which after dividing by 2h swamps gradients of deep stacks.

    Returns {name: (max_rel_err, mean_rel_err)}.
    """
    h = h if h is not None else (1e-6 if dtype == np.float64 else 1e-3)
    arrays = {k: np.asarray(v, dtype=dtype) for k, v in arrays.items()}
    analytic = tape_grads(build, arrays, dtype)
    arrays = {k: v.astype(np.float64) for k, v in arrays.items()}

    def f(arrs):
        with T.default_dtype(np.float64):
            return build({k: T.tensor(v, dtype=np.float64) for k, v in arrs.items()}).item()

    out = {}
    for name in names or arrays:
        err = rel_errors(analytic[name], numeric_grad(f, arrays, name, h))
        out[name] = (float(err.max()), float(err.mean()))
    return out


def weighted_sum(out, rng_seed=0):
    """Scalar loss sum(out * R) with fixed R in [-1, 1], so every output element matters."""
    r = np.random.default_rng(rng_seed).uniform(-1, 1, size=out.shape).astype(np.float32).astype(out.dtype)
    return T.sum(T.mul(out, r))
