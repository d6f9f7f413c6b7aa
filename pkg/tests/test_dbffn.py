import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import gradcheck, weighted_sum
from tcsaformer import tensor as T
from tcsaformer.dbffn import dbffn_forward, init_dbffn, init_mlp, mlp_forward
from tcsaformer.params import ParamBuilder, Scope, wrap

EPS = 1e-5


def random_dbffn(C, seed=0, zero_bias=False):
    rng = np.random.default_rng(seed)
    pb = ParamBuilder(rng, dtype=np.float64)
    init_dbffn(pb, "f", C)
    params = {k: rng.normal(size=v.shape) * 0.5 for k, v in pb.params.items()}
    buffers = {k: (rng.uniform(0.5, 2.0, v.shape) if k.endswith("var") else rng.normal(size=v.shape) * 0.1)
               for k, v in pb.buffers.items()}
    if zero_bias:
        params = {k: (np.zeros_like(v) if k.endswith(".b") else v) for k, v in params.items()}
        buffers = {k: (np.zeros_like(v) if k.endswith("mean") else v) for k, v in buffers.items()}
    return params, buffers


def run(x, params, buffers, training=False):
    scope = Scope(wrap(params, dtype=np.float64), buffers, training=training).child("f")
    return dbffn_forward(T.tensor(x, dtype=np.float64), scope).data


def pointwise_oracle(v, p, b, tap):
    """DBFFN on a single pixel vector v, each depthwise kernel reduced to ``tap(kernel)``."""

    def bn(z, name):
        return (z - b[f"f.{name}.running_mean"]) / np.sqrt(b[f"f.{name}.running_var"] + EPS) * p[f"f.{name}.g"] \
            + p[f"f.{name}.b"]

    def lin(z, name):
        return z @ p[f"f.{name}.w"] + p[f"f.{name}.b"]

    def dw(z, name):
        return z * tap(p[f"f.{name}.w"]) + p[f"f.{name}.b"]

    def gelu(z):
        return 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3)))

    xh = bn(lin(bn(v, "bn0"), "expand"), "bn1")
    cat = np.concatenate([gelu(dw(xh, "dw3a")), gelu(dw(xh, "dw7a"))])
    l2 = bn(lin(dw(cat, "dw3b"), "pw3b"), "bn2l")
    r2 = bn(lin(dw(cat, "dw7b"), "pw7b"), "bn2r")
    return bn(lin(np.concatenate([l2, r2]), "fuse"), "bn3")


def center(w):
    k = w.shape[-1] // 2
    return w[:, k, k]


def test_zero_input_zero_output():
    params, buffers = random_dbffn(3, zero_bias=True)
    assert not run(np.zeros((1, 5, 5, 3)), params, buffers).any()


def test_single_pixel_matches_pointwise_oracle():
    params, buffers = random_dbffn(4, seed=1)
    v = np.random.default_rng(2).normal(size=4)
    out = run(v.reshape(1, 1, 1, 4), params, buffers)
    assert np.allclose(out.reshape(4), pointwise_oracle(v, params, buffers, center), atol=1e-10)


def test_constant_field_center_uses_kernel_sums():
    params, buffers = random_dbffn(2, seed=3)
    v = np.array([0.7, -1.2])
    out = run(np.tile(v, (1, 15, 15, 1)), params, buffers)
    expected = pointwise_oracle(v, params, buffers, lambda w: w.sum(axis=(1, 2)))
    assert np.allclose(out[0, 7, 7], expected, atol=1e-10)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 2))
def test_shape_preserved(H, W, B):
    params, buffers = random_dbffn(2)
    x = np.random.default_rng(H + W).normal(size=(B, H, W, 2))
    assert run(x, params, buffers).shape == x.shape


def test_channel_mismatch_is_error():
    params, buffers = random_dbffn(2)
    with pytest.raises(T.ShapeError):
        run(np.zeros((1, 3, 3, 3)), params, buffers)


def test_translation_equivariance_inside_zero_field():
    params, buffers = random_dbffn(2, seed=4, zero_bias=True)
    x = np.zeros((1, 20, 20, 2))
    x[0, 8:11, 9:11] = np.random.default_rng(5).normal(size=(3, 2, 2))
    shifted = np.roll(x, (1, 1), axis=(1, 2))
    a, b = run(x, params, buffers), run(shifted, params, buffers)
    inner = slice(4, 16)
    assert np.allclose(np.roll(a, (1, 1), axis=(1, 2))[0, inner, inner], b[0, inner, inner], atol=1e-12)


def test_receptive_radius_is_six():
    params, buffers = random_dbffn(2, seed=6, zero_bias=True)
    x = np.zeros((1, 17, 17, 2))
    x[0, 8, 8] = [1.0, -1.0]
    resp = np.abs(run(x, params, buffers)).sum(axis=-1)[0]
    rows, cols = np.nonzero(resp > 1e-12)
    cheb = np.maximum(np.abs(rows - 8), np.abs(cols - 8))
    assert cheb.max() == 6
    assert resp[2, 2] > 0 and resp[8, 14] > 0


def test_gradients_f64_and_f32():
    C = 2
    params, buffers = random_dbffn(C, seed=7)
    x = np.random.default_rng(8).uniform(-1, 1, (1, 5, 5, C))
    names = ["x", "f.expand.w", "f.dw7a.w", "f.pw3b.w", "f.fuse.w", "f.bn1.g"]
    arrays = {"x": x, **{k: params[k] for k in names[1:]}}

    def build(t):
        full = {**wrap(params, dtype=t["x"].dtype), **{k: v for k, v in t.items() if k != "x"}}
        out = dbffn_forward(t["x"], Scope(full, buffers, training=True).child("f"))
        return weighted_sum(out)

    for dtype, tol in ((np.float64, 1e-3), (np.float32, 1e-2)):
        for name, (_, mean) in gradcheck(build, arrays, dtype).items():
            assert mean < tol, (dtype, name, mean)


def test_training_mode_reports_running_stats():
    params, buffers = random_dbffn(2)
    updates = {}
    scope = Scope(wrap(params, dtype=np.float64), buffers, training=True, updates=updates).child("f")
    dbffn_forward(T.tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 2))), scope)
    assert set(updates) == set(buffers)


def test_mlp_alternative_shape():
    rng = np.random.default_rng(0)
    pb = ParamBuilder(rng)
    init_mlp(pb, "m", 4)
    assert pb.params["m.fc1.w"].shape == (4, 16)
    out = mlp_forward(T.tensor(rng.normal(size=(1, 3, 3, 4))), Scope(wrap(pb.params), {}).child("m"))
    assert out.shape == (1, 3, 3, 4)
