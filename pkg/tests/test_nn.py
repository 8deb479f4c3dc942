import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import position_sampler, smooth_fd
from lookalign import nn
from lookalign.nn import (
    Conv2dParams,
    LinearParams,
    cam,
    cam_backward,
    cam_batch,
    conv2d_backward,
    conv2d_forward,
    gap_backward,
    gap_forward,
    init_params,
    linear_backward,
    linear_forward,
    load_checkpoint,
    maxpool2d_backward,
    maxpool2d_forward,
    model_backward,
    model_forward,
    save_checkpoint,
)
from lookalign.tensor import DimensionError, SeededRng, finite_diff_gradient, rel_error
from lookalign.training import attention_loss, cross_entropy

DRAWS = range(20)


def brute_conv(x, w, b, pad):
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    s = b[o]
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                s += xp[n, c, i + di, j + dj] * w[o, c, di, dj]
                    y[n, o, i, j] = s
    return y


def rand_conv(rng, cin, cout, k):
    return Conv2dParams(rng.normal((cout, cin, k, k)), rng.normal(cout), (k - 1) // 2)


def test_conv_identity_1x1():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    y, _ = conv2d_forward(Conv2dParams(np.ones((1, 1, 1, 1)), np.zeros(1), 0), x)
    np.testing.assert_array_equal(y, x)


def test_conv_delta_kernel():
    x = SeededRng(0).normal((2, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y, _ = conv2d_forward(Conv2dParams(w, np.zeros(1), 1), x)
    np.testing.assert_array_equal(y, x)


def test_conv_matches_brute_force():
    rng = SeededRng(1)
    x = rng.normal((2, 3, 8, 8))
    p = rand_conv(rng, 3, 4, 3)
    y, _ = conv2d_forward(p, x)
    np.testing.assert_allclose(y, brute_conv(x, p.weight, p.bias, 1), rtol=0, atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d_forward(rand_conv(SeededRng(0), 3, 4, 3), np.zeros((1, 2, 5, 5)))


def test_conv_backward_zero_upstream():
    rng = SeededRng(2)
    p = rand_conv(rng, 2, 3, 3)
    y, cache = conv2d_forward(p, rng.normal((1, 2, 5, 5)))
    for g in conv2d_backward(p, cache, np.zeros_like(y)):
        assert not g.any()


def test_conv_backward_bias_counts_positions():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    p = Conv2dParams(np.ones((1, 1, 1, 1)), np.zeros(1), 0)
    y, cache = conv2d_forward(p, x)
    _, _, db = conv2d_backward(p, cache, np.ones_like(y))
    np.testing.assert_array_equal(db, [9.0])


def test_conv_backward_shape_mismatch():
    p = rand_conv(SeededRng(0), 1, 1, 3)
    _, cache = conv2d_forward(p, np.zeros((1, 1, 4, 4)))
    with pytest.raises(DimensionError):
        conv2d_backward(p, cache, np.zeros((1, 1, 3, 3)))


@pytest.mark.parametrize("seed", DRAWS)
def test_conv_backward_finite_diff(seed):
    rng = SeededRng(seed).child("conv")
    k = [1, 3, 5][seed % 3]
    x = rng.normal((2, 2, 6, 6))
    p = rand_conv(rng, 2, 3, k)
    up = rng.normal((2, 3, 6, 6))

    def loss(w=p.weight, b=p.bias, xx=x):
        return (conv2d_forward(Conv2dParams(w, b, p.padding), xx)[0] * up).sum()

    _, cache = conv2d_forward(p, x)
    dx, dw, db = conv2d_backward(p, cache, up)
    assert rel_error(dx, finite_diff_gradient(lambda v: loss(xx=v), x)) < 1e-4
    assert rel_error(dw, finite_diff_gradient(lambda v: loss(w=v), p.weight)) < 1e-4
    assert rel_error(db, finite_diff_gradient(lambda v: loss(b=v), p.bias)) < 1e-4


def test_maxpool_unique_max():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, cache = maxpool2d_forward(x)
    assert y.item() == 4.0
    np.testing.assert_array_equal(maxpool2d_backward(cache, np.ones_like(y))[0, 0], [[0, 0], [0, 1]])


def test_maxpool_tie_goes_to_first():
    x = np.full((1, 1, 2, 2), 7.0)
    y, cache = maxpool2d_forward(x)
    np.testing.assert_array_equal(maxpool2d_backward(cache, np.ones_like(y))[0, 0], [[1, 0], [0, 0]])


def test_maxpool_matches_brute_force():
    x = SeededRng(3).normal((1, 1, 6, 6))
    y, _ = maxpool2d_forward(x)
    ref = np.array([[max(x[0, 0, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1)) for j in range(3)]
                    for i in range(3)])
    np.testing.assert_array_equal(y[0, 0], ref)


def test_maxpool_odd_dims():
    with pytest.raises(DimensionError):
        maxpool2d_forward(np.zeros((1, 1, 5, 4)))


@pytest.mark.parametrize("seed", DRAWS)
def test_maxpool_backward_finite_diff(seed):
    rng = SeededRng(seed).child("pool")
    x = rng.normal((2, 3, 6, 6))
    up = rng.normal((2, 3, 3, 3))
    y, cache = maxpool2d_forward(x)
    fd = finite_diff_gradient(lambda v: (maxpool2d_forward(v)[0] * up).sum(), x)
    assert rel_error(maxpool2d_backward(cache, up), fd) < 1e-4


def test_gap_examples():
    np.testing.assert_array_equal(gap_forward(np.ones((1, 64, 7, 7))), np.ones((1, 64)))
    x = np.zeros((1, 2, 7, 7))
    x[0, 1, 3, 4] = 49.0
    np.testing.assert_array_equal(gap_forward(x), [[0.0, 1.0]])
    with pytest.raises(DimensionError):
        gap_forward(np.zeros((1, 2, 6, 6)))


@pytest.mark.parametrize("seed", DRAWS)
def test_gap_backward_finite_diff(seed):
    rng = SeededRng(seed).child("gap")
    x, up = rng.normal((2, 3, 7, 7)), rng.normal((2, 3))
    fd = finite_diff_gradient(lambda v: (gap_forward(v) * up).sum(), x)
    assert rel_error(gap_backward(up), fd) < 1e-6


def test_linear_examples():
    x = SeededRng(0).normal((3, 4))
    np.testing.assert_array_equal(linear_forward(LinearParams(np.eye(4), np.zeros(4)), x), x)
    b = np.arange(4.0)
    np.testing.assert_array_equal(linear_forward(LinearParams(np.ones((4, 4)), b), np.zeros((2, 4))), [b, b])
    with pytest.raises(DimensionError):
        linear_forward(LinearParams(np.eye(4), np.zeros(4)), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", DRAWS)
def test_linear_backward_finite_diff(seed):
    rng = SeededRng(seed).child("linear")
    p = LinearParams(rng.normal((5, 4)), rng.normal(5))
    x, up = rng.normal((3, 4)), rng.normal((3, 5))
    dx, dw, db = linear_backward(p, x, up)

    def loss(w=p.weight, b=p.bias, xx=x):
        return (linear_forward(LinearParams(w, b), xx) * up).sum()

    assert rel_error(dx, finite_diff_gradient(lambda v: loss(xx=v), x)) < 1e-6
    assert rel_error(dw, finite_diff_gradient(lambda v: loss(w=v), p.weight)) < 1e-6
    assert rel_error(db, finite_diff_gradient(lambda v: loss(b=v), p.bias)) < 1e-6


# ---------------------------------------------------------------- model


def test_zero_network_outputs_head_bias():
    theta = init_params(SeededRng(0))
    for t in theta.tensors().values():
        t.fill(0.0)
    theta.head.bias[:] = np.arange(10.0)
    logits, _ = model_forward(theta, np.zeros((2, 3, 28, 28)))
    np.testing.assert_array_equal(logits, [np.arange(10.0)] * 2)


def test_batch_independence():
    theta = init_params(SeededRng(1))
    x = SeededRng(2).uniform(0, 1, (2, 3, 28, 28))
    both, _ = model_forward(theta, x)
    one = np.concatenate([model_forward(theta, x[i : i + 1])[0] for i in range(2)])
    np.testing.assert_allclose(both, one, rtol=0, atol=1e-12)


def test_model_forward_pure():
    theta = init_params(SeededRng(1))
    x = SeededRng(2).uniform(0, 1, (3, 3, 28, 28))
    np.testing.assert_array_equal(model_forward(theta, x)[0], model_forward(theta, x)[0])


def test_model_rejects_bad_shape():
    with pytest.raises(DimensionError):
        model_forward(init_params(SeededRng(0)), np.zeros((1, 1, 28, 28)))


def random_model(seed):
    rng = SeededRng(seed).child("model")
    theta = init_params(rng.child("init"))
    # nonzero biases so every bias gradient is exercised
    for name, t in theta.tensors().items():
        if name.endswith("bias"):
            t[:] = rng.child(name).uniform(-0.1, 0.1, t.shape)
    x = rng.child("x").uniform(0, 1, (1, 3, 28, 28))
    y = np.array([int(rng.child("y").integers(0, 10))])
    return rng, theta, x, y


@pytest.mark.parametrize("seed", DRAWS)
def test_model_ce_gradient(seed):
    rng, theta, x, y = random_model(seed)

    def loss():
        return cross_entropy(model_forward(theta, x)[0], y)[0]

    logits, cache = model_forward(theta, x)
    grads = model_backward(theta, cache, cross_entropy(logits, y)[1])
    picks, fd = smooth_fd(loss, theta, position_sampler(rng.child("picks"), theta), x)
    analytic = np.array([grads[n].reshape(-1)[i] for n, i in picks])
    assert rel_error(analytic, fd) < 1e-4


# ---------------------------------------------------------------- CAM


def test_cam_zero_weights_uniform():
    theta = init_params(SeededRng(0))
    theta.head.weight[3] = 0.0
    _, cache = model_forward(theta, SeededRng(1).uniform(0, 1, (1, 3, 28, 28)))
    np.testing.assert_allclose(cam(cache, theta.head, 3), np.full((7, 7), 1 / 49), rtol=0, atol=1e-15)


def test_cam_single_channel():
    a = np.zeros((1, 64, 7, 7))
    a[0, 5] = SeededRng(2).normal((7, 7))
    head = LinearParams(np.zeros((10, 64)), np.zeros(10))
    head.weight[2, 5] = 1.0
    s, _ = cam_batch(a, head, [2], eps=0.0)
    pos = np.maximum(a[0, 5], 0)
    np.testing.assert_allclose(s[0], pos / pos.sum(), rtol=1e-14)


def test_cam_class_out_of_range():
    theta = init_params(SeededRng(0))
    _, cache = model_forward(theta, np.zeros((1, 3, 28, 28)))
    with pytest.raises(IndexError):
        cam(cache, theta.head, 10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 9), st.floats(0.01, 100))
def test_cam_scale_invariance(seed, c, alpha):
    rng = SeededRng(seed)
    a = np.maximum(rng.normal((1, 64, 7, 7)), 0)
    head = LinearParams(rng.normal((10, 64)), np.zeros(10))
    s1, _ = cam_batch(a, head, [c], eps=0.0)
    if not (s1 > 0).any():
        return
    head.weight[c] *= alpha
    s2, _ = cam_batch(a, head, [c], eps=0.0)
    np.testing.assert_allclose(s1, s2, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", DRAWS)
def test_cam_kl_gradient_conv3(seed):
    rng, theta, x, y = random_model(seed)
    target = rng.child("target").uniform(0.1, 1, (1, 7, 7))
    target /= target.sum()

    def loss():
        _, cache = model_forward(theta, x)
        return attention_loss(cam_batch(cache.features, theta.head, y)[0], target)[0]

    _, cache = model_forward(theta, x)
    s, ctx = cam_batch(cache.features, theta.head, y)
    dfeat, dhead = cam_backward(ctx, attention_loss(s, target)[1])
    grads = model_backward(theta, cache, None, dfeat, dhead)
    pr = rng.child("picks")

    def draw():
        if pr.uniform(0, 1) < 0.6:
            return "conv3.weight", int(pr.integers(0, theta.conv3.weight.size))
        return "head.weight", int(y[0] * 64 + pr.integers(0, 64))

    picks, fd = smooth_fd(loss, theta, draw, x, y)
    analytic = np.array([grads[n].reshape(-1)[i] for n, i in picks])
    assert rel_error(analytic, fd) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    theta = init_params(SeededRng(5))
    path = save_checkpoint(theta, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    for (k1, v1), (k2, v2) in zip(theta.tensors().items(), loaded.tensors().items()):
        assert k1 == k2
        assert v1.tobytes() == v2.tobytes()
    assert path.read_bytes()[:8] == nn.CKPT_MAGIC


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(nn.CheckpointError):
        load_checkpoint(p)
