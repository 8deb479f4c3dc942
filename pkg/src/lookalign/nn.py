"""LeNet-scale CNN with a global-average-pooling head, written with explicit backprop.

Layout is NCHW float64 throughout. The network is

    conv1 3->16 5x5 pad2, relu, maxpool2   28 -> 14
    conv2 16->32 5x5 pad2, relu, maxpool2  14 -> 7
    conv3 32->64 3x3 pad1, relu            features A: 64x7x7
    GAP -> 64, linear -> 10 logits

Because the head is GAP + linear, the class activation map of class c is the
head-weighted sum of the channels of A, and is differentiable in every weight.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, SeededRng, as_tensor

NUM_CLASSES = 10
CAM_EPS = 1e-6


@dataclass
class Conv2dParams:
    weight: np.ndarray  # out x in x k x k
    bias: np.ndarray
    padding: int

    def __post_init__(self):
        k = self.weight.shape[-1]
        if self.weight.shape[-2] != k or k % 2 == 0 or self.padding != (k - 1) // 2:
            raise DimensionError(f"conv kernel must be odd/square with same padding, got {self.weight.shape}")


@dataclass
class LinearParams:
    weight: np.ndarray  # classes x features
    bias: np.ndarray


@dataclass
class ModelParams:
    conv1: Conv2dParams
    conv2: Conv2dParams
    conv3: Conv2dParams
    head: LinearParams

    def tensors(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name, in a fixed order. Arrays are live references."""
        out = {}
        for name in ("conv1", "conv2", "conv3", "head"):
            layer = getattr(self, name)
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors({k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "ModelParams":
        convs = {
            name: Conv2dParams(t[f"{name}.weight"], t[f"{name}.bias"], (t[f"{name}.weight"].shape[-1] - 1) // 2)
            for name in ("conv1", "conv2", "conv3")
        }
        return cls(**convs, head=LinearParams(t["head.weight"], t["head.bias"]))


def init_params(rng: SeededRng) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""

    def conv(name, cin, cout, k):
        bound = 1.0 / np.sqrt(cin * k * k)
        w = rng.child(name).uniform(-bound, bound, (cout, cin, k, k))
        return Conv2dParams(w, np.zeros(cout), (k - 1) // 2)

    bound = 1.0 / np.sqrt(64)
    head = LinearParams(rng.child("head").uniform(-bound, bound, (NUM_CLASSES, 64)), np.zeros(NUM_CLASSES))
    return ModelParams(conv("conv1", 3, 16, 5), conv("conv2", 16, 32, 5), conv("conv3", 32, 64, 3), head)


# ---------------------------------------------------------------- layers


def conv2d_forward(p: Conv2dParams, x: np.ndarray):
    """Zero-padded stride-1 cross-correlation. Returns (y, cache)."""
    cout, cin, k, _ = p.weight.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise DimensionError(f"conv expects B x {cin} x H x W input, got {x.shape}")
    b, _, h, w = x.shape
    pad = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # cols: (B*H*W, cin*k*k), matching weight.reshape(cout, -1)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, cin, H, W, k, k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, cin * k * k)
    y = cols @ p.weight.reshape(cout, -1).T + p.bias
    y = np.ascontiguousarray(y.reshape(b, h, w, cout).transpose(0, 3, 1, 2))
    return y, (cols, x.shape)


def conv2d_backward(p: Conv2dParams, cache, dy: np.ndarray, need_dx: bool = True):
    """Returns (dX, dW, dB); dX is None when ``need_dx`` is false."""
    cols, xshape = cache
    cout, cin, k, _ = p.weight.shape
    b, _, h, w = xshape
    if dy.shape != (b, cout, h, w):
        raise DimensionError(f"conv backward: dY shape {dy.shape} != {(b, cout, h, w)}")
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dy_mat.T @ cols).reshape(p.weight.shape)
    db = dy_mat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # (cin, k, k, B, H, W) so each kernel offset is a contiguous block
    dcols = (p.weight.reshape(cout, -1).T @ dy_mat.T).reshape(cin, k, k, b, h, w)
    pad = p.padding
    dxp = np.zeros((cin, b, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += dcols[:, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * mask


def maxpool2d_forward(x: np.ndarray, k: int = 2):
    """k x k non-overlapping max; ties go to the first row-major window index."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"maxpool needs dims divisible by {k}, got {h}x{w}")
    win = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // k, w // k, k * k)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape, k)


def maxpool2d_backward(cache, dy: np.ndarray) -> np.ndarray:
    idx, (b, c, h, w), k = cache
    if dy.shape != idx.shape:
        raise DimensionError(f"maxpool backward: dY shape {dy.shape} != {idx.shape}")
    routed = (np.arange(k * k) == idx[..., None]) * dy[..., None]
    return routed.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def gap_forward(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[2:] != (7, 7):
        raise DimensionError(f"GAP expects B x C x 7 x 7, got {x.shape}")
    return x.mean(axis=(2, 3))


def gap_backward(dy: np.ndarray) -> np.ndarray:
    return np.broadcast_to(dy[:, :, None, None] / 49.0, dy.shape + (7, 7)).copy()


def linear_forward(p: LinearParams, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise DimensionError(f"linear expects B x {p.weight.shape[1]}, got {x.shape}")
    return x @ p.weight.T + p.bias


def linear_backward(p: LinearParams, x: np.ndarray, dy: np.ndarray):
    """Returns (dX, dW, dB)."""
    if dy.shape != (x.shape[0], p.weight.shape[0]):
        raise DimensionError(f"linear backward: dY shape {dy.shape}")
    return dy @ p.weight, dy.T @ x, dy.sum(axis=0)


# ---------------------------------------------------------------- model


@dataclass
class ForwardCache:
    conv1: tuple
    relu1: np.ndarray
    pool1: tuple
    conv2: tuple
    relu2: np.ndarray
    pool2: tuple
    conv3: tuple
    relu3: np.ndarray
    features: np.ndarray  # A, B x 64 x 7 x 7
    gap: np.ndarray
    logits: np.ndarray


def model_forward(theta: ModelParams, x: np.ndarray):
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (3, 28, 28):
        raise DimensionError(f"model expects B x 3 x 28 x 28, got {x.shape}")
    h, c1 = conv2d_forward(theta.conv1, x)
    h, r1 = relu_forward(h)
    h, p1 = maxpool2d_forward(h)
    h, c2 = conv2d_forward(theta.conv2, h)
    h, r2 = relu_forward(h)
    h, p2 = maxpool2d_forward(h)
    h, c3 = conv2d_forward(theta.conv3, h)
    a, r3 = relu_forward(h)
    g = gap_forward(a)
    logits = linear_forward(theta.head, g)
    return logits, ForwardCache(c1, r1, p1, c2, r2, p2, c3, r3, a, g, logits)


def model_backward(theta: ModelParams, cache: ForwardCache, dlogits=None, dfeatures=None, dhead_weight=None):
    """Backprop from logits and/or directly from the features A.

    ``dfeatures`` and ``dhead_weight`` carry the CAM path's contributions.
    Returns a dict of gradients keyed like ``ModelParams.tensors()``.
    """
    grads = {}
    da = np.zeros_like(cache.features) if dfeatures is None else dfeatures.copy()
    dw_head = np.zeros_like(theta.head.weight)
    db_head = np.zeros_like(theta.head.bias)
    if dlogits is not None:
        dg, dw_head, db_head = linear_backward(theta.head, cache.gap, dlogits)
        da += gap_backward(dg)
    if dhead_weight is not None:
        dw_head = dw_head + dhead_weight
    grads["head.weight"], grads["head.bias"] = dw_head, db_head

    dh = relu_backward(cache.relu3, da)
    dh, grads["conv3.weight"], grads["conv3.bias"] = conv2d_backward(theta.conv3, cache.conv3, dh)
    dh = maxpool2d_backward(cache.pool2, dh)
    dh = relu_backward(cache.relu2, dh)
    dh, grads["conv2.weight"], grads["conv2.bias"] = conv2d_backward(theta.conv2, cache.conv2, dh)
    dh = maxpool2d_backward(cache.pool1, dh)
    dh = relu_backward(cache.relu1, dh)
    _, grads["conv1.weight"], grads["conv1.bias"] = conv2d_backward(theta.conv1, cache.conv1, dh, need_dx=False)
    return {k: grads[k] for k in theta.tensors()}


# ---------------------------------------------------------------- CAM


@dataclass
class CamContext:
    features: np.ndarray
    head_rows: np.ndarray  # B x 64, weight row of each example's class
    classes: np.ndarray
    active: np.ndarray  # raw > 0
    saliency: np.ndarray
    total: np.ndarray  # normalizer per example


def cam_batch(features: np.ndarray, head: LinearParams, classes, eps: float = CAM_EPS):
    """Normalized CAM for class ``classes[i]`` of example i. Returns (S: B x 7 x 7, ctx)."""
    classes = np.asarray(classes, dtype=np.int64)
    if np.any(classes < 0) or np.any(classes >= head.weight.shape[0]):
        raise IndexError(f"class index out of range: {classes}")
    rows = head.weight[classes]
    raw = np.einsum("bk,bkhw->bhw", rows, features)
    active = raw > 0
    u = np.where(active, raw, 0.0) + eps
    total = u.sum(axis=(1, 2))
    s = u / total[:, None, None]
    return s, CamContext(features, rows, classes, active, s, total)


def cam(cache: ForwardCache, head: LinearParams, c: int, eps: float = CAM_EPS, index: int = 0) -> np.ndarray:
    """7x7 saliency map of class ``c`` for example ``index`` of a cached batch."""
    if not 0 <= c < head.weight.shape[0]:
        raise IndexError(f"class index {c} out of range")
    s, _ = cam_batch(cache.features[index : index + 1], head, [c], eps)
    return s[0]


def cam_backward(ctx: CamContext, ds: np.ndarray):
    """Given dL/dS (B x 7 x 7), return (dL/dA, dL/dhead.weight)."""
    s = ctx.saliency
    du = (ds - (ds * s).sum(axis=(1, 2), keepdims=True)) / ctx.total[:, None, None]
    draw = du * ctx.active
    dfeatures = np.einsum("bk,bhw->bkhw", ctx.head_rows, draw)
    drows = np.einsum("bkhw,bhw->bk", ctx.features, draw)
    dhead = np.zeros((NUM_CLASSES, drows.shape[1]))
    np.add.at(dhead, ctx.classes, drows)
    return dfeatures, dhead


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"LALNCKPT"
CKPT_VERSION = 1


def save_checkpoint(theta: ModelParams, path) -> Path:
    """Little-endian: magic, u32 version, u32 count, then per tensor
    u32 name length, utf-8 name, u32 rank, u32 dims..., float64 data."""
    path = Path(path)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(theta.tensors()))]
    for name, arr in theta.tensors().items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off, tensors = 16, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4 : off + 4 + n].decode()
            off += 4 + n
            (rank,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(dims)) * 8
            if off + size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, "<f8", int(np.prod(dims)), off).astype(np.float64).reshape(dims)
            off += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    return ModelParams.from_tensors(tensors)
