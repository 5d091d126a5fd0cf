"""Dense NCHW tensor kernels with hand-derived backward passes.

Every kernel is a pure function of numpy arrays: no global state, no
in-place mutation of inputs.  Forward/backward pairs are kept explicit so
the graph executor can run backpropagation without an autograd tape.
Double precision is used throughout the test builds; the kernels respect
the dtype of their inputs, so single-precision inference works unchanged.

Gradient convention: each ``*_backward`` receives the upstream gradient of
a scalar objective with respect to the kernel output and returns the
gradients with respect to the inputs (and parameters, where applicable).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

TENSOR_MAGIC = b"TNSR"

# Fixed anti-aliasing kernel: [1,2,1] x [1,2,1] / 16, applied depthwise.
_BLUR_1D = np.array([1.0, 2.0, 1.0])
BLUR_KERNEL = np.outer(_BLUR_1D, _BLUR_1D) / 16.0


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D cross-correlation."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.stride < 1:
            raise ValueError(f"ConvSpec.stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups != 0:
            raise ValueError(
                f"in_channels ({self.in_channels}) not divisible by groups ({self.groups})"
            )
        if self.out_channels % self.groups != 0:
            raise ValueError(
                f"out_channels ({self.out_channels}) not divisible by groups ({self.groups})"
            )

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        h_out = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        w_out = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise ValueError(
                f"kernel {self.kernel_h}x{self.kernel_w} does not fit input {h}x{w} "
                f"with padding {self.padding}"
            )
        return h_out, w_out

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got rank {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"conv input channel dim is {x.shape[1]}, spec expects {spec.in_channels}"
        )
    if w.shape != spec.weight_shape():
        raise ValueError(f"conv weight shape {w.shape} does not match spec {spec.weight_shape()}")


def _pad_batch(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


def _im2col(xp: np.ndarray, spec: ConvSpec, h_out: int, w_out: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded batch -> (N, G, Cig*kh*kw, h_out*w_out) patches."""
    n = xp.shape[0]
    g = spec.groups
    cig = spec.in_channels // g
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, spec.in_channels, spec.kernel_h, spec.kernel_w, h_out, w_out),
        strides=(sn, sc, sh, sw, sh * spec.stride, sw * spec.stride),
    )
    # reshape copies: the window view is not contiguous
    return windows.reshape(n, g, cig * spec.kernel_h * spec.kernel_w, h_out * w_out)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation (no kernel flip) over NCHW input.

    The batched matmul dispatches one GEMM per (sample, group) slice, so
    partitioning the batch across workers reproduces the sequential result
    bit for bit.
    """
    _check_conv_shapes(x, w, spec)
    n, _, h, wd = x.shape
    h_out, w_out = spec.out_hw(h, wd)
    g = spec.groups
    cog = spec.out_channels // g

    cols = _im2col(_pad_batch(x, spec.padding), spec, h_out, w_out)
    w3 = w.reshape(g, cog, -1)
    out = np.matmul(w3, cols).reshape(n, spec.out_channels, h_out, w_out)
    if b is not None:
        if b.shape != (spec.out_channels,):
            raise ValueError(f"conv bias shape {b.shape} != ({spec.out_channels},)")
        out += b.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_forward(x, w, b)) wrt x, w, b."""
    _check_conv_shapes(x, w, spec)
    n, _, h, wd = x.shape
    h_out, w_out = spec.out_hw(h, wd)
    if grad_out.shape != (n, spec.out_channels, h_out, w_out):
        raise ValueError(
            f"grad_out shape {grad_out.shape} != expected {(n, spec.out_channels, h_out, w_out)}"
        )
    g = spec.groups
    cig = spec.in_channels // g
    cog = spec.out_channels // g
    kh, kw = spec.kernel_h, spec.kernel_w
    p, s = spec.padding, spec.stride

    cols = _im2col(_pad_batch(x, p), spec, h_out, w_out)
    go = grad_out.reshape(n, g, cog, h_out * w_out)
    w3 = w.reshape(g, cog, cig * kh * kw)

    grad_w = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    gcols = np.matmul(w3.transpose(0, 2, 1), go).reshape(n, spec.in_channels, kh, kw, h_out, w_out)

    gpad = np.zeros((n, spec.in_channels, h + 2 * p, wd + 2 * p), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            gpad[:, :, ki : ki + s * h_out : s, kj : kj + s * w_out : s] += gcols[:, :, ki, kj]
    grad_x = gpad[:, :, p : p + h, p : p + wd] if p else gpad
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def _blur_weights(channels: int, dtype) -> np.ndarray:
    w = np.zeros((channels, 1, 3, 3), dtype=dtype)
    w[:, 0] = BLUR_KERNEL
    return w


def _blur_spec(channels: int, stride: int) -> ConvSpec:
    return ConvSpec(channels, channels, 3, 3, stride=stride, padding=0, groups=channels)


def _reflect_idx(n: int) -> np.ndarray:
    """Index map for a 1-pixel reflect pad: [-1] -> 1, [n] -> n-2."""
    if n < 2:
        raise ValueError(f"blur needs spatial extent >= 2, got {n}")
    return np.concatenate(([1], np.arange(n), [n - 2]))


def _reflect_pad1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ri = _reflect_idx(x.shape[2])
    ci = _reflect_idx(x.shape[3])
    return x[:, :, ri][:, :, :, ci], ri, ci


def binomial_blur(x: np.ndarray) -> np.ndarray:
    """Stride-1 depthwise 3x3 binomial blur; the low-pass half of blur_pool.

    Uses reflect padding so constant inputs stay constant everywhere,
    including the border.
    """
    c = x.shape[1]
    xp, _, _ = _reflect_pad1(x)
    return conv2d_forward(xp, _blur_weights(c, x.dtype), None, _blur_spec(c, 1))


def blur_pool(x: np.ndarray, stride: int) -> np.ndarray:
    """Anti-aliased downsampling: fixed binomial blur, then subsample.

    The kernel is a constant, never learned.  Output spatial dims are
    ceil(H/stride) x ceil(W/stride).
    """
    if stride < 2:
        raise ValueError(f"blur_pool stride must be >= 2 (got {stride}); it exists to downsample")
    c = x.shape[1]
    xp, _, _ = _reflect_pad1(x)
    return conv2d_forward(xp, _blur_weights(c, x.dtype), None, _blur_spec(c, stride))


def blur_pool_backward(grad_out: np.ndarray, x: np.ndarray, stride: int) -> np.ndarray:
    c = x.shape[1]
    xp, ri, ci = _reflect_pad1(x)
    gpad, _, _ = conv2d_backward(grad_out, xp, _blur_weights(c, x.dtype), _blur_spec(c, stride))
    grad_x = np.zeros_like(x)
    # Scatter padded gradients back through the reflect map.
    np.add.at(grad_x, (slice(None), slice(None), ri[:, None], ci[None, :]), gpad)
    return grad_x


def max_pool(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"max_pool window {k} does not fit input {h}x{w}")
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, c, h_out, w_out, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    return windows.max(axis=(4, 5))


def max_pool_backward(grad_out: np.ndarray, x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Routes each output gradient to the first maximal element of its window."""
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, c, h_out, w_out, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    flat = windows.reshape(n, c, h_out, w_out, k * k)
    arg = flat.argmax(axis=4)
    grad_x = np.zeros_like(x)
    ii, jj = np.divmod(arg, k)
    ns, cs, hs, ws = np.indices((n, c, h_out, w_out), sparse=False)
    np.add.at(grad_x, (ns, cs, hs * stride + ii, ws * stride + jj), grad_out)
    return grad_x


def nearest_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def nearest_upsample_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N,C) spatial mean."""
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return np.broadcast_to(grad_out.reshape(n, c, 1, 1), x.shape) / (h * w)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid exp overflow on large negative inputs.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Takes the forward output y = sigmoid(x), not x."""
    return grad_out * y * (1.0 - y)


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N,F) @ (out,F).T + b -> (N,out).

    Dispatched per sample (broadcasted matmul) so results do not depend on
    batch size.
    """
    if x.ndim != 2:
        raise ValueError(f"fully_connected input must be (N,F), got rank {x.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"fully_connected feature dim {x.shape[1]} != weight dim {w.shape[1]}")
    return np.matmul(x[:, None, :], w.T)[:, 0, :] + b


def fully_connected_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def standardize(x: np.ndarray, axes, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean unit-variance per sample over ``axes``; returns (z, scale).

    Deterministic and batch-size independent: statistics never cross the
    batch dimension.
    """
    mu = x.mean(axis=axes, keepdims=True)
    var = np.square(x - mu).mean(axis=axes, keepdims=True)
    s = np.sqrt(var + eps)
    return (x - mu) / s, s


def standardize_backward(grad_out: np.ndarray, z: np.ndarray, s: np.ndarray, axes) -> np.ndarray:
    """Backward of standardize given its output z and scale s."""
    gm = grad_out.mean(axis=axes, keepdims=True)
    gz = (grad_out * z).mean(axis=axes, keepdims=True)
    return (grad_out - gm - z * gz) / s


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last (class) axis, max-subtracted for stability."""
    if logits.shape[-1] == 0:
        raise ValueError("softmax over an empty class axis")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Takes the forward output p = softmax(z)."""
    dot = (grad_out * p).sum(axis=-1, keepdims=True)
    return p * (grad_out - dot)


# ---------------------------------------------------------------------------
# Serialization: little-endian "TNSR" blobs, f32 payload.
# ---------------------------------------------------------------------------

def write_tensor(fh, arr: np.ndarray):
    """Append one tensor blob: magic, u32 rank, u32 extents, f32 payload."""
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def assert_finite(arr: np.ndarray, context: str = "tensor"):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {context}")
