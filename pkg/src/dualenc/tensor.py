"""Dense numeric substrate: the handful of layers the towers are built from.

Arrays are plain row-major ``numpy.ndarray`` objects in either float32 (training)
or float64 (gradient checks). Every layer has a pure forward function, a matching
backward function, and a thin stateful wrapper that records the activations the
backward pass needs.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError, StateError

PRECISIONS = {"float32": np.float32, "float64": np.float64, 32: np.float32, 64: np.float64}


def resolve_dtype(precision):
    if isinstance(precision, np.dtype) or precision in (np.float32, np.float64):
        return np.dtype(precision).type
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; use float32 or float64") from None


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    def zero_grad(self):
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0

    def copy(self):
        return LayerParams(self.weights.copy(), self.bias.copy())

    @property
    def dtype(self):
        return self.weights.dtype


def frame_mask(valid, n_frames):
    """Boolean (B, T) mask, True on real frames."""
    valid = np.asarray(valid)
    return np.arange(n_frames)[None, :] < valid[:, None]


# -- dense -------------------------------------------------------------------

def dense_forward(x, p):
    x = np.asarray(x, dtype=p.dtype)
    if x.ndim != 2 or p.weights.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise DimensionError(
            f"dense: input shape {x.shape} incompatible with weights {p.weights.shape}")
    check_finite(x, "dense input")
    y = x @ p.weights + p.bias
    return check_finite(y, "dense output")


def dense_backward(x, p, grad_out):
    """Accumulate parameter gradients into ``p``; return the input gradient."""
    p.grad_weights += x.T @ grad_out
    p.grad_bias += grad_out.sum(axis=0)
    return check_finite(grad_out @ p.weights.T, "dense input gradient")


# -- conv1d ------------------------------------------------------------------

def _pad_amounts(kernel, padding):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        left = (kernel - 1) // 2
        return left, kernel - 1 - left
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv1d_output_length(n_frames, kernel, stride=1, padding="same"):
    left, right = _pad_amounts(kernel, padding)
    padded = n_frames + left + right
    if kernel > padded:
        raise DimensionError(
            f"conv1d: kernel width {kernel} exceeds padded input length {padded}")
    return (padded - kernel) // stride + 1


def conv1d_valid_frames(valid, stride=1, padding="same", out_frames=None):
    """Valid output frames: those whose window starts on a real input frame."""
    out = -(-np.asarray(valid) // stride)
    if out_frames is not None:
        out = np.minimum(out, out_frames)
    return out


def _im2col(x, kernel, stride, padding):
    b, t, d = x.shape
    left, right = _pad_amounts(kernel, padding)
    t_out = conv1d_output_length(t, kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
    idx = np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :]
    cols = xp[:, idx, :].reshape(b * t_out, kernel * d)
    return cols, idx, xp.shape[1], t_out


def conv1d_forward(x, p, stride=1, padding="same"):
    """x: (B, T, Din), weights: (k, Din, Dout) -> (B, T', Dout)."""
    y, _ = _conv1d_apply(x, p, stride, padding)
    return y


def _conv1d_apply(x, p, stride, padding):
    x = np.asarray(x, dtype=p.dtype)
    if x.ndim != 3 or p.weights.ndim != 3 or x.shape[2] != p.weights.shape[1]:
        raise DimensionError(
            f"conv1d: input shape {x.shape} incompatible with kernel {p.weights.shape}")
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    k, din, dout = p.weights.shape
    cols, idx, padded_len, t_out = _im2col(x, k, stride, padding)
    y = cols @ p.weights.reshape(k * din, dout) + p.bias
    y = y.reshape(x.shape[0], t_out, dout)
    return check_finite(y, "conv1d output"), (cols, idx, padded_len, x.shape)


def conv1d_backward(cache, p, grad_out, padding="same"):
    cols, idx, padded_len, x_shape = cache
    b, t, d = x_shape
    k, din, dout = p.weights.shape
    g = grad_out.reshape(-1, dout)
    p.grad_weights += (cols.T @ g).reshape(k, din, dout)
    p.grad_bias += g.sum(axis=0)
    gcols = (g @ p.weights.reshape(k * din, dout).T).reshape(b, idx.shape[0], k, d)
    gxp = np.zeros((b, padded_len, d), dtype=grad_out.dtype)
    t_out, stride = idx.shape[0], (idx[1, 0] - idx[0, 0] if idx.shape[0] > 1 else 1)
    for j in range(k):
        # within one kernel offset the touched frames are distinct, so += is a true scatter-add
        gxp[:, j:j + stride * (t_out - 1) + 1:stride] += gcols[:, :, j]
    left, _ = _pad_amounts(k, padding)
    return check_finite(gxp[:, left:left + t, :], "conv1d input gradient")


# -- elementwise and reductions ------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def residual_add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"residual_add: shapes {a.shape} and {b.shape} differ")
    return a + b


def mean_pool_time(x, valid=None):
    """Mean over the time axis of (B, T, D), counting only the first ``valid[b]`` frames."""
    b, t, _ = x.shape
    if valid is None:
        valid = np.full(b, t)
    valid = np.asarray(valid)
    if np.any(valid <= 0):
        raise DegenerateInputError("mean_pool_time: an example has no valid frames")
    mask = frame_mask(valid, t)[:, :, None]
    # select rather than multiply so padded positions cannot leak, not even inf/nan
    summed = np.where(mask, x, 0).sum(axis=1)
    return summed / valid[:, None].astype(x.dtype)


def mean_pool_time_backward(grad_out, valid, n_frames):
    valid = np.asarray(valid)
    mask = frame_mask(valid, n_frames).astype(grad_out.dtype)
    scale = (grad_out / valid[:, None].astype(grad_out.dtype))
    return mask[:, :, None] * scale[:, None, :]


# -- stateful wrappers ---------------------------------------------------------

class Layer:
    """Base for layers with recorded activations."""

    _cache = None

    def params(self):
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Dense(Layer):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32, init="glorot"):
        if init == "identity":
            if d_in != d_out:
                raise DimensionError(f"identity init needs square weights, got {d_in}x{d_out}")
            w = np.eye(d_in, dtype=dtype)
        else:
            w = glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype)
        self.p = LayerParams(w, np.zeros(d_out, dtype=dtype))

    def params(self):
        return {"": self.p}

    def forward(self, x):
        x = np.asarray(x, dtype=self.p.dtype)
        y = dense_forward(x, self.p)
        self._cache = x
        return y

    def backward(self, grad_out):
        return dense_backward(self._take_cache(), self.p, grad_out)


class Conv1d(Layer):
    def __init__(self, d_in, d_out, kernel, stride=1, padding="same", rng=None,
                 dtype=np.float32, init="glorot"):
        self.stride = stride
        self.padding = padding
        if init == "identity":
            if d_in != d_out or kernel != 1:
                raise DimensionError("identity conv init needs kernel 1 and d_in == d_out")
            w = np.eye(d_in, dtype=dtype)[None]
        else:
            w = glorot_uniform(rng, (kernel, d_in, d_out), kernel * d_in, kernel * d_out, dtype)
        self.p = LayerParams(w, np.zeros(d_out, dtype=dtype))

    @property
    def kernel(self):
        return self.p.weights.shape[0]

    def params(self):
        return {"": self.p}

    def forward(self, x):
        y, self._cache = _conv1d_apply(x, self.p, self.stride, self.padding)
        return y

    def backward(self, grad_out):
        return conv1d_backward(self._take_cache(), self.p, grad_out, self.padding)


class ReLU(Layer):
    def forward(self, x):
        self._cache = x
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(self._take_cache(), grad_out)


class MaskedMeanPool(Layer):
    def forward(self, x, valid=None):
        if valid is None:
            valid = np.full(x.shape[0], x.shape[1])
        y = mean_pool_time(x, valid)
        self._cache = (np.asarray(valid), x.shape[1])
        return y

    def backward(self, grad_out):
        valid, n_frames = self._take_cache()
        return mean_pool_time_backward(grad_out, valid, n_frames)
