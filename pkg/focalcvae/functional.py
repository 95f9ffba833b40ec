"""Neural-network kernels on top of :mod:`focalcvae.tensor`.

softmax, GELU, layer normalization, 2-D convolution, partial convolution and
differentiable bilinear sampling. Images are unbatched ``[C, H, W]`` arrays;
sampling coordinates are ``(x, y)`` pairs in normalized ``[-1, 1]`` units
where -1 is the centre of the first pixel and +1 the centre of the last.
"""

import math
from typing import Optional, Tuple

import numpy as np
from scipy.special import erf

from focalcvae import counters
from focalcvae.errors import DimensionError, UsageError
from focalcvae.tensor import Function, Tensor, concat

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_GELU_TANH_COEF = 0.044715
LAYER_NORM_EPS = 1e-5


class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        counters.record("softmax", 5 * x.size)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class Gelu(Function):
    def forward(self, x, approximate):
        self.x, self.approximate = x, approximate
        if approximate == "tanh":
            self.t = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_TANH_COEF * x**3))
            return 0.5 * x * (1.0 + self.t)
        self.cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        return x * self.cdf

    def backward(self, grad):
        x = self.x
        if self.approximate == "tanh":
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_TANH_COEF * x * x)
            return (grad * (0.5 * (1.0 + self.t) + 0.5 * x * (1.0 - self.t * self.t) * du),)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (self.cdf + x * pdf),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    return Softmax.apply(x, axis=axis)


def gelu(x: Tensor, approximate: str = "none") -> Tensor:
    """GELU; ``approximate="none"`` is the exact erf form, ``"tanh"`` the approximation."""
    if approximate not in ("none", "tanh"):
        raise UsageError(f"unknown GELU variant {approximate!r}")
    return Gelu.apply(x, approximate=approximate)


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, axis: int = -1) -> Tensor:
    centered = x - x.mean(axis=axis, keepdims=True)
    var = (centered * centered).mean(axis=axis, keepdims=True)
    out = centered * (var + LAYER_NORM_EPS) ** -0.5
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation of a ``[C_in, H, W]`` map with ``[C_out, C_in, kh, kw]`` weights."""

    def forward(self, x, w, b=None, *, stride, pad):
        if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
            raise DimensionError("conv2d expects x[C_in,H,W] and w[C_out,C_in,kh,kw]", x.shape, w.shape)
        c_in, h, wd = x.shape
        c_out, _, kh, kw = w.shape
        ho = conv_output_extent(h, kh, stride, pad)
        wo = conv_output_extent(wd, kw, stride, pad)
        if ho <= 0 or wo <= 0:
            raise DimensionError("conv2d output extent is not positive", x.shape, w.shape)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = np.empty((c_in, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
        out = np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2]))
        if b is not None:
            out = out + b[:, None, None]
        counters.record("conv2d", 2 * c_in * c_out * kh * kw * ho * wo)
        self.cols, self.w, self.xp_shape = cols, w, xp.shape
        self.stride, self.pad, self.in_hw = stride, pad, (h, wd)
        self.has_bias = b is not None
        return out

    def backward(self, grad):
        s, p = self.stride, self.pad
        _, kh, kw, ho, wo = self.cols.shape
        gw = np.tensordot(grad, self.cols, axes=([1, 2], [3, 4]))
        gcols = np.tensordot(self.w, grad, axes=([0], [0]))
        gxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, i, j]
        h, wd = self.in_hw
        gx = gxp[:, p : p + h, p : p + wd]
        if self.has_bias:
            return gx, gw, grad.sum(axis=(1, 2))
        return gx, gw


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """``H' = floor((H + 2*pad - kh) / stride) + 1``."""
    if b is None:
        return Conv2d.apply(x, w, stride=stride, pad=pad)
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


def partial_channels(channels: int, p_ratio: float) -> int:
    if not 0.0 < p_ratio <= 1.0:
        raise UsageError(f"p_ratio must lie in (0, 1], got {p_ratio}")
    c_p = int(round(channels * p_ratio))
    if c_p < 1:
        raise UsageError(f"p_ratio {p_ratio} leaves no convolved channel out of {channels}")
    return c_p


def pconv(x: Tensor, w: Tensor, p_ratio: float, b: Optional[Tensor] = None) -> Tensor:
    """Partial convolution: 3x3 same-padding conv on the first ``c_p`` channels.

    The remaining channels pass through untouched.
    """
    c_p = partial_channels(x.shape[0], p_ratio)
    if w.shape[0] != c_p or w.shape[1] != c_p:
        raise DimensionError(f"pconv weight must be [{c_p},{c_p},k,k]", w.shape)
    pad = w.shape[-1] // 2
    if c_p == x.shape[0]:
        return conv2d(x, w, b, stride=1, pad=pad)
    head = conv2d(x[:c_p], w, b, stride=1, pad=pad)
    return concat([head, x[c_p:]], axis=0)


def _pixel_coords(g: np.ndarray, extent: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Corner indices, interpolation weight and d(weight)/d(g) along one axis."""
    inside = (g >= -1.0) & (g <= 1.0)
    if extent == 1:
        zero = np.zeros(g.shape, dtype=np.int64)
        return zero, zero, np.zeros_like(g), np.zeros_like(g)
    scale = 0.5 * (extent - 1)
    pos = (np.clip(g, -1.0, 1.0) + 1.0) * scale
    lo = np.clip(np.floor(pos).astype(np.int64), 0, extent - 2)
    frac = (pos - lo).astype(g.dtype)
    return lo, lo + 1, frac, np.where(inside, scale, 0.0).astype(g.dtype)


class BilinearSample(Function):
    def forward(self, x, pts):
        if x.ndim != 3 or pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionError("bilinear_sample expects x[C,H,W] and pts[P,2]", x.shape, pts.shape)
        _, h, w = x.shape
        x0, x1, wx, dwx = _pixel_coords(pts[:, 0], w)
        y0, y1, wy, dwy = _pixel_coords(pts[:, 1], h)
        v00, v01 = x[:, y0, x0].T, x[:, y0, x1].T
        v10, v11 = x[:, y1, x0].T, x[:, y1, x1].T
        wx_, wy_ = wx[:, None], wy[:, None]
        self.saved = (x.shape, x.dtype, x0, x1, y0, y1, wx_, wy_, dwx, dwy, v00, v01, v10, v11)
        top = v00 * (1.0 - wx_) + v01 * wx_
        bottom = v10 * (1.0 - wx_) + v11 * wx_
        return top * (1.0 - wy_) + bottom * wy_

    def backward(self, grad):
        shape, dtype, x0, x1, y0, y1, wx, wy, dwx, dwy, v00, v01, v10, v11 = self.saved
        gx = np.zeros((shape[1], shape[2], shape[0]), dtype=dtype)
        np.add.at(gx, (y0, x0), grad * ((1.0 - wy) * (1.0 - wx)))
        np.add.at(gx, (y0, x1), grad * ((1.0 - wy) * wx))
        np.add.at(gx, (y1, x0), grad * (wy * (1.0 - wx)))
        np.add.at(gx, (y1, x1), grad * (wy * wx))
        d_wx = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_wy = (1.0 - wx) * (v10 - v00) + wx * (v11 - v01)
        gpts = np.stack([(grad * d_wx).sum(axis=1) * dwx, (grad * d_wy).sum(axis=1) * dwy], axis=1)
        return np.transpose(gx, (2, 0, 1)), gpts.astype(dtype)


def bilinear_sample(x: Tensor, pts: Tensor) -> Tensor:
    """Sample ``x[C,H,W]`` at ``pts[P,2]`` (normalized ``(x, y)``) -> ``[P, C]``.

    Out-of-range coordinates are clamped to the border.
    """
    return BilinearSample.apply(x, pts)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError("mse operands differ in shape", pred.shape, target.shape)
    diff = pred - target
    return (diff * diff).mean()
