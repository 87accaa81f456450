"""Forward numerical operators on NCHW arrays.

Bilinear/nearest upsampling, 2-D convolution (dense, atrous, grouped),
batch normalization, ReLU, adaptive average pooling, elementwise add.
Everything is float64-friendly pure numpy; the autodiff layer wraps these
and reuses the same interpolation/convolution plans for exact adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidRatioError, ShapeError
from .tensor import Moments, _check_nchw

BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# upsampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UpsampleMode:
    kernel: str = "bilinear"          # "bilinear" | "nearest"
    align_corners: bool = False


@lru_cache(maxsize=None)
def _axis_plan(n_in: int, n_out: int, kernel: str, align_corners: bool):
    """Per-axis interpolation plan: output i reads src[i0]*(1-t) + src[i1]*t.

    align_corners=False uses half-pixel centers with edge-clamped reads,
    align_corners=True maps i -> i*(n_in-1)/(n_out-1).
    """
    i = np.arange(n_out, dtype=np.float64)
    if kernel == "nearest":
        idx = np.minimum((np.floor((i + 0.5) * n_in / n_out)).astype(np.intp), n_in - 1)
        return idx, idx, np.zeros(n_out)
    if kernel != "bilinear":
        raise ValueError(f"unknown upsampling kernel {kernel!r}")
    if align_corners:
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(n_out)
    else:
        src = (i + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    return i0, i1, t


def _interp_axis(x: np.ndarray, plan, axis: int) -> np.ndarray:
    i0, i1, t = plan
    shape = [1] * x.ndim
    shape[axis] = t.size
    t = t.reshape(shape)
    return np.take(x, i0, axis=axis) * (1.0 - t) + np.take(x, i1, axis=axis) * t


def _interp_axis_adjoint(g: np.ndarray, plan, axis: int, n_in: int) -> np.ndarray:
    """Exact transpose of _interp_axis: scatter each output gradient onto
    its <=2 source pixels with the same interpolation weights."""
    i0, i1, t = plan
    g = np.moveaxis(g, axis, 0)
    shape = [1] * g.ndim
    shape[0] = t.size
    t = t.reshape(shape)
    out = np.zeros((n_in,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, i0, g * (1.0 - t))
    np.add.at(out, i1, g * t)
    return np.moveaxis(out, 0, axis)


def _axis_matrix(n_in: int, n_out: int, kernel: str, align_corners: bool) -> np.ndarray:
    """Dense (n_out, n_in) matrix of the per-axis interpolation map."""
    i0, i1, t = _axis_plan(n_in, n_out, kernel, align_corners)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m


def _out_size(n: int, r) -> int:
    return int(round(r * n))


def upsample(x: np.ndarray, r, mode: UpsampleMode = UpsampleMode()) -> np.ndarray:
    """r-times upsampling (r >= 1); r == 1 is the identity."""
    _check_nchw(x)
    if r < 1:
        raise InvalidRatioError(f"upsampling ratio must be >= 1, got {r}")
    if r == 1:
        return x
    h, w = x.shape[2], x.shape[3]
    return upsample_to(x, (_out_size(h, r), _out_size(w, r)), mode)


def upsample_to(x: np.ndarray, out_hw, mode: UpsampleMode = UpsampleMode()) -> np.ndarray:
    """Upsample to an explicit output size (avoids rounding ambiguity)."""
    _check_nchw(x)
    h, w = x.shape[2], x.shape[3]
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < h or ow < w:
        raise InvalidRatioError(f"output size {(oh, ow)} below input {(h, w)}")
    if (oh, ow) == (h, w):
        return x
    y = _interp_axis(x, _axis_plan(h, oh, mode.kernel, mode.align_corners), axis=2)
    return _interp_axis(y, _axis_plan(w, ow, mode.kernel, mode.align_corners), axis=3)


def upsample_moments(x: np.ndarray, out_hw, mode: UpsampleMode = UpsampleMode()) -> Moments:
    """Moments of upsample_to(x, out_hw, mode) without materializing the
    output, via the Gram identity of the separable linear map
    y = A_h X A_w^T:  sum(y^2) = sum((A_h^T A_h) X (A_w^T A_w) * X).
    """
    _check_nchw(x)
    n, c, h, w = x.shape
    oh, ow = int(out_hw[0]), int(out_hw[1])
    ah = _axis_matrix(h, oh, mode.kernel, mode.align_corners)
    aw = _axis_matrix(w, ow, mode.kernel, mode.align_corners)
    gh = ah.T @ ah
    gw = aw.T @ aw
    sh = ah.sum(axis=0)
    sw = aw.sum(axis=0)
    maps = np.asarray(x, dtype=np.float64).reshape(n * c, h, w)
    total = float(np.einsum("h,mhw,w->", sh, maps, sw))
    sumsq = float(np.sum((gh @ maps @ gw) * maps))
    count = n * c * oh * ow
    mean = total / count
    return Moments(mean, sumsq / count - mean * mean, count)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    """Weights and hyperparameters of one 2-D convolution.

    padding=None means "same" for the given dilation (stride-1 preserving);
    pad_value may be a scalar or a per-input-channel vector (used by the
    calibrated equalizer to pad each branch with its own global mean).
    """

    weight: np.ndarray                    # (Cout, Cin/groups, kh, kw)
    bias: np.ndarray | None = None        # (Cout,)
    stride: int = 1
    dilation: int = 1
    padding: int | None = None
    groups: int = 1
    pad_value: float | np.ndarray = 0.0


def same_padding(kernel: int, dilation: int = 1) -> int:
    return ((kernel - 1) * dilation) // 2


def _pad_input(x: np.ndarray, pad: int, pad_value) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    xp = np.empty((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    pv = np.asarray(pad_value, dtype=x.dtype)
    if pv.ndim == 1:
        xp[:] = pv.reshape(1, c, 1, 1)
    else:
        xp[:] = pv
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def _conv_geometry(x_shape, w_shape, stride, dilation, padding):
    n, c, h, w = x_shape
    cout, cin_g, kh, kw = w_shape
    pad = same_padding(kh, dilation) if padding is None else int(padding)
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    ho = (h + 2 * pad - eh) // stride + 1
    wo = (w + 2 * pad - ew) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {w_shape[2:]} too large for input {x_shape[2:]}")
    return pad, eh, ew, ho, wo


def _windows(xp: np.ndarray, eh, ew, stride, dilation):
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation with dilation and groups."""
    _check_nchw(x)
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = p.weight.shape
    if c != cin_g * p.groups:
        raise ShapeError(
            f"input channels {c} incompatible with weight {p.weight.shape} "
            f"and groups {p.groups}")
    if cout % p.groups != 0:
        raise ShapeError("out channels must be divisible by groups")
    pad, eh, ew, ho, wo = _conv_geometry(x.shape, p.weight.shape,
                                         p.stride, p.dilation, p.padding)
    xp = _pad_input(x, pad, p.pad_value)
    y = np.empty((n, cout, ho, wo), dtype=x.dtype)
    if kh == 1 and kw == 1 and p.stride == 1 and p.groups == 1:
        # 1x1 fast path: a single channel-mixing matmul
        np.einsum("oc,nchw->nohw", p.weight.reshape(cout, c), xp,
                  out=y, optimize=True)
    else:
        win = _windows(xp, eh, ew, p.stride, p.dilation)
        og = cout // p.groups
        for g in range(p.groups):
            wg = p.weight[g * og:(g + 1) * og]
            for i in range(n):
                # (Cin/g, Ho, Wo, kh, kw) x (og, Cin/g, kh, kw) -> (Ho, Wo, og)
                yg = np.tensordot(win[i, g * cin_g:(g + 1) * cin_g], wg,
                                  axes=([0, 3, 4], [1, 2, 3]))
                y[i, g * og:(g + 1) * og] = np.moveaxis(yg, 2, 0)
    if p.bias is not None:
        y += np.asarray(p.bias, dtype=y.dtype).reshape(1, cout, 1, 1)
    return y


def conv2d_reference(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Naive direct-sum convolution used as an oracle in tests."""
    _check_nchw(x)
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = p.weight.shape
    pad, _, _, ho, wo = _conv_geometry(x.shape, p.weight.shape,
                                       p.stride, p.dilation, p.padding)
    xp = _pad_input(x, pad, p.pad_value)
    og = cout // p.groups
    y = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            g = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for cc in range(cin_g):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (p.weight[o, cc, u, v]
                                        * xp[b, g * cin_g + cc,
                                             i * p.stride + u * p.dilation,
                                             j * p.stride + v * p.dilation])
                    y[b, o, i, j] = acc
            if p.bias is not None:
                y[b, o] += p.bias[o]
    return y.astype(x.dtype)


# ---------------------------------------------------------------------------
# batch normalization / activation / pooling / add
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = BN_EPS
    mode: str = "batch-stats"             # "batch-stats" | "running-stats"

    @classmethod
    def identity_init(cls, channels: int, eps: float = BN_EPS,
                      mode: str = "batch-stats") -> "BatchNormParams":
        return cls(gamma=np.ones(channels), beta=np.zeros(channels),
                   running_mean=np.zeros(channels), running_var=np.ones(channels),
                   eps=eps, mode=mode)


def batchnorm(x: np.ndarray, p: BatchNormParams) -> np.ndarray:
    """Per-channel (x - mu)/sqrt(var + eps) * gamma + beta."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if len(p.gamma) != c or len(p.beta) != c:
        raise ShapeError(f"batchnorm params sized for {len(p.gamma)} channels, "
                         f"input has {c}")
    if p.mode == "batch-stats":
        if n * h * w < 2:
            raise ShapeError("batch-stats mode needs N*H*W >= 2 per channel")
        mu = x.mean(axis=(0, 2, 3))
        var = np.square(x - mu.reshape(1, c, 1, 1)).mean(axis=(0, 2, 3))
    elif p.mode == "running-stats":
        mu = np.asarray(p.running_mean)
        var = np.asarray(p.running_var)
    else:
        raise ValueError(f"unknown batchnorm mode {p.mode!r}")
    scale = np.asarray(p.gamma) / np.sqrt(var + p.eps)
    shift = np.asarray(p.beta) - mu * scale
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _pool_bounds(n_in: int, n_out: int):
    i = np.arange(n_out)
    lo = (i * n_in) // n_out
    hi = -(-((i + 1) * n_in) // n_out)      # ceil
    return lo, hi


def avgpool_to(x: np.ndarray, out_size) -> np.ndarray:
    """Adaptive average pooling: output cell (i, j) averages the input
    window [floor(i*H/h), ceil((i+1)*H/h)) x the same along width."""
    _check_nchw(x)
    n, c, h, w = x.shape
    oh, ow = int(out_size[0]), int(out_size[1])
    if oh > h or ow > w:
        raise ShapeError(f"pool output {(oh, ow)} exceeds input {(h, w)}")
    if (oh, ow) == (h, w):
        return x
    rlo, rhi = _pool_bounds(h, oh)
    clo, chi = _pool_bounds(w, ow)
    y = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            y[:, :, i, j] = x[:, :, rlo[i]:rhi[i], clo[j]:chi[j]].mean(axis=(2, 3))
    return y


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"add needs identical shapes, got {x.shape} vs {y.shape}")
    return x + y
