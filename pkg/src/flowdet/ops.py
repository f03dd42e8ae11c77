"""Dense NCHW kernels: convolution, batch norm, warping, resampling.

All kernels accumulate in float64 and store results in the input dtype.
Accumulation order is fixed, so repeated runs are bit-identical regardless
of thread count.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_op


class MacCounter:
    """Counts multiply-accumulate operations issued by conv2d / fc kernels.

    Enabled only in debug/verification runs; used to cross-check the static
    cost analyzer against what the kernels actually execute.
    """

    def __init__(self):
        self.enabled = False
        self.macs = 0

    def reset(self):
        self.macs = 0

    def add(self, n):
        if self.enabled:
            self.macs += int(n)


MAC_COUNTER = MacCounter()


@dataclass
class ConvParams:
    """Convolution filter bank: weight (out_c, in_c/groups, kh, kw)."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel(self):
        return self.weight.shape[2:]


@dataclass
class BnParams:
    """Inference-mode batch norm: y = (x - mean)/sqrt(var + eps) * gamma + beta."""

    gamma: Tensor
    beta: Tensor
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5


def conv_output_hw(h, w, kernel, stride, padding):
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    return oh, ow


def _check_4d(x, who):
    if x.ndim != 4:
        raise ValueError(f"{who}: expected 4-D NCHW tensor, got shape {x.shape}")


def _im2col(xp, kh, kw, stride, oh, ow):
    """(N, C, Hp, Wp) -> (N, C, kh, kw, oh, ow) via strided slicing."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def _col2im(dcols, xp_shape, stride):
    """Adjoint of `_im2col`: scatter-add patches back onto the padded input."""
    n, c, kh, kw, oh, ow = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x, params: ConvParams):
    """Direct 2-D convolution (cross-correlation) with grouping.

    Depthwise convolution is groups == in_c == out_c.  Output spatial dims
    are floor((in + 2*pad - k)/stride) + 1 and must be >= 1.
    """
    x = as_tensor(x)
    _check_4d(x, "conv2d")
    w = params.weight
    n, c, h, wd = x.shape
    oc, icg, kh, kw = w.shape
    g = params.groups
    if c != icg * g or oc % g != 0:
        raise ValueError(
            f"conv2d: input shape {x.shape} incompatible with weight {w.shape} (groups={g})"
        )
    stride, pad = params.stride, params.padding
    oh, ow = conv_output_hw(h, wd, kh, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: output would be empty for input {x.shape}, kernel {w.shape}")

    MAC_COUNTER.add(n * oh * ow * oc * icg * kh * kw)

    xd = x.data.astype(np.float64, copy=False)
    wdat = w.data.astype(np.float64, copy=False)
    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd

    depthwise = g == c and oc == c and icg == 1
    if depthwise:
        out = np.zeros((n, c, oh, ow), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                out += (
                    xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    * wdat[:, 0, i, j][None, :, None, None]
                )
        cols = None
    elif g == 1 and kh == 1 and kw == 1 and stride == 1 and pad == 0:
        # pointwise fast path: a channel matmul
        out = np.einsum("oi,nihw->nohw", wdat[:, :, 0, 0], xd, optimize=True)
        cols = None
    else:
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        ocg = oc // g
        colsg = cols.reshape(n, g, icg * kh * kw, oh * ow)
        wg = wdat.reshape(g, ocg, icg * kh * kw)
        out = np.einsum("gok,ngkp->ngop", wg, colsg, optimize=True).reshape(n, oc, oh, ow)

    out = out.astype(x.dtype)
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]

    def backward(up):
        up64 = up.astype(np.float64, copy=False)
        if depthwise:
            dw = np.zeros_like(wdat)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    dw[:, 0, i, j] = (up64 * sl).sum(axis=(0, 2, 3))
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        up64 * wdat[:, 0, i, j][None, :, None, None]
                    )
        elif cols is None:
            dw = np.einsum("nohw,nihw->oi", up64, xd, optimize=True)[:, :, None, None]
            dxp = np.einsum("oi,nohw->nihw", wdat[:, :, 0, 0], up64, optimize=True)
        else:
            ocg = oc // g
            upg = up64.reshape(n, g, ocg, oh * ow)
            colsg = cols.reshape(n, g, icg * kh * kw, oh * ow)
            dw = np.einsum("ngop,ngkp->gok", upg, colsg, optimize=True).reshape(oc, icg, kh, kw)
            wg = wdat.reshape(g, ocg, icg * kh * kw)
            dcols = np.einsum("gok,ngop->ngkp", wg, upg, optimize=True)
            dcols = dcols.reshape(n, c, kh, kw, oh, ow)
            dxp = _col2im(dcols, xp.shape, stride)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        grads = [dx, dw]
        if params.bias is not None:
            grads.append(up64.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) + ((params.bias,) if params.bias is not None else ())
    return make_op(out, inputs, backward)


def batch_norm(x, params: BnParams):
    """Per-channel normalization with frozen statistics (inference mode)."""
    x = as_tensor(x)
    _check_4d(x, "batch_norm")
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ValueError(f"batch_norm: channel mismatch input {x.shape} vs gamma {params.gamma.shape}")
    if params.eps < 0 or np.any(params.var + params.eps <= 0):
        raise ValueError("batch_norm: var + eps must be positive per channel")
    inv = (1.0 / np.sqrt(params.var.astype(np.float64) + params.eps)).astype(x.dtype)
    xn = (x.data - params.mean[None, :, None, None]) * inv[None, :, None, None]
    out = xn * params.gamma.data[None, :, None, None] + params.beta.data[None, :, None, None]

    def backward(up):
        dx = up * (params.gamma.data * inv)[None, :, None, None]
        dgamma = (up * xn).sum(axis=(0, 2, 3))
        dbeta = up.sum(axis=(0, 2, 3))
        return dx, dgamma, dbeta

    return make_op(out, (x, params.gamma, params.beta), backward)


def leaky_relu(x, slope=0.1):
    x = as_tensor(x)
    mask = x.data >= 0
    out = np.where(mask, x.data, slope * x.data)
    return make_op(out, (x,), lambda up: (up * np.where(mask, 1.0, slope),))


def nearest_upsample_2x(x):
    """Each output pixel copies input pixel (floor(y/2), floor(x/2))."""
    x = as_tensor(x)
    _check_4d(x, "nearest_upsample_2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(up):
        n, c, h2, w2 = up.shape
        return (up.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward)


def concat_channels(*tensors):
    """Stack along the channel axis; all inputs share (n, h, w)."""
    if not tensors:
        raise ValueError("concat_channels: need at least one input")
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0],) + t.shape[2:] != (base[0],) + base[2:]:
            raise ValueError(f"concat_channels: spatial mismatch {base} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(up):
        return np.split(up, splits, axis=1)

    return make_op(out, tuple(tensors), backward)


def crop_spatial(x, h, w):
    """Keep the top-left (h, w) window; adjoint zero-pads."""
    x = as_tensor(x)
    if h > x.shape[2] or w > x.shape[3]:
        raise ValueError(f"crop_spatial: target ({h}, {w}) exceeds input {x.shape}")
    if (h, w) == x.shape[2:]:
        return x
    out = x.data[:, :, :h, :w]

    def backward(up):
        dx = np.zeros(x.shape, dtype=up.dtype)
        dx[:, :, :h, :w] = up
        return (dx,)

    return make_op(out, (x,), backward)


def bilinear_warp(feature, flow):
    """Backward warp: out(p) = bilinear sample of `feature` at p + flow(p).

    `flow` is (n, 2, h, w) with channel 0 = dx, channel 1 = dy, measured in
    pixels of the feature grid.  Taps falling outside the grid contribute
    zero (zero-padding rule), which keeps the op differentiable everywhere
    except on grid lines.
    """
    feature, flow = as_tensor(feature), as_tensor(flow)
    _check_4d(feature, "bilinear_warp")
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"bilinear_warp: flow must be (n, 2, h, w), got {flow.shape}")
    n, c, h, w = feature.shape
    if flow.shape[0] != n or flow.shape[2:] != (h, w):
        raise ValueError(f"bilinear_warp: spatial mismatch feature {feature.shape} vs flow {flow.shape}")

    fd = feature.data.astype(np.float64, copy=False)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = gx[None] + flow.data[:, 0].astype(np.float64)
    sy = gy[None] + flow.data[:, 1].astype(np.float64)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    tx = sx - x0
    ty = sy - y0

    def tap(ix, iy):
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        ixc = np.clip(ix, 0, w - 1)
        iyc = np.clip(iy, 0, h - 1)
        vals = np.empty((n, c, h, w), dtype=np.float64)
        for b in range(n):
            vals[b] = fd[b][:, iyc[b], ixc[b]]
        return vals * valid[:, None], valid, ixc, iyc

    v00, m00, x00, y00 = tap(x0, y0)
    v10, m10, x10, y10 = tap(x0 + 1, y0)
    v01, m01, x01, y01 = tap(x0, y0 + 1)
    v11, m11, x11, y11 = tap(x0 + 1, y0 + 1)

    w00 = (1 - tx) * (1 - ty)
    w10 = tx * (1 - ty)
    w01 = (1 - tx) * ty
    w11 = tx * ty
    out = (
        v00 * w00[:, None] + v10 * w10[:, None] + v01 * w01[:, None] + v11 * w11[:, None]
    ).astype(feature.dtype)

    def backward(up):
        up64 = up.astype(np.float64, copy=False)
        dfeat = np.zeros_like(fd)
        taps = ((w00, m00, x00, y00), (w10, m10, x10, y10), (w01, m01, x01, y01), (w11, m11, x11, y11))
        for wt, mask, ixc, iyc in taps:
            contrib = up64 * wt[:, None] * mask[:, None]
            for b in range(n):
                np.add.at(dfeat[b], (slice(None), iyc[b], ixc[b]), contrib[b])
        # d out / d sx with weights (w00..w11) differentiated in tx / ty
        dsx = (
            (v10 - v00) * (1 - ty)[:, None] + (v11 - v01) * ty[:, None]
        )
        dsy = (
            (v01 - v00) * (1 - tx)[:, None] + (v11 - v10) * tx[:, None]
        )
        dflow = np.stack(
            [(up64 * dsx).sum(axis=1), (up64 * dsy).sum(axis=1)], axis=1
        )
        return dfeat, dflow

    return make_op(out, (feature, flow), backward)


def avg_pool(x, factor):
    """Non-overlapping average pooling by an integer factor (both axes)."""
    x = as_tensor(x)
    _check_4d(x, "avg_pool")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool: dims {x.shape} not divisible by {factor}")
    oh, ow = h // factor, w // factor
    out = (
        x.data.astype(np.float64)
        .reshape(n, c, oh, factor, ow, factor)
        .mean(axis=(3, 5))
        .astype(x.dtype)
    )

    def backward(up):
        g = up[:, :, :, None, :, None] / (factor * factor)
        return (np.broadcast_to(g, (n, c, oh, factor, ow, factor)).reshape(n, c, h, w).copy(),)

    return make_op(out, (x,), backward)


def bilinear_resize(data, target_h, target_w):
    """Bilinear resize of an (n, c, h, w) array, half-pixel centers, edges clamped.

    Plain array in, plain array out; not differentiable (resampling sits
    outside every trained path).
    """
    data = data.data if isinstance(data, Tensor) else np.asarray(data)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"bilinear_resize: non-positive target ({target_h}, {target_w})")
    n, c, h, w = data.shape
    if (target_h, target_w) == (h, w):
        return data.copy()
    d64 = data.astype(np.float64, copy=False)

    def axis_coords(target, source):
        coords = (np.arange(target, dtype=np.float64) + 0.5) * (source / target) - 0.5
        coords = np.clip(coords, 0, source - 1)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, source - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(target_h, h)
    x0, x1, fx = axis_coords(target_w, w)
    rows0 = d64[:, :, y0, :]
    rows1 = d64[:, :, y1, :]
    rows = rows0 * (1 - fy)[None, None, :, None] + rows1 * fy[None, None, :, None]
    cols0 = rows[:, :, :, x0]
    cols1 = rows[:, :, :, x1]
    out = cols0 * (1 - fx)[None, None, None, :] + cols1 * fx[None, None, None, :]
    return out.astype(data.dtype)


def depthwise_separable(x, dw: ConvParams, pw: ConvParams, dw_bn=None, pw_bn=None, act=None):
    """3x3 depthwise convolution followed by 1x1 pointwise convolution.

    When `dw_bn` / `pw_bn` / `act` are given, each convolution is followed by
    its batch norm and the activation, matching the conv-bn-act block used
    throughout the flow and backbone networks.
    """
    x = as_tensor(x)
    c = x.shape[1]
    if dw.groups != c or dw.weight.shape[0] != c or dw.kernel != (3, 3):
        raise ValueError(f"depthwise_separable: dw must be 3x3 with groups == channels ({c}), got {dw.weight.shape}")
    if pw.kernel != (1, 1) or pw.groups != 1:
        raise ValueError(f"depthwise_separable: pw must be a dense 1x1 conv, got {pw.weight.shape}")
    out = conv2d(x, dw)
    if dw_bn is not None:
        out = batch_norm(out, dw_bn)
    if act is not None:
        out = act(out)
    out = conv2d(out, pw)
    if pw_bn is not None:
        out = batch_norm(out, pw_bn)
    if act is not None:
        out = act(out)
    return out
