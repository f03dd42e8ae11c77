"""Feature aggregation across key frames.

The main path is a convolutional GRU whose previous state is first aligned
to the current frame by bilinear warping with the estimated flow:

    F_hat   = warp(f_prev_agg, flow)
    z       = sigmoid(Wz * f_cur + Uz * F_hat + b_z)      (update gate)
    r       = sigmoid(Wr * f_cur + Ur * F_hat + b_r)      (reset gate)
    cand    = ReLU(Wh * f_cur + Uh * (r . F_hat) + b_h)
    out     = (1 - z) . F_hat + z . cand

where * is a 3x3 convolution and . is elementwise multiplication.  The
weighted-average variant used as a comparison baseline blends the warped
previous feature and the current one with per-position cosine-similarity
softmax weights.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .graph import he_uniform
from .tensor import Tensor, as_tensor, relu, sigmoid


@dataclass
class GruParams:
    """Six 3x3 conv kernels (d, d, 3, 3) and three bias vectors (d,)."""

    w_z: Tensor
    u_z: Tensor
    w_r: Tensor
    u_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def width(self):
        return self.w_z.shape[0]

    def tensors(self):
        return [self.w_z, self.u_z, self.w_r, self.u_r, self.w_h, self.u_h, self.b_z, self.b_r, self.b_h]

    def named(self, prefix="gru"):
        names = ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h", "b_z", "b_r", "b_h")
        return {f"{prefix}.{n}": t for n, t in zip(names, self.tensors())}


def init_gru_params(width=128, rng=None, dtype=np.float32, requires_grad=False):
    rng = rng or np.random.default_rng(0)
    fan_in = width * 9

    def kernel():
        return Tensor(he_uniform(rng, (width, width, 3, 3), fan_in, dtype), requires_grad=requires_grad)

    def bias():
        return Tensor(np.zeros(width, dtype=dtype), requires_grad=requires_grad)

    return GruParams(kernel(), kernel(), kernel(), kernel(), kernel(), kernel(), bias(), bias(), bias())


def _gate_conv(x, weight, bias=None):
    return ops.conv2d(x, ops.ConvParams(weight=weight, bias=bias, stride=1, padding=1))


def flow_guided_gru(f_cur, f_prev_agg, flow, params: GruParams):
    """One step of warp-aligned GRU aggregation; all maps are (n, d, h, w)."""
    f_cur, f_prev_agg = as_tensor(f_cur), as_tensor(f_prev_agg)
    if f_cur.shape != f_prev_agg.shape:
        raise ValueError(f"flow_guided_gru: feature shape mismatch {f_cur.shape} vs {f_prev_agg.shape}")
    if f_cur.shape[1] != params.width:
        raise ValueError(f"flow_guided_gru: features have {f_cur.shape[1]} channels, params expect {params.width}")
    f_hat = ops.bilinear_warp(f_prev_agg, flow)
    z = sigmoid(_gate_conv(f_cur, params.w_z, params.b_z) + _gate_conv(f_hat, params.u_z))
    r = sigmoid(_gate_conv(f_cur, params.w_r, params.b_r) + _gate_conv(f_hat, params.u_r))
    cand = relu(_gate_conv(f_cur, params.w_h, params.b_h) + _gate_conv(r * f_hat, params.u_h))
    one_minus_z = 1.0 - z
    return one_minus_z * f_hat + z * cand


def flow_guided_gru_stack(f_cur, prev_states, flow, params_list):
    """Stacked GRU cells; every layer warps its own previous state with the
    same flow.  Returns (top output, new per-layer states)."""
    if len(prev_states) != len(params_list):
        raise ValueError("flow_guided_gru_stack: one previous state per layer required")
    x = f_cur
    new_states = []
    for prev, p in zip(prev_states, params_list):
        x = flow_guided_gru(x, prev, flow, p)
        new_states.append(x)
    return x, new_states


@dataclass
class ProjectedGruParams:
    """Widened GRU wrapped in 1x1 projections so it plugs into d-channel features."""

    in_proj: Tensor  # (wide, d, 1, 1)
    out_proj: Tensor  # (d, wide, 1, 1)
    gru: GruParams


def flow_guided_gru_projected(f_cur, prev_state_wide, flow, params: ProjectedGruParams):
    wide_in = ops.conv2d(f_cur, ops.ConvParams(weight=params.in_proj))
    wide_out = flow_guided_gru(wide_in, prev_state_wide, flow, params.gru)
    return ops.conv2d(wide_out, ops.ConvParams(weight=params.out_proj)), wide_out


@dataclass
class AggregationWeights:
    """Per-position blend weights for (previous, current); they sum to 1."""

    w_prev: np.ndarray  # (n, 1, h, w)
    w_cur: np.ndarray


def similarity_weights(a, b):
    """Cosine similarity of channel vectors, softmaxed against the reference.

    `b` is the reference (current frame): its self-similarity is 1, the
    other source contributes its cosine to `b`.  Zero channel vectors get
    similarity 0 rather than a division by zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"similarity_weights: shape mismatch {a.shape} vs {b.shape}")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    dot = (ad * bd).sum(axis=1, keepdims=True)
    na = np.sqrt((ad * ad).sum(axis=1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=1, keepdims=True))
    denom = na * nb
    sim = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    e_prev = np.exp(sim - 1.0)
    e_cur = np.exp(0.0)  # exp(1 - 1): reference self-similarity is 1
    total = e_prev + e_cur
    return AggregationWeights(w_prev=(e_prev / total), w_cur=(e_cur / total))


def recursive_weighted_aggregate(f_cur, f_prev_agg, flow, prev_mask=None):
    """Two-source weighted aggregation on key frames (the non-GRU baseline).

    `prev_mask` (n, 1, h, w), when given, zeroes the previous source's
    weight where it is 0 (e.g. warped-out-of-frame positions), so masked
    positions reduce to the current feature exactly.
    """
    f_cur, f_prev_agg = as_tensor(f_cur), as_tensor(f_prev_agg)
    if f_cur.shape != f_prev_agg.shape:
        raise ValueError(f"recursive_weighted_aggregate: shape mismatch {f_cur.shape} vs {f_prev_agg.shape}")
    warped = ops.bilinear_warp(f_prev_agg, flow)
    weights = similarity_weights(warped, f_cur)
    w_prev, w_cur = weights.w_prev, weights.w_cur
    if prev_mask is not None:
        keep = np.asarray(prev_mask, dtype=np.float64) != 0
        w_prev = np.where(keep, w_prev, 0.0)
        w_cur = np.where(keep, w_cur, 1.0)
    out = warped.data.astype(np.float64) * w_prev + f_cur.data.astype(np.float64) * w_cur
    return Tensor(out.astype(f_cur.dtype))
