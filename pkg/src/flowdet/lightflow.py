"""Light Flow: a depthwise-separable encoder/decoder optical flow network.

Two RGB frames are stacked into a 6-channel input.  The encoder reduces
the grid to 1/64 of the input; the decoder upsamples back to 1/4 with skip
concatenations; five 2-channel predictors (strides 64, 32, 16, 8, 4) are
fused by averaging on the finest grid.

Flow convention: a `FlowField` is an (n, 2, h, w) tensor, channel 0 = dx,
channel 1 = dy, displacements measured in pixels of its own grid.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .graph import LayerSpec, NetworkGraph, round_channels, run_graph
from .tensor import Tensor, as_tensor, make_op

# (name, out_channels at width 1.0, encoder stride) for the pointwise half
# of each encoder block; the preceding depthwise conv carries the stride.
ENCODER_BLOCKS = (
    ("Conv1", 32, 2),
    ("Conv2", 64, 2),
    ("Conv3", 128, 2),
    ("Conv4a", 256, 2),
    ("Conv4b", 256, 1),
    ("Conv5a", 512, 2),
    ("Conv5b", 512, 1),
    ("Conv6a", 1024, 2),
    ("Conv6b", 1024, 1),
)

# decoder block -> (out_channels at width 1.0, encoder skip to concat)
DECODER_BLOCKS = (
    ("Conv7", 256, None),
    ("Conv8", 128, "Conv5b"),
    ("Conv9", 64, "Conv4b"),
    ("Conv10", 32, "Conv3"),
    ("Conv11", 16, "Conv2"),
)

# predictor index -> decoder block it reads from
PREDICTOR_SOURCES = (
    ("Conv12", "Conv7"),
    ("Conv13", "Conv8"),
    ("Conv14", "Conv9"),
    ("Conv15", "Conv10"),
    ("Conv16", "Conv11"),
)


@dataclass
class LightFlowSpec:
    beta: float
    graph: NetworkGraph
    input_name: str = "Images"
    fused_name: str = "Average"
    predictor_names: tuple = tuple(p for p, _ in PREDICTOR_SOURCES)

    @property
    def zero_init_names(self):
        """Predictor output convs; zero weights give an exactly-zero flow."""
        return self.predictor_names


def build_light_flow(beta=1.0):
    """Assemble the Light Flow graph with width multiplier `beta`.

    All feature channel counts scale by `beta` (rounded to the nearest even
    integer, floor 8); the five 2-channel predictor outputs never scale.
    """
    if beta <= 0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    g = NetworkGraph(name=f"light_flow_b{beta:g}")
    g.add(LayerSpec(name="Images", kind="input", tag="flow"))

    prev = "Images"
    for name, base_c, stride in ENCODER_BLOCKS:
        out_c = round_channels(base_c, beta)
        g.conv(f"{name}_dw", prev, out_c=None, kernel=3, stride=stride, tag="flow")
        g.conv(name, f"{name}_dw", out_c, kernel=1, tag="flow")
        prev = name

    for name, base_c, skip in DECODER_BLOCKS:
        out_c = round_channels(base_c, beta)
        if skip is None:
            src = prev
        else:
            g.add(LayerSpec(name=f"{prev}_up", kind="upsample2x", inputs=(prev,), tag="flow"))
            g.add(LayerSpec(name=f"{name}_cat", kind="concat", inputs=(f"{prev}_up", skip), tag="flow"))
            src = f"{name}_cat"
        g.conv(f"{name}_dw", src, out_c=None, kernel=3, stride=1, tag="flow")
        g.conv(name, f"{name}_dw", out_c, kernel=1, tag="flow")
        prev = name

    for pred, src in PREDICTOR_SOURCES:
        g.conv(f"{pred}_dw", src, out_c=None, kernel=3, stride=1, tag="flow")
        g.conv(pred, f"{pred}_dw", 2, kernel=1, bn=False, act=None, tag="flow")

    g.add(
        LayerSpec(
            name="Average",
            kind="flow_fusion",
            inputs=tuple(p for p, _ in PREDICTOR_SOURCES),
            out_channels=2,
            tag="flow",
        )
    )

    _resolve_depthwise(g)
    return LightFlowSpec(beta=beta, graph=g)


def _resolve_depthwise(g):
    """Depthwise convs inherit their channel count from their source layer."""
    channels = {"Images": 6}
    for layer in g.layers:
        if layer.kind == "conv":
            if layer.out_channels is None:
                c = channels[layer.inputs[0]]
                layer.out_channels = c
                layer.groups = c
            channels[layer.name] = layer.out_channels
        elif layer.kind == "upsample2x":
            channels[layer.name] = channels[layer.inputs[0]]
        elif layer.kind == "concat":
            channels[layer.name] = sum(channels[s] for s in layer.inputs)
        elif layer.kind == "flow_fusion":
            channels[layer.name] = 2


def fuse_multiresolution(preds, scale_magnitudes=True):
    """Average dyadic-scale flow predictions on the finest grid.

    Each prediction is repeatedly 2x nearest-neighbor upsampled until it
    reaches the finest grid; with `scale_magnitudes`, displacement values
    are doubled per upsampling so every term shares the finest grid's pixel
    units before averaging.
    """
    if not preds:
        raise ValueError("fuse_multiresolution: empty prediction list")
    preds = [as_tensor(p) for p in preds]
    fh = max(p.shape[2] for p in preds)
    fw = max(p.shape[3] for p in preds)
    total = None
    for p in preds:
        while p.shape[2] < fh or p.shape[3] < fw:
            p = ops.nearest_upsample_2x(p)
            if scale_magnitudes:
                p = p * 2.0
        p = ops.crop_spatial(p, fh, fw)
        total = p if total is None else total + p
    return total * (1.0 / len(preds))


def flow_fusion_executor(scale_magnitudes=True):
    return lambda layer, srcs: fuse_multiresolution(srcs, scale_magnitudes)


def predict_flow(frame_a, frame_b, spec: LightFlowSpec, params, scale_magnitudes=True, return_intermediates=False):
    """Estimate the flow that maps positions in `frame_b` into `frame_a`.

    `frame_a` is the reference frame (features are later sampled from it),
    `frame_b` the query frame; both are (n, 3, h, w).  The fused output
    lives on the 1/4-resolution grid in that grid's pixel units.
    """
    frame_a, frame_b = as_tensor(frame_a), as_tensor(frame_b)
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"predict_flow: frame shape mismatch {frame_a.shape} vs {frame_b.shape}")
    if frame_a.shape[1] != 3:
        raise ValueError(f"predict_flow: frames must have 3 channels, got {frame_a.shape}")
    stacked = ops.concat_channels(frame_a, frame_b)
    want = [spec.fused_name]
    if return_intermediates:
        want += list(spec.predictor_names)
    outs = run_graph(
        spec.graph,
        params,
        {spec.input_name: stacked},
        special={"flow_fusion": flow_fusion_executor(scale_magnitudes)},
        want=want,
    )
    fused = outs[spec.fused_name]
    if return_intermediates:
        return fused, {p: outs[p] for p in spec.predictor_names}
    return fused


def resample_flow(flow, target_h, target_w):
    """Bilinear-resize a flow field onto a new grid, rescaling displacements.

    dx scales by target_w/source_w and dy by target_h/source_h so values
    stay in pixels of the target grid.  Not differentiable (sits outside
    all trained paths).
    """
    flow = as_tensor(flow)
    if flow.shape[1] != 2:
        raise ValueError(f"resample_flow: expected 2-channel flow, got {flow.shape}")
    if target_h < 1 or target_w < 1:
        raise ValueError(f"resample_flow: non-positive target ({target_h}, {target_w})")
    sh, sw = flow.shape[2:]
    resized = ops.bilinear_resize(flow.data, target_h, target_w).astype(np.float64)
    resized[:, 0] *= target_w / sw
    resized[:, 1] *= target_h / sh
    return Tensor(resized.astype(flow.dtype))


def epe_loss(pred, gt):
    """Mean end-point error: mean over pixels of |pred - gt| (L2 per pixel).

    The subgradient at exactly-zero-error pixels is 0.
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"epe_loss: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.shape[1] != 2:
        raise ValueError(f"epe_loss: expected 2-channel flow fields, got {pred.shape}")
    diff = pred.data.astype(np.float64) - gt.data.astype(np.float64)
    dist = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
    count = dist.size
    loss = np.asarray(dist.sum() / count, dtype=pred.dtype)

    def backward(up):
        up = float(up)
        safe = np.where(dist > 0, dist, 1.0)
        unit = diff / safe[:, None] * (dist > 0)[:, None]
        dpred = (up / count) * unit
        return dpred.astype(pred.dtype), (-(up / count) * unit).astype(pred.dtype)

    return make_op(loss, (pred, gt), backward)
