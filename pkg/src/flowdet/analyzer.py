"""Static cost model: parameters and FLOPs per layer, network, and system.

Counting conventions (documented here; the tests pin the defaults):
  * a multiply-add counts as 2 FLOPs;
  * conv/deconv/fc layers count 2 * positions * out_c * (in_c/groups * k^2)
    plus their parameters (weights, biases, and 4 batch-norm values per
    channel where the layer carries batch norm);
  * bilinear warping costs 14 ops per output element (4 taps: weights plus
    multiply-adds);
  * batch norm / activations / upsampling / elementwise ops cost 0 by
    default (`include_elementwise` turns them on);
  * RoI-dependent work (PSRoI pooling and the per-RoI FC layers) is
    excluded from FLOPs by default (`roi_count=0`) because proposal counts
    are data-dependent; FC parameters are always counted.
"""

from dataclasses import dataclass, field

import numpy as np

from .detector import ANCHORS_PER_POSITION, FEATURE_STRIDE, POOLED_GRID, build_backbone
from .graph import LayerSpec, NetworkGraph, propagate_shapes
from .lightflow import build_light_flow

WARP_OPS_PER_ELEMENT = 14
PSROI_OPS_PER_VALUE = 60  # 4 bilinear samples (14 each) + averaging
ELEMENTWISE_OPS = {"bn": 4, "activation": 1, "upsample": 1, "add": 1, "softmax": 5, "pool": 1, "fusion": 3}


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int
    out_shape: tuple


@dataclass
class CostReport:
    name: str
    layers: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, cost: LayerCost):
        self.layers.append(cost)

    @property
    def params(self):
        return sum(l.params for l in self.layers)

    @property
    def flops(self):
        return sum(l.flops for l in self.layers)

    def extend(self, other, prefix=""):
        for l in other.layers:
            self.layers.append(LayerCost(prefix + l.name, l.kind, l.params, l.flops, l.out_shape))


def count_layer(layer: LayerSpec, input_shapes, include_elementwise=False):
    """Cost of a single layer given its input shapes (list of (c, h, w))."""
    kind = layer.kind
    if kind in ("conv", "deconv"):
        c_in = input_shapes[0][0]
        icg = c_in // layer.groups
        oc, k = layer.out_channels, layer.kernel
        if kind == "conv":
            oh, ow = _conv_hw(input_shapes[0], layer)
        else:
            oh, ow = input_shapes[0][1] * layer.stride, input_shapes[0][2] * layer.stride
        params = oc * icg * k * k + (oc if layer.bias else 0) + (4 * oc if layer.bn else 0)
        flops = 2 * oh * ow * oc * icg * k * k
        if include_elementwise:
            elems = oh * ow * oc
            if layer.bn:
                flops += ELEMENTWISE_OPS["bn"] * elems
            if layer.act:
                flops += ELEMENTWISE_OPS["activation"] * elems
        return LayerCost(layer.name, kind, params, flops, (oc, oh, ow))
    if kind == "fc":
        d_in = input_shapes[0][0]
        params = layer.out_channels * d_in + (layer.out_channels if layer.bias else 0)
        return LayerCost(layer.name, kind, params, 2 * layer.out_channels * d_in, (layer.out_channels,))
    if kind == "warp":
        c, h, w = input_shapes[0]
        return LayerCost(layer.name, kind, 0, WARP_OPS_PER_ELEMENT * c * h * w, (c, h, w))
    if kind == "psroi":
        values = input_shapes[0][0] * POOLED_GRID * POOLED_GRID  # group channels per bin
        return LayerCost(layer.name, kind, 0, PSROI_OPS_PER_VALUE * values, input_shapes[0])
    if kind in ("input",):
        return LayerCost(layer.name, kind, 0, 0, input_shapes[0])
    if kind == "upsample2x":
        c, h, w = input_shapes[0]
        shape = (c, 2 * h, 2 * w)
        flops = ELEMENTWISE_OPS["upsample"] * np.prod(shape) if include_elementwise else 0
        return LayerCost(layer.name, kind, 0, int(flops), shape)
    if kind == "concat":
        shape = (sum(s[0] for s in input_shapes), min(s[1] for s in input_shapes), min(s[2] for s in input_shapes))
        return LayerCost(layer.name, kind, 0, 0, shape)
    if kind == "add":
        shape = (input_shapes[0][0], min(s[1] for s in input_shapes), min(s[2] for s in input_shapes))
        flops = ELEMENTWISE_OPS["add"] * np.prod(shape) * (len(input_shapes) - 1) if include_elementwise else 0
        return LayerCost(layer.name, kind, 0, int(flops), shape)
    if kind == "flow_fusion":
        finest = max(input_shapes, key=lambda s: s[1] * s[2])
        shape = (2, finest[1], finest[2])
        flops = ELEMENTWISE_OPS["fusion"] * np.prod(shape) * len(input_shapes) if include_elementwise else 0
        return LayerCost(layer.name, kind, 0, int(flops), shape)
    if kind in ("bn", "activation", "softmax", "pool", "elementwise"):
        shape = input_shapes[0]
        flops = ELEMENTWISE_OPS.get(kind, 1) * np.prod(shape) if include_elementwise else 0
        return LayerCost(layer.name, kind, 0, int(flops), shape)
    raise ValueError(f"count_layer: unknown layer kind {kind!r}")


def _conv_hw(shape, layer):
    _, h, w = shape
    oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
    ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"{layer.name}: empty output for input {shape}")
    return oh, ow


def count_network(graph: NetworkGraph, input_shapes, include_elementwise=False):
    """Shape-propagated per-layer costs for a whole graph."""
    shapes = propagate_shapes(graph, input_shapes)
    report = CostReport(name=graph.name, config={"input_shapes": dict(input_shapes)})
    for layer in graph.layers:
        if layer.kind == "input":
            continue
        srcs = [shapes[s] for s in layer.inputs]
        report.add(count_layer(layer, srcs, include_elementwise))
    return report


def _head_layercosts(spec, feat_shape, num_classes, include_elementwise):
    """RPN and score-map convs plus the per-RoI layers, as countable specs."""
    feat_c, fh, fw = feat_shape
    mk = lambda name, kind, **kw: LayerSpec(name=name, kind=kind, **kw)
    rpn_conv = count_layer(
        mk("RpnConv", "conv", out_channels=spec.rpn_channels, kernel=3, padding=1, act="relu"),
        [feat_shape],
        include_elementwise,
    )
    rpn_shape = (spec.rpn_channels, fh, fw)
    rpn_cls = count_layer(
        mk("RpnCls", "conv", out_channels=ANCHORS_PER_POSITION, kernel=1), [rpn_shape], include_elementwise
    )
    rpn_box = count_layer(
        mk("RpnBox", "conv", out_channels=4 * ANCHORS_PER_POSITION, kernel=1), [rpn_shape], include_elementwise
    )
    lh_conv = count_layer(
        mk("LhScore", "conv", out_channels=spec.lh_channels, kernel=1), [feat_shape], include_elementwise
    )
    psroi = count_layer(mk("PsRoiWarp", "psroi"), [(spec.lh_group_channels, fh, fw)], include_elementwise)
    fc1 = count_layer(mk("Fc1", "fc", out_channels=spec.fc_hidden), [(spec.lh_channels,)], include_elementwise)
    fc_cls = count_layer(mk("FcCls", "fc", out_channels=num_classes + 1), [(spec.fc_hidden,)], include_elementwise)
    fc_box = count_layer(mk("FcBox", "fc", out_channels=4), [(spec.fc_hidden,)], include_elementwise)
    return {
        "rpn_conv": rpn_conv,
        "rpn_pred": [rpn_cls, rpn_box],
        "lh_conv": lh_conv,
        "psroi": psroi,
        "fc": [fc1, fc_cls, fc_box],
    }


def gru_layercosts(width, feat_hw, include_elementwise=False, name="Gru"):
    """Six 3x3 gate convs plus the state warp for one GRU layer."""
    fh, fw = feat_hw
    costs = []
    for gate in ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h"):
        bias = gate.startswith("w_")  # one bias vector per gate equation
        spec = LayerSpec(name=f"{name}.{gate}", kind="conv", out_channels=width, kernel=3, padding=1, bias=bias)
        costs.append(count_layer(spec, [(width, fh, fw)], include_elementwise))
    costs.append(count_layer(LayerSpec(name=f"{name}.warp", kind="warp"), [(width, fh, fw)], include_elementwise))
    if include_elementwise:
        gates = LayerSpec(name=f"{name}.gates", kind="elementwise")
        costs.append(count_layer(gates, [(width * 8, fh, fw)], include_elementwise))
    return costs


@dataclass
class SystemCostConfig:
    alpha: float = 1.0
    beta: float = 1.0
    key_interval: int = 10
    det_hw: tuple = (224, 400)  # (h, w) of the detection input
    num_classes: int = 30
    use_flow: bool = True
    use_gru: bool = True
    gru_layers: int = 1
    scale_interface: bool = True  # analyzer default; execution keeps fixed-width interfaces
    roi_count: int = 0
    include_elementwise: bool = False


@dataclass
class SystemCost:
    config: SystemCostConfig
    params: int
    key_flops: int
    nonkey_flops: int
    per_frame_flops: float
    sections: dict = field(default_factory=dict)  # name -> CostReport


def amortized_cost(cfg: SystemCostConfig):
    """Per-frame cost of the video system under key-frame interval `l`.

    per_frame = (key + (l - 1) * nonkey) / l.  Key frames run the backbone,
    fusion, flow, GRU aggregation, and all heads; non-key frames run only
    the flow network, two map warps, and the post-propagation head
    remainder.  Flow runs on every frame (at half the detection input
    resolution), so it appears in both terms.
    """
    if cfg.key_interval < 1:
        raise ValueError(f"key_interval must be >= 1, got {cfg.key_interval}")
    h, w = cfg.det_hw
    ie = cfg.include_elementwise
    spec = build_backbone(cfg.alpha, scale_interface=cfg.scale_interface)
    backbone = count_network(spec.graph, {"Image": (3, h, w)}, ie)
    feat_shape = (spec.feat_channels, h // FEATURE_STRIDE, w // FEATURE_STRIDE)
    heads = _head_layercosts(spec, feat_shape, cfg.num_classes, ie)

    sections = {"backbone": backbone}
    key = backbone.flops
    key += heads["rpn_conv"].flops + heads["lh_conv"].flops
    pred_flops = sum(c.flops for c in heads["rpn_pred"])
    key += pred_flops
    nonkey = pred_flops
    roi_flops = cfg.roi_count * (heads["psroi"].flops + sum(c.flops for c in heads["fc"]))
    key += roi_flops
    nonkey += roi_flops
    params = backbone.params
    params += heads["rpn_conv"].params + heads["lh_conv"].params + sum(c.params for c in heads["rpn_pred"])
    params += sum(c.params for c in heads["fc"])

    head_report = CostReport(name="heads")
    for c in [heads["rpn_conv"], *heads["rpn_pred"], heads["lh_conv"], heads["psroi"], *heads["fc"]]:
        head_report.add(c)
    sections["heads"] = head_report

    if cfg.use_flow:
        flow_spec = build_light_flow(cfg.beta)
        flow = count_network(flow_spec.graph, {"Images": (6, h // 2, w // 2)}, ie)
        sections["flow"] = flow
        key += flow.flops
        nonkey += flow.flops
        params += flow.params
        # non-key frames warp the cached RPN and score maps
        for name, c in (("rpn", spec.rpn_channels), ("lh", spec.lh_channels)):
            warp = count_layer(
                LayerSpec(name=f"Warp_{name}", kind="warp"), [(c, feat_shape[1], feat_shape[2])], ie
            )
            head_report.add(warp)
            nonkey += warp.flops

    if cfg.use_gru:
        gru_report = CostReport(name="gru")
        for layer_idx in range(cfg.gru_layers):
            for c in gru_layercosts(spec.feat_channels, feat_shape[1:], ie, name=f"Gru{layer_idx}"):
                gru_report.add(c)
        sections["gru"] = gru_report
        key += gru_report.flops
        params += gru_report.params

    l = cfg.key_interval
    per_frame = (key + (l - 1) * nonkey) / l
    return SystemCost(
        config=cfg,
        params=params,
        key_flops=key,
        nonkey_flops=nonkey,
        per_frame_flops=per_frame,
        sections=sections,
    )


def single_frame_cost(alpha=1.0, det_hw=(224, 400), num_classes=30, scale_interface=True, roi_count=0, include_elementwise=False):
    """Dense per-frame detector without flow or aggregation."""
    cfg = SystemCostConfig(
        alpha=alpha,
        det_hw=det_hw,
        num_classes=num_classes,
        key_interval=1,
        use_flow=False,
        use_gru=False,
        scale_interface=scale_interface,
        roi_count=roi_count,
        include_elementwise=include_elementwise,
    )
    return amortized_cost(cfg)


def speedup_ratio(a, b):
    """FLOPs ratio between two cost reports (or numbers)."""
    fa = a.flops if hasattr(a, "flops") else (a.per_frame_flops if hasattr(a, "per_frame_flops") else float(a))
    fb = b.flops if hasattr(b, "flops") else (b.per_frame_flops if hasattr(b, "per_frame_flops") else float(b))
    if fb == 0:
        raise ValueError("speedup_ratio: zero-cost denominator")
    return fa / fb


def format_report(report: CostReport, top=None):
    lines = [f"{'layer':<18} {'kind':<10} {'params':>12} {'flops':>16} out"]
    rows = report.layers if top is None else report.layers[:top]
    for l in rows:
        lines.append(f"{l.name:<18} {l.kind:<10} {l.params:>12,} {l.flops:>16,} {l.out_shape}")
    lines.append(f"{'TOTAL':<18} {'':<10} {report.params:>12,} {report.flops:>16,}")
    lines.append(f"totals: {report.params / 1e6:.3f} M params, {report.flops / 1e9:.4f} B FLOPs")
    return "\n".join(lines)
