"""Single-image detector: MobileNet-style backbone, RPN, PSRoI warp head.

The backbone keeps MobileNet's 13 depthwise-separable blocks.  Because the
working resolution is small, the stride-32 output is reduced to the
interface width with a 3x3 conv, nearest-upsampled 2x, and summed with a
1x1-projected stride-16 skip, giving a single stride-16 feature map that
the aggregation and detection heads share.

Region classification follows the position-sensitive thin-score-map
recipe: a 1x1 conv emits `group * 7 * 7` score channels, each 7x7 RoI bin
pools only its own channel group, and two sibling fully connected layers
predict class scores and class-agnostic box deltas.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .graph import LayerSpec, NetworkGraph, he_uniform, init_params, round_channels, run_graph
from .tensor import Tensor, as_tensor, fc, no_grad, relu, sigmoid, softmax

# (pointwise out channels at width 1.0, depthwise stride)
MOBILENET_BLOCKS = (
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
)

ANCHOR_RATIOS = (0.5, 1.0, 2.0)  # w:h
ANCHOR_AREAS = (32.0**2, 64.0**2, 128.0**2, 256.0**2)
ANCHORS_PER_POSITION = len(ANCHOR_RATIOS) * len(ANCHOR_AREAS)

FEATURE_STRIDE = 16
POOLED_GRID = 7
ROI_SAMPLES = 2  # 2x2 bilinear sample points per bin


@dataclass
class BackboneSpec:
    """Backbone + fusion graph and the derived head widths.

    `scale_interface` controls whether the interface maps (fused features,
    PSRoI score maps) scale with alpha.  Execution defaults to fixed-width
    interfaces so aggregation state shapes do not depend on alpha; the cost
    analyzer exposes both conventions.
    """

    alpha: float
    scale_interface: bool
    graph: NetworkGraph
    feat_channels: int
    rpn_channels: int
    lh_group_channels: int
    fc_hidden: int
    input_name: str = "Image"
    feat_name: str = "FeatFused"

    @property
    def lh_channels(self):
        return self.lh_group_channels * POOLED_GRID * POOLED_GRID


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2) in input-image pixels


@dataclass
class DetectorConfig:
    num_classes: int = 30  # foreground classes; the head adds a background slot
    rpn_pre_nms: int = 1000
    rpn_post_nms: int = 300
    rpn_nms_iou: float = 0.7
    final_nms_iou: float = 0.3
    score_thresh: float = 0.05
    min_box_size: float = 1.0
    class_names: list = field(default_factory=list)


def build_backbone(alpha=1.0, scale_interface=False):
    """Backbone graph with width multiplier `alpha` (stride-16 output)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    g = NetworkGraph(name=f"backbone_a{alpha:g}")
    g.add(LayerSpec(name="Image", kind="input", tag="backbone"))
    g.conv("Conv0", "Image", round_channels(32, alpha), kernel=3, stride=2, act="relu", tag="backbone")
    prev = "Conv0"
    prev_c = round_channels(32, alpha)
    stride16 = None
    stride = 2
    for i, (base_c, s) in enumerate(MOBILENET_BLOCKS, start=1):
        if stride == 16 and s == 2 and stride16 is None:
            stride16 = prev  # last stride-16 map feeds the fusion skip
        name = f"Block{i}"
        g.add(
            LayerSpec(
                name=f"{name}_dw",
                kind="conv",
                inputs=(prev,),
                out_channels=prev_c,
                kernel=3,
                stride=s,
                padding=1,
                groups=prev_c,
                bn=True,
                act="relu",
                tag="backbone",
            )
        )
        prev_c = round_channels(base_c, alpha)
        g.conv(name, f"{name}_dw", prev_c, kernel=1, act="relu", tag="backbone")
        prev = name
        stride *= s

    feat_c = round_channels(128, alpha) if scale_interface else 128
    g.conv("FuseReduce", prev, feat_c, kernel=3, act="relu", tag="fusion")
    g.add(LayerSpec(name="FuseUp", kind="upsample2x", inputs=("FuseReduce",), tag="fusion"))
    g.conv("FuseLateral", stride16, feat_c, kernel=1, act="relu", tag="fusion")
    g.add(LayerSpec(name="FeatFused", kind="add", inputs=("FuseUp", "FuseLateral"), tag="fusion"))

    lh_group = max(1, int(np.round(10 * alpha))) if scale_interface else 10
    return BackboneSpec(
        alpha=alpha,
        scale_interface=scale_interface,
        graph=g,
        feat_channels=feat_c,
        rpn_channels=round_channels(256, alpha),
        lh_group_channels=lh_group,
        fc_hidden=round_channels(2048, alpha),
    )


def init_detector_params(spec: BackboneSpec, rng, num_classes=30, dtype=np.float32, requires_grad=False):
    """Backbone graph params plus RPN / score-map / FC head parameters."""
    params = init_params(spec.graph, {"Image": (3, 32, 32)}, rng, dtype=dtype, requires_grad=requires_grad)

    def conv_weight(name, out_c, in_c, k):
        params[f"{name}.weight"] = Tensor(
            he_uniform(rng, (out_c, in_c, k, k), in_c * k * k, dtype), requires_grad=requires_grad
        )
        params[f"{name}.bias"] = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=requires_grad)

    conv_weight("RpnConv", spec.rpn_channels, spec.feat_channels, 3)
    conv_weight("RpnCls", ANCHORS_PER_POSITION, spec.rpn_channels, 1)
    conv_weight("RpnBox", 4 * ANCHORS_PER_POSITION, spec.rpn_channels, 1)
    conv_weight("LhScore", spec.lh_channels, spec.feat_channels, 1)

    def fc_weight(name, out_d, in_d):
        params[f"{name}.weight"] = Tensor(he_uniform(rng, (out_d, in_d), in_d, dtype), requires_grad=requires_grad)
        params[f"{name}.bias"] = Tensor(np.zeros(out_d, dtype=dtype), requires_grad=requires_grad)

    fc_weight("Fc1", spec.fc_hidden, spec.lh_channels)
    fc_weight("FcCls", num_classes + 1, spec.fc_hidden)
    fc_weight("FcBox", 4, spec.fc_hidden)
    return params


def extract_features(image, spec: BackboneSpec, params):
    """Stride-16 fused feature map for a 3-channel image (dims % 16 == 0)."""
    image = as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"extract_features: expected (n, 3, h, w) image, got {image.shape}")
    h, w = image.shape[2:]
    if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
        ph = (h + FEATURE_STRIDE - 1) // FEATURE_STRIDE * FEATURE_STRIDE
        pw = (w + FEATURE_STRIDE - 1) // FEATURE_STRIDE * FEATURE_STRIDE
        raise ValueError(
            f"extract_features: dims ({h}, {w}) not divisible by {FEATURE_STRIDE}; pad input to ({ph}, {pw})"
        )
    return run_graph(spec.graph, params, {spec.input_name: image})[spec.feat_name]


def _head_conv(x, params, name, kernel):
    return ops.conv2d(
        x,
        ops.ConvParams(
            weight=params[f"{name}.weight"], bias=params[f"{name}.bias"], stride=1, padding=kernel // 2
        ),
    )


def rpn_intermediate(features, params):
    """3x3 conv + ReLU; this map is cached and warped onto non-key frames."""
    return relu(_head_conv(features, params, "RpnConv", 3))


def rpn_predictions(rpn_feat, params):
    """Per-anchor sigmoid objectness (12 ch) and box deltas (48 ch)."""
    scores = sigmoid(_head_conv(rpn_feat, params, "RpnCls", 1))
    deltas = _head_conv(rpn_feat, params, "RpnBox", 1)
    return scores, deltas


def rpn_forward(features, params):
    return rpn_predictions(rpn_intermediate(features, params), params)


def lh_score_maps(features, params):
    """Position-sensitive score maps (group * 49 channels); cached/warped too."""
    return _head_conv(features, params, "LhScore", 1)


def generate_anchors(feat_h, feat_w, stride=FEATURE_STRIDE):
    """(feat_h * feat_w * 12, 4) anchor rows (cx, cy, w, h) in image pixels.

    Per position: 3 aspect ratios x 4 areas, ratio-major, centered on the
    receptive-field center (x + 0.5) * stride.
    """
    if feat_h < 1 or feat_w < 1:
        raise ValueError(f"generate_anchors: non-positive grid ({feat_h}, {feat_w})")
    shapes = np.array(
        [(np.sqrt(area * ratio), np.sqrt(area / ratio)) for ratio in ANCHOR_RATIOS for area in ANCHOR_AREAS]
    )
    cy, cx = np.meshgrid(
        (np.arange(feat_h) + 0.5) * stride, (np.arange(feat_w) + 0.5) * stride, indexing="ij"
    )
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    anchors = np.empty((feat_h * feat_w, ANCHORS_PER_POSITION, 4))
    anchors[:, :, 0:2] = centers[:, None, :]
    anchors[:, :, 2:4] = shapes[None, :, :]
    return anchors.reshape(-1, 4)


def decode_boxes(anchors, deltas):
    """Standard (dx, dy, dw, dh) decoding of anchor rows (cx, cy, w, h)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if anchors.shape != deltas.shape:
        raise ValueError(f"decode_boxes: count mismatch {anchors.shape} vs {deltas.shape}")
    cx = anchors[:, 0] + deltas[:, 0] * anchors[:, 2]
    cy = anchors[:, 1] + deltas[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(deltas[:, 2])
    h = anchors[:, 3] * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_boxes(boxes, anchors):
    """Inverse of `decode_boxes` for corner boxes (x1, y1, x2, y2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + bw / 2
    bcy = boxes[:, 1] + bh / 2
    return np.stack(
        [
            (bcx - anchors[:, 0]) / anchors[:, 2],
            (bcy - anchors[:, 1]) / anchors[:, 3],
            np.log(bw / anchors[:, 2]),
            np.log(bh / anchors[:, 3]),
        ],
        axis=1,
    )


def boxes_to_rows(boxes):
    """Corner boxes -> (cx, cy, w, h) rows."""
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([boxes[:, 0] + w / 2, boxes[:, 1] + h / 2, w, h], axis=1)


def clip_boxes(boxes, image_hw):
    h, w = image_hw
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, h)
    return out


def box_iou_matrix(a, b):
    ax1, ay1, ax2, ay2 = a[:, 0, None], a[:, 1, None], a[:, 2, None], a[:, 3, None]
    bx1, by1, bx2, by2 = b[None, :, 0], b[None, :, 1], b[None, :, 2], b[None, :, 3]
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes, scores, iou_thresh):
    """Greedy descending-score suppression; ties broken by lower index."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes vs {len(scores)} scores")
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"nms: iou_thresh must be in [0, 1], got {iou_thresh}")
    if len(boxes) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = box_iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        suppressed |= ious[i] > iou_thresh
        suppressed[i] = True
    return np.asarray(kept, dtype=np.int64)


def psroi_warp(score_maps, rois, stride=FEATURE_STRIDE, group_channels=None):
    """Position-sensitive RoI pooling with bilinear sampling.

    `score_maps` is (1, group * 49, h, w); channels are bin-major: bin
    (i, j) reads channels [(i*7 + j) * group, (i*7 + j + 1) * group).  Each
    of the 7x7 bins averages a 2x2 grid of bilinear samples (pixel-center
    convention, coordinates clamped to the map border).  RoIs are given in
    image pixels and clipped to the image; an empty RoI after clipping is
    rejected.
    """
    maps = score_maps.data if isinstance(score_maps, Tensor) else np.asarray(score_maps)
    if maps.ndim != 4 or maps.shape[0] != 1:
        raise ValueError(f"psroi_warp: expected (1, c, h, w) score maps, got {maps.shape}")
    bins = POOLED_GRID * POOLED_GRID
    if group_channels is None:
        if maps.shape[1] % bins:
            raise ValueError(f"psroi_warp: channel count {maps.shape[1]} not divisible by {bins}")
        group_channels = maps.shape[1] // bins
    elif maps.shape[1] != group_channels * bins:
        raise ValueError(f"psroi_warp: expected {group_channels * bins} channels, got {maps.shape[1]}")
    maps64 = maps[0].astype(np.float64)
    fh, fw = maps.shape[2:]
    img_h, img_w = fh * stride, fw * stride

    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    out = np.empty((len(rois), group_channels, POOLED_GRID, POOLED_GRID), dtype=maps.dtype)
    # sample offsets within a bin, as fractions of the bin extent
    frac = (np.arange(ROI_SAMPLES) + 0.5) / ROI_SAMPLES

    grouped = maps64.reshape(bins, group_channels, fh, fw)
    for idx, roi in enumerate(rois):
        x1 = min(max(roi[0], 0.0), img_w)
        y1 = min(max(roi[1], 0.0), img_h)
        x2 = min(max(roi[2], 0.0), img_w)
        y2 = min(max(roi[3], 0.0), img_h)
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"psroi_warp: RoI {roi.tolist()} is empty after clipping to ({img_h}, {img_w})")
        bw = (x2 - x1) / stride / POOLED_GRID
        bh = (y2 - y1) / stride / POOLED_GRID
        # sample coordinates on the feature grid, cell-center convention
        sx = x1 / stride + (np.arange(POOLED_GRID)[:, None] + frac[None, :]) * bw - 0.5
        sy = y1 / stride + (np.arange(POOLED_GRID)[:, None] + frac[None, :]) * bh - 0.5
        sx = np.clip(sx, 0, fw - 1)
        sy = np.clip(sy, 0, fh - 1)
        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
        x1i = np.minimum(x0 + 1, fw - 1)
        y1i = np.minimum(y0 + 1, fh - 1)
        tx = sx - x0
        ty = sy - y0
        # gather per bin: sy spans bin rows, sx bin cols
        #   sample value[k, i, si, j, sj]
        bin_idx = (np.arange(POOLED_GRID)[:, None] * POOLED_GRID + np.arange(POOLED_GRID)[None, :])
        chan = grouped[bin_idx]  # (7, 7, group, fh, fw)

        def gather(yi, xi):
            return chan[
                np.arange(POOLED_GRID)[:, None, None, None, None],
                np.arange(POOLED_GRID)[None, :, None, None, None],
                np.arange(group_channels)[None, None, :, None, None],
                yi[:, None, None, :, None],
                xi[None, :, None, None, :],
            ]

        v00 = gather(y0, x0)
        v01 = gather(y0, x1i)
        v10 = gather(y1i, x0)
        v11 = gather(y1i, x1i)
        wx = tx[None, :, None, None, :]
        wy = ty[:, None, None, :, None]
        sample = (
            v00 * (1 - wy) * (1 - wx)
            + v01 * (1 - wy) * wx
            + v10 * wy * (1 - wx)
            + v11 * wy * wx
        )
        out[idx] = sample.mean(axis=(3, 4)).transpose(2, 0, 1)
    return out


def rcnn_head(roi_feats, params):
    """Shared hidden FC then sibling class-softmax / class-agnostic deltas."""
    flat = np.asarray(roi_feats, dtype=np.float64).reshape(len(roi_feats), -1)
    hidden = relu(fc(Tensor(flat.astype(params["Fc1.weight"].dtype)), params["Fc1.weight"], params["Fc1.bias"]))
    scores = softmax(fc(hidden, params["FcCls.weight"], params["FcCls.bias"]), axis=1)
    deltas = fc(hidden, params["FcBox.weight"], params["FcBox.bias"])
    return scores.data, deltas.data


def make_proposals(scores, deltas, image_hw, cfg: DetectorConfig, stride=FEATURE_STRIDE):
    """Anchor decoding + pre-NMS cap + NMS + post-NMS cap -> corner boxes."""
    sdata = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    ddata = deltas.data if isinstance(deltas, Tensor) else np.asarray(deltas)
    _, a, fh, fw = sdata.shape
    anchors = generate_anchors(fh, fw, stride)
    flat_scores = sdata[0].transpose(1, 2, 0).reshape(-1)
    flat_deltas = ddata[0].transpose(1, 2, 0).reshape(-1, 4)
    order = np.lexsort((np.arange(flat_scores.size), -flat_scores))[: cfg.rpn_pre_nms]
    boxes = decode_boxes(anchors[order], flat_deltas[order])
    boxes = clip_boxes(boxes, image_hw)
    wide = (boxes[:, 2] - boxes[:, 0]) >= cfg.min_box_size
    tall = (boxes[:, 3] - boxes[:, 1]) >= cfg.min_box_size
    keep = wide & tall
    boxes, kept_scores = boxes[keep], flat_scores[order][keep]
    if len(boxes) == 0:
        return boxes
    kept = nms(boxes, kept_scores, cfg.rpn_nms_iou)[: cfg.rpn_post_nms]
    return boxes[kept]


def detect_from_maps(rpn_feat, lh_maps, params, cfg: DetectorConfig, image_hw):
    """Detection head on (possibly warped) intermediate maps."""
    scores, deltas = rpn_predictions(rpn_feat, params)
    proposals = make_proposals(scores, deltas, image_hw, cfg)
    if len(proposals) == 0:
        return []
    roi_feats = psroi_warp(lh_maps, proposals)
    cls_scores, box_deltas = rcnn_head(roi_feats, params)
    refined = decode_boxes(boxes_to_rows(proposals), box_deltas)
    refined = clip_boxes(refined, image_hw)
    ok = ((refined[:, 2] - refined[:, 0]) >= cfg.min_box_size) & (
        (refined[:, 3] - refined[:, 1]) >= cfg.min_box_size
    )
    detections = []
    for cls in range(1, cfg.num_classes + 1):
        cls_score = cls_scores[:, cls]
        keep = ok & (cls_score >= cfg.score_thresh)
        if not keep.any():
            continue
        idx = np.flatnonzero(keep)
        kept = nms(refined[idx], cls_score[idx], cfg.final_nms_iou)
        for i in idx[kept]:
            detections.append(
                Detection(class_id=cls - 1, score=float(cls_score[i]), box=tuple(float(v) for v in refined[i]))
            )
    detections.sort(key=lambda d: (-d.score, d.box))
    return detections


def detect(features, params, cfg: DetectorConfig, image_hw=None):
    """Full detection pass from a stride-16 feature map."""
    features = as_tensor(features)
    if image_hw is None:
        image_hw = (features.shape[2] * FEATURE_STRIDE, features.shape[3] * FEATURE_STRIDE)
    with no_grad():
        rpn_feat = rpn_intermediate(features, params)
        lh = lh_score_maps(features, params)
        return detect_from_maps(rpn_feat, lh, params, cfg, image_hw)
