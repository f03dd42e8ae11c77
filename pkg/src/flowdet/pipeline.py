"""Key-frame video pipeline.

Key frames run the full path: feature extraction, flow-guided GRU
aggregation against the previous key frame, and the detection heads; the
RPN intermediate map and the position-sensitive score maps are cached.
Non-key frames estimate flow to the key frame (on half-resolution input),
warp the cached maps, and run only the remaining head stages.

Frames are processed strictly in order (no lookahead); state mutates only
on key frames.
"""

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io as fio
from .aggregation import GruParams, flow_guided_gru, init_gru_params
from .analyzer import SystemCostConfig, amortized_cost
from .detector import (
    BackboneSpec,
    DetectorConfig,
    FEATURE_STRIDE,
    build_backbone,
    detect_from_maps,
    extract_features,
    init_detector_params,
    lh_score_maps,
    rpn_intermediate,
)
from .graph import init_params
from .lightflow import LightFlowSpec, build_light_flow, predict_flow, resample_flow
from .ops import bilinear_resize, bilinear_warp
from .tensor import Tensor, no_grad

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass
class PipelineConfig:
    key_interval: int = 10  # every l-th frame is a key frame
    alpha: float = 1.0
    beta: float = 1.0
    shorter_side: int = 224  # detection input; flow runs at half this
    score_thresh: float = 0.05
    num_classes: int = 30
    seed: int = 0
    image_mean: tuple = IMAGE_MEAN
    image_std: tuple = IMAGE_STD

    def __post_init__(self):
        if self.key_interval < 1:
            raise ValueError(f"key_interval must be >= 1, got {self.key_interval}")
        if not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise ValueError(f"alpha/beta must be in (0, 1], got {self.alpha}, {self.beta}")


@dataclass
class PipelineState:
    """Per-stream memory; caches change only on key frames."""

    key_image_half: Tensor  # half-resolution key frame, flow reference
    f_agg: Tensor  # aggregated key feature map (stride 16)
    rpn_cache: Tensor  # RPN intermediate map
    lh_cache: Tensor  # position-sensitive score maps
    frame_index: int


@dataclass
class Nets:
    flow_spec: LightFlowSpec
    flow_params: dict
    backbone_spec: BackboneSpec
    det_params: dict
    gru_params: GruParams
    det_cfg: DetectorConfig


def build_nets(cfg: PipelineConfig, checkpoint=None):
    """Seeded random weights, or a checkpoint saved by `save_nets`.

    Inference keeps fixed-width interface maps, so the aggregation state
    shape is independent of alpha.  Flow predictor output convs start at
    zero, making the initial flow estimate exactly zero.
    """
    rng = np.random.default_rng(cfg.seed)
    flow_spec = build_light_flow(cfg.beta)
    backbone_spec = build_backbone(cfg.alpha, scale_interface=False)
    flow_params = init_params(
        flow_spec.graph, {"Images": (6, 64, 64)}, rng, zero_names=flow_spec.zero_init_names
    )
    det_params = init_detector_params(backbone_spec, rng, num_classes=cfg.num_classes)
    gru_params = init_gru_params(backbone_spec.feat_channels, rng)
    if checkpoint is not None:
        raw = fio.load_checkpoint(checkpoint)
        for key, value in raw.items():
            domain, _, name = key.partition("/")
            store = {"flow": flow_params, "det": det_params}.get(domain)
            if store is not None:
                if name not in store:
                    raise ValueError(f"checkpoint key {key!r} does not match the configured networks")
                if store[name].shape != value.shape:
                    raise ValueError(f"checkpoint shape {value.shape} for {key!r}, expected {store[name].shape}")
                store[name].data = value.astype(store[name].dtype)
            elif domain == "gru":
                gru_named = gru_params.named("gru")
                if f"gru.{name}" not in gru_named:
                    raise ValueError(f"unknown checkpoint key {key!r}")
                gru_named[f"gru.{name}"].data = value.astype(np.float32)
            else:
                raise ValueError(f"unknown checkpoint domain {domain!r}")
    det_cfg = DetectorConfig(num_classes=cfg.num_classes, score_thresh=cfg.score_thresh)
    return Nets(flow_spec, flow_params, backbone_spec, det_params, gru_params, det_cfg)


def save_nets(path, nets: Nets):
    merged = {}
    merged.update({f"flow/{k}": v for k, v in nets.flow_params.items()})
    merged.update({f"det/{k}": v for k, v in nets.det_params.items()})
    merged.update({f"gru/{k.split('.', 1)[1]}": v for k, v in nets.gru_params.named("gru").items()})
    fio.save_checkpoint(path, merged)


def is_key_frame(index, key_interval):
    if index < 0:
        raise ValueError(f"frame index must be >= 0, got {index}")
    return index % key_interval == 0


def _half_image(frame):
    data = frame.data if isinstance(frame, Tensor) else frame
    return Tensor(bilinear_resize(data, data.shape[2] // 2, data.shape[3] // 2))


def _flow_to_feature_grid(nets, key_half, cur_half):
    flow = predict_flow(key_half, cur_half, nets.flow_spec, nets.flow_params)
    fh = cur_half.shape[2] * 2 // FEATURE_STRIDE
    fw = cur_half.shape[3] * 2 // FEATURE_STRIDE
    return resample_flow(flow, fh, fw)


def process_frame(state, frame, nets: Nets, cfg: PipelineConfig):
    """Advance the stream by one frame; returns (detections, new state)."""
    frame = frame if isinstance(frame, Tensor) else Tensor(frame)
    index = 0 if state is None else state.frame_index + 1
    if state is not None:
        expect = (state.key_image_half.shape[2] * 2, state.key_image_half.shape[3] * 2)
        if frame.shape[2:] != expect:
            raise ValueError(f"frame shape drift: got {frame.shape[2:]}, stream started at {expect}")
    key = is_key_frame(index, cfg.key_interval)
    image_hw = frame.shape[2:]
    half = _half_image(frame)
    with no_grad():
        if key:
            feats = extract_features(frame, nets.backbone_spec, nets.det_params)
            if state is None:
                f_agg = feats
            else:
                flow_feat = _flow_to_feature_grid(nets, state.key_image_half, half)
                f_agg = flow_guided_gru(feats, state.f_agg, flow_feat, nets.gru_params)
            rpn_feat = rpn_intermediate(f_agg, nets.det_params)
            lh = lh_score_maps(f_agg, nets.det_params)
            detections = detect_from_maps(rpn_feat, lh, nets.det_params, nets.det_cfg, image_hw)
            state = PipelineState(
                key_image_half=half, f_agg=f_agg, rpn_cache=rpn_feat, lh_cache=lh, frame_index=index
            )
        else:
            if state is None:
                raise ValueError("non-key frame with no pipeline state; frame 0 must be a key frame")
            flow_feat = _flow_to_feature_grid(nets, state.key_image_half, half)
            rpn_warped = bilinear_warp(state.rpn_cache, flow_feat)
            lh_warped = bilinear_warp(state.lh_cache, flow_feat)
            detections = detect_from_maps(rpn_warped, lh_warped, nets.det_params, nets.det_cfg, image_hw)
            state = replace(state, frame_index=index)
    return detections, state


# -- frame ingestion -------------------------------------------------------


@dataclass
class Frame:
    data: Tensor  # (1, 3, h, w), standardized, padded to the feature stride
    index: int
    scale: float  # resized / original size; boxes are in resized coordinates
    orig_hw: tuple


def _prepare(array01, index, scale, cfg):
    mean = np.asarray(cfg.image_mean, dtype=np.float32)[:, None, None]
    std = np.asarray(cfg.image_std, dtype=np.float32)[:, None, None]
    img = (array01.astype(np.float32) - mean) / std
    h, w = img.shape[1:]
    ph = (FEATURE_STRIDE - h % FEATURE_STRIDE) % FEATURE_STRIDE
    pw = (FEATURE_STRIDE - w % FEATURE_STRIDE) % FEATURE_STRIDE
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)))
    return Frame(data=Tensor(img[None]), index=index, scale=scale, orig_hw=array01.shape[1:])


def resize_shorter_side(array01, shorter):
    """Aspect-preserving bilinear resize; returns (resized, scale)."""
    h, w = array01.shape[1:]
    scale = shorter / min(h, w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    return bilinear_resize(array01[None], nh, nw)[0], scale


def load_frame_sequence(source, cfg: PipelineConfig):
    """Yield `Frame`s from a directory of PNG/PPM files or a .tnsr stream.

    Directory frames are decoded to [0, 1] RGB; every frame is resized so
    its shorter side matches the config, standardized, and zero-padded to
    a multiple of the feature stride.  All source frames must share one
    size.
    """
    source = Path(source)
    first_hw = None

    def check(hw):
        nonlocal first_hw
        if first_hw is None:
            first_hw = hw
        elif hw != first_hw:
            raise ValueError(f"inconsistent frame dims: {hw} after {first_hw}")

    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() in (".png", ".ppm"))
        for index, path in enumerate(files):
            from PIL import Image

            with Image.open(path) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            arr = rgb.transpose(2, 0, 1)
            check(arr.shape[1:])
            resized, scale = resize_shorter_side(arr, cfg.shorter_side)
            yield _prepare(resized, index, scale, cfg)
    elif source.is_file():
        for index, arr in enumerate(fio.iter_tensor_stream(source)):
            if arr.shape[0] != 1 or arr.shape[1] != 3:
                raise ValueError(f"stream frame {index} has shape {arr.shape}, expected (1, 3, h, w)")
            check(arr.shape[2:])
            resized, scale = resize_shorter_side(arr[0], cfg.shorter_side)
            yield _prepare(resized, index, scale, cfg)
    else:
        raise ValueError(f"frame source {source} is neither a directory nor a file")


def format_record(index, key, detections):
    parts = [str(index), str(int(key))]
    for d in detections:
        parts.append(
            f"{d.class_id} {d.score:.4f} {d.box[0]:.2f} {d.box[1]:.2f} {d.box[2]:.2f} {d.box[3]:.2f}"
        )
    return " ".join(parts)


def run_video(cfg: PipelineConfig, source, sink=None, nets: Nets | None = None):
    """Stream a frame source through the pipeline.

    Writes one record line per frame to `sink` (a path or file-like) and
    returns a summary dict.  Reported FLOPs are the steady-state per-frame
    costs of the executed networks (analyzer figures under the
    fixed-interface convention), assigned by frame type.
    """
    if nets is None:
        nets = build_nets(cfg)
    out = None
    close = False
    if sink is not None:
        if hasattr(sink, "write"):
            out = sink
        else:
            out = open(sink, "w")
            close = True

    state = None
    frames = key_frames = 0
    total_flops = 0.0
    cost = None
    coord_scale = None
    start = time.perf_counter()
    try:
        for frame in load_frame_sequence(source, cfg):
            detections, state = process_frame(state, frame.data, nets, cfg)
            if coord_scale is None:
                coord_scale = frame.scale
            if cost is None:
                cost = amortized_cost(
                    SystemCostConfig(
                        alpha=cfg.alpha,
                        beta=cfg.beta,
                        key_interval=cfg.key_interval,
                        det_hw=tuple(frame.data.shape[2:]),
                        num_classes=cfg.num_classes,
                        scale_interface=False,
                    )
                )
            key = is_key_frame(frame.index, cfg.key_interval)
            frames += 1
            key_frames += int(key)
            total_flops += cost.key_flops if key else cost.nonkey_flops
            if out is not None:
                out.write(format_record(frame.index, key, detections) + "\n")
    finally:
        if close:
            out.close()
    wall = time.perf_counter() - start
    return {
        "frames": frames,
        "key_frames": key_frames,
        "params": cost.params if cost else 0,
        "total_flops": total_flops,
        "avg_flops": total_flops / frames if frames else 0.0,
        "coord_scale": coord_scale if coord_scale is not None else 1.0,
        "wall_time_s": wall,
        "fps": frames / wall if wall > 0 else 0.0,
    }


def summary_text(summary, cfg: PipelineConfig):
    lines = [f"{k} = {v}" for k, v in summary.items()]
    lines.append(f"alpha = {cfg.alpha}")
    lines.append(f"beta = {cfg.beta}")
    lines.append(f"key_interval = {cfg.key_interval}")
    return "\n".join(lines)


def summary_csv_row(summary, cfg: PipelineConfig):
    return (
        f"{cfg.alpha},{cfg.beta},{cfg.key_interval},"
        f"{summary['avg_flops']:.0f},{summary['fps']:.3f}"
    )
