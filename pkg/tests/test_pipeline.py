"""Key-frame scheduling, frame ingestion, record format, run summaries."""

import io as stdio

import numpy as np
import pytest
from PIL import Image

from flowdet.io import save_tensor
from flowdet.pipeline import (
    Nets,
    PipelineConfig,
    build_nets,
    format_record,
    is_key_frame,
    load_frame_sequence,
    process_frame,
    run_video,
)
from flowdet.tensor import Tensor, no_grad


class TestIsKeyFrame:
    @pytest.mark.parametrize("index,interval,expected", [(0, 10, True), (10, 10, True), (5, 10, False), (1, 1, True)])
    def test_cases(self, index, interval, expected):
        assert is_key_frame(index, interval) is expected

    def test_negative_index(self):
        with pytest.raises(ValueError):
            is_key_frame(-1, 10)


def small_cfg(**kw):
    defaults = dict(key_interval=5, alpha=0.5, beta=0.25, shorter_side=64, score_thresh=0.001, seed=0)
    defaults.update(kw)
    return PipelineConfig(**defaults)


def static_frames(count, h=64, w=64, seed=1):
    rng = np.random.default_rng(seed)
    frame = rng.standard_normal((1, 3, h, w)).astype(np.float32)
    return [Tensor(frame.copy()) for _ in range(count)]


@pytest.fixture(scope="module")
def small_nets():
    return build_nets(small_cfg())


class TestProcessFrame:
    def test_static_video_zero_flow_matches_key_frame(self, small_nets):
        # flow predictor convs are zero-initialized: estimated flow is zero,
        # so warped caches equal the key frame's and detections match exactly
        cfg = small_cfg()
        state = None
        per_frame = []
        for frame in static_frames(10):
            dets, state = process_frame(state, frame, small_nets, cfg)
            per_frame.append(dets)
        assert any(per_frame[0]), "expected at least one detection for a meaningful test"
        for i in (1, 2, 3, 4):
            assert per_frame[i] == per_frame[0]
        for i in (6, 7, 8, 9):
            assert per_frame[i] == per_frame[5]

    def test_caches_mutate_only_on_key_frames(self, small_nets):
        cfg = small_cfg()
        state = None
        caches = []
        for frame in static_frames(7):
            _, state = process_frame(state, frame, small_nets, cfg)
            caches.append((id(state.rpn_cache), id(state.lh_cache), id(state.f_agg)))
        assert caches[0] == caches[1] == caches[2] == caches[3] == caches[4]
        assert caches[5] != caches[0]
        assert caches[5] == caches[6]

    def test_interval_one_equals_dense_path(self, small_nets):
        from flowdet.aggregation import flow_guided_gru
        from flowdet.detector import detect_from_maps, extract_features, lh_score_maps, rpn_intermediate
        from flowdet.lightflow import predict_flow, resample_flow
        from flowdet.ops import bilinear_resize

        cfg = small_cfg(key_interval=1)
        frames = static_frames(4, seed=3)
        state = None
        pipeline_dets = []
        for frame in frames:
            dets, state = process_frame(state, frame, small_nets, cfg)
            pipeline_dets.append(dets)

        with no_grad():
            manual = []
            f_agg_prev = None
            prev_half = None
            for frame in frames:
                half = Tensor(bilinear_resize(frame.data, 32, 32))
                feats = extract_features(frame, small_nets.backbone_spec, small_nets.det_params)
                if f_agg_prev is None:
                    f_agg = feats
                else:
                    flow = predict_flow(prev_half, half, small_nets.flow_spec, small_nets.flow_params)
                    f_agg = flow_guided_gru(
                        feats, f_agg_prev, resample_flow(flow, 4, 4), small_nets.gru_params
                    )
                rpn = rpn_intermediate(f_agg, small_nets.det_params)
                lh = lh_score_maps(f_agg, small_nets.det_params)
                manual.append(detect_from_maps(rpn, lh, small_nets.det_params, small_nets.det_cfg, (64, 64)))
                f_agg_prev, prev_half = f_agg, half
        assert pipeline_dets == manual

    def test_shape_drift_rejected(self, small_nets):
        cfg = small_cfg()
        state = None
        _, state = process_frame(state, static_frames(1)[0], small_nets, cfg)
        with pytest.raises(ValueError, match="drift"):
            process_frame(state, Tensor(np.zeros((1, 3, 96, 96), dtype=np.float32)), small_nets, cfg)


class TestFrameLoading:
    def test_empty_directory(self, tmp_path):
        assert list(load_frame_sequence(tmp_path, small_cfg())) == []

    def test_png_ordering_and_resize(self, tmp_path):
        rng = np.random.default_rng(4)
        for i in (1, 2, 3):
            arr = (rng.uniform(0, 1, (480, 640, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(tmp_path / f"{i:06d}.png")
        frames = list(load_frame_sequence(tmp_path, small_cfg(shorter_side=224)))
        assert [f.index for f in frames] == [0, 1, 2]
        # 480x640 -> 224x299, padded to the next multiple of 16
        assert frames[0].data.shape == (1, 3, 224, 304)
        assert frames[0].scale == pytest.approx(224 / 480)
        assert frames[0].orig_hw == (224, 299)

    def test_ppm_files_supported(self, tmp_path):
        rng = np.random.default_rng(12)
        arr = (rng.uniform(0, 1, (64, 64, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / "000001.ppm")
        frames = list(load_frame_sequence(tmp_path, small_cfg()))
        assert len(frames) == 1 and frames[0].data.shape == (1, 3, 64, 64)

    def test_tensor_stream_source(self, tmp_path):
        rng = np.random.default_rng(5)
        path = tmp_path / "clip.tnsr"
        with open(path, "wb") as f:
            for _ in range(2):
                save_tensor(f, rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
        frames = list(load_frame_sequence(path, small_cfg()))
        assert len(frames) == 2 and frames[0].data.shape == (1, 3, 64, 64)

    def test_inconsistent_dims_rejected(self, tmp_path):
        Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(tmp_path / "000001.png")
        Image.fromarray(np.zeros((64, 80, 3), np.uint8)).save(tmp_path / "000002.png")
        with pytest.raises(ValueError, match="inconsistent"):
            list(load_frame_sequence(tmp_path, small_cfg()))

    def test_bad_source(self, tmp_path):
        with pytest.raises(ValueError, match="neither"):
            list(load_frame_sequence(tmp_path / "missing", small_cfg()))


class TestRunVideo:
    @staticmethod
    def _write_clip(tmp_path, count, h=64, w=64, static=True, seed=6):
        rng = np.random.default_rng(seed)
        base = (rng.uniform(0, 1, (h, w, 3)) * 255).astype(np.uint8)
        for i in range(count):
            img = base if static else (rng.uniform(0, 1, (h, w, 3)) * 255).astype(np.uint8)
            Image.fromarray(img).save(tmp_path / f"{i:06d}.png")

    def test_empty_source(self, tmp_path):
        summary = run_video(small_cfg(), tmp_path, sink=None)
        assert summary["frames"] == 0 and summary["key_frames"] == 0
        assert summary["total_flops"] == 0

    def test_twenty_frames_two_keys(self, tmp_path):
        self._write_clip(tmp_path, 20)
        cfg = small_cfg(key_interval=10)
        sink = stdio.StringIO()
        summary = run_video(cfg, tmp_path, sink=sink)
        assert summary["frames"] == 20 and summary["key_frames"] == 2
        lines = sink.getvalue().strip().splitlines()
        assert len(lines) == 20
        assert lines[0].split()[:2] == ["0", "1"]
        assert lines[1].split()[:2] == ["1", "0"]
        assert lines[10].split()[:2] == ["10", "1"]

    def test_average_flops_matches_analyzer(self, tmp_path):
        from flowdet.analyzer import SystemCostConfig, amortized_cost

        self._write_clip(tmp_path, 20)
        cfg = small_cfg(key_interval=10)
        summary = run_video(cfg, tmp_path, sink=None)
        expected = amortized_cost(
            SystemCostConfig(
                alpha=cfg.alpha, beta=cfg.beta, key_interval=10, det_hw=(64, 64), scale_interface=False
            )
        ).per_frame_flops
        assert abs(summary["avg_flops"] - expected) / expected < 1e-3

    def test_deterministic_records(self, tmp_path):
        self._write_clip(tmp_path, 6, static=False)
        cfg = small_cfg(key_interval=3)
        a, b = stdio.StringIO(), stdio.StringIO()
        run_video(cfg, tmp_path, sink=a)
        run_video(cfg, tmp_path, sink=b)
        assert a.getvalue() == b.getvalue()


def test_record_format():
    from flowdet.detector import Detection

    dets = [Detection(class_id=3, score=0.87654, box=(1.234, 5.678, 50.0, 60.0))]
    assert format_record(7, True, dets) == "7 1 3 0.8765 1.23 5.68 50.00 60.00"
    assert format_record(8, False, []) == "8 0"


def test_checkpoint_round_trip_through_nets(tmp_path):
    from flowdet.pipeline import save_nets

    cfg = small_cfg()
    nets = build_nets(cfg)
    path = tmp_path / "nets.ckpt"
    save_nets(path, nets)
    reloaded = build_nets(small_cfg(seed=99), checkpoint=path)
    for name, tensor in nets.flow_params.items():
        np.testing.assert_array_equal(reloaded.flow_params[name].data, tensor.data)
    for name, tensor in nets.det_params.items():
        np.testing.assert_array_equal(reloaded.det_params[name].data, tensor.data)
    np.testing.assert_array_equal(reloaded.gru_params.w_z.data, nets.gru_params.w_z.data)
