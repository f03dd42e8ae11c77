"""CLI surface: flags, outputs, exit codes, cross-checks."""

import re

import numpy as np
import pytest
from PIL import Image

from flowdet.cli import main


def get_value(output, key):
    match = re.search(rf"^{key} = ([-\d.e+]+)", output, re.MULTILINE)
    assert match, f"{key!r} not found in output:\n{output}"
    return float(match.group(1))


class TestAnalyze:
    def test_light_flow_reference(self, capsys):
        assert main(["analyze", "--net", "light-flow", "--beta", "1.0", "--input", "512x384"]) == 0
        out = capsys.readouterr().out
        assert abs(get_value(out, "params") - 2.6) <= 0.13
        assert abs(get_value(out, "flops") - 0.82) <= 0.082

    def test_system_alpha1_beta05(self, capsys):
        assert main(["analyze", "--net", "system", "--alpha", "1.0", "--beta", "0.5", "--l", "10"]) == 0
        out = capsys.readouterr().out
        assert abs(get_value(out, "params") - 7.1) <= 0.71
        assert abs(get_value(out, "per_frame_flops") - 0.34) <= 0.034

    def test_single_frame_baseline(self, capsys):
        code = main(["analyze", "--net", "system", "--l", "1", "--no-flow", "--no-gru", "--alpha", "1.0"])
        assert code == 0
        out = capsys.readouterr().out
        assert abs(get_value(out, "per_frame_flops") - 2.39) <= 0.239

    def test_per_layer_table(self, capsys):
        assert main(["analyze", "--net", "flownet", "--per-layer"]) == 0
        out = capsys.readouterr().out
        assert "conv1" in out and "TOTAL" in out

    def test_invalid_net_rejected(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["analyze", "--net", "bogus"])
        assert exc.value.code == 2

    def test_invalid_input_format(self):
        with pytest.raises(SystemExit) as exc:
            main(["analyze", "--input", "whatever"])
        assert exc.value.code == 2


def write_clip(path, count, h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    base = (rng.uniform(0, 1, (h, w, 3)) * 255).astype(np.uint8)
    for i in range(count):
        Image.fromarray(base).save(path / f"{i:06d}.png")


class TestRun:
    def test_requires_weights_source(self, tmp_path, capsys):
        (tmp_path / "frames").mkdir()
        assert main(["run", "--input", str(tmp_path / "frames")]) == 1
        assert "random-weights" in capsys.readouterr().err

    def test_static_clip(self, tmp_path, capsys):
        frames = tmp_path / "frames"
        frames.mkdir()
        write_clip(frames, 8)
        out_file = tmp_path / "dets.txt"
        code = main(
            [
                "run",
                "--input",
                str(frames),
                "--output",
                str(out_file),
                "--random-weights",
                "--seed",
                "0",
                "--l",
                "4",
                "--alpha",
                "0.5",
                "--beta",
                "0.25",
                "--shorter-side",
                "64",
                "--score-thresh",
                "0.001",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert get_value(out, "frames") == 8
        assert get_value(out, "key_frames") == 2
        lines = out_file.read_text().strip().splitlines()
        assert len(lines) == 8
        # zero-flow checkpoint on a static clip: non-key records match their key frame
        key0 = lines[0].split(maxsplit=2)[2]
        for i in (1, 2, 3):
            assert lines[i].split(maxsplit=2)[2] == key0

    def test_interval_flag_changes_key_flags_only(self, tmp_path):
        frames = tmp_path / "frames"
        frames.mkdir()
        write_clip(frames, 6)
        outs = {}
        for l in (1, 6):
            out_file = tmp_path / f"dets_{l}.txt"
            main(
                [
                    "run", "--input", str(frames), "--output", str(out_file), "--random-weights",
                    "--seed", "0", "--l", str(l), "--alpha", "0.5", "--beta", "0.25",
                    "--shorter-side", "64", "--score-thresh", "0.001",
                ]
            )
            outs[l] = out_file.read_text().strip().splitlines()
        assert len(outs[1]) == len(outs[6]) == 6
        assert [ln.split()[1] for ln in outs[1]] == ["1"] * 6
        assert [ln.split()[1] for ln in outs[6]] == ["1"] + ["0"] * 5

    def test_summary_matches_analyze(self, tmp_path, capsys):
        frames = tmp_path / "frames"
        frames.mkdir()
        write_clip(frames, 6)
        code = main(
            [
                "run", "--input", str(frames), "--random-weights", "--seed", "0",
                "--l", "3", "--alpha", "1.0", "--beta", "1.0",
                "--shorter-side", "64", "--score-thresh", "0.5",
            ]
        )
        assert code == 0
        run_avg = get_value(capsys.readouterr().out, "avg_flops")
        assert main(["analyze", "--net", "system", "--alpha", "1.0", "--beta", "1.0", "--l", "3", "--input", "64x64"]) == 0
        analyze_flops = get_value(capsys.readouterr().out, "per_frame_flops") * 1e9
        assert abs(run_avg - analyze_flops) / analyze_flops < 1e-3

    def test_config_file_override(self, tmp_path, capsys):
        frames = tmp_path / "frames"
        frames.mkdir()
        write_clip(frames, 2)
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "key_interval = 2\nalpha = 0.5\nbeta = 0.25\nshorter_side = 64\n"
            "rpn_post_nms = 50\nfinal_nms_iou = 0.4\n"
        )
        code = main(["run", "--input", str(frames), "--random-weights", "--config", str(cfg), "--score-thresh", "0.5"])
        assert code == 0
        out = capsys.readouterr().out
        assert get_value(out, "key_frames") == 1
        assert "alpha = 0.5" in out

    def test_unknown_config_key(self, tmp_path, capsys):
        frames = tmp_path / "frames"
        frames.mkdir()
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus = 1\n")
        assert main(["run", "--input", str(frames), "--random-weights", "--config", str(cfg)]) == 1
        assert "bogus" in capsys.readouterr().err


class TestTrainFlow:
    def test_tiny_run_writes_checkpoint(self, tmp_path, capsys):
        ckpt = tmp_path / "flow.ckpt"
        code = main(
            [
                "train-flow", "--beta", "0.25", "--size", "64", "--pairs", "4",
                "--iterations", "2", "--batch", "2", "--seed", "0", "--out", str(ckpt),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "epoch   0" in out and "final_epe" in out
        from flowdet.io import load_checkpoint

        loaded = load_checkpoint(ckpt)
        assert any(k.startswith("flow/") for k in loaded)


class TestSweep:
    def test_grid_rows(self, capsys):
        assert main(["sweep", "--alphas", "1.0,0.5", "--betas", "1.0,0.5", "--ls", "10"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "alpha,beta,l,params,flops_per_frame"
        assert len(lines) == 5

    def test_flops_monotone_in_alpha(self, capsys):
        main(["sweep", "--alphas", "0.5,0.75,1.0", "--betas", "1.0", "--ls", "10"])
        lines = capsys.readouterr().out.strip().splitlines()[1:]
        flops = [float(ln.split(",")[4]) for ln in lines]
        assert flops == sorted(flops)

    def test_interval_sweep_strictly_decreasing(self, capsys):
        main(["sweep", "--alphas", "1.0", "--betas", "1.0", "--ls", ",".join(str(l) for l in range(1, 21))])
        lines = capsys.readouterr().out.strip().splitlines()[1:]
        flops = [float(ln.split(",")[4]) for ln in lines]
        assert all(a > b for a, b in zip(flops, flops[1:]))

    def test_empty_grid(self, capsys):
        assert main(["sweep", "--alphas", "", "--betas", "1.0", "--ls", "10"]) == 1

    def test_csv_file_output(self, tmp_path):
        out = tmp_path / "grid.csv"
        assert main(["sweep", "--alphas", "1.0", "--betas", "1.0", "--ls", "10", "--out", str(out)]) == 0
        assert out.read_text().startswith("alpha,beta,l,")


class TestSelftest:
    def test_passes(self, capsys):
        assert main(["selftest", "--instances", "2"]) == 0
        out = capsys.readouterr().out
        assert "selftest: OK" in out
        assert "FAIL" not in out
