"""Checkpoint, tensor-stream, and config file formats."""

import numpy as np
import pytest

from flowdet.io import (
    iter_tensor_stream,
    load_checkpoint,
    load_class_names,
    parse_config,
    save_checkpoint,
    save_tensor,
)
from flowdet.tensor import Tensor


def test_checkpoint_round_trip_preserves_order(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "flow/Conv1.weight": Tensor(rng.standard_normal((8, 6, 3, 3)).astype(np.float32)),
        "flow/Conv1.bias": Tensor(np.zeros(8, dtype=np.float32)),
        "gru/w_z": Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32)),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name].data)


def test_checkpoint_versioned_header(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": Tensor(np.ones(3, dtype=np.float32))})
    raw = bytearray(path.read_bytes())
    assert raw[:4] == b"FDCP"
    raw[4] = 99  # corrupt the version field
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)


def test_tensor_stream(tmp_path):
    rng = np.random.default_rng(1)
    frames = [rng.standard_normal((1, 3, 8, 8)).astype(np.float32) for _ in range(3)]
    path = tmp_path / "frames.tnsr"
    with open(path, "wb") as f:
        for frame in frames:
            save_tensor(f, frame)
    loaded = list(iter_tensor_stream(path))
    assert len(loaded) == 3
    for got, want in zip(loaded, frames):
        np.testing.assert_array_equal(got, want)


def test_parse_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("alpha = 0.5\n# comment line\nkey_interval = 5  # trailing\n\nscore_thresh=0.2\n")
    assert parse_config(path) == {"alpha": "0.5", "key_interval": "5", "score_thresh": "0.2"}


def test_parse_config_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just some words\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config(path)


def test_class_names(tmp_path):
    path = tmp_path / "classes.txt"
    path.write_text("airplane\nantelope\nbear\n")
    assert load_class_names(path) == ["airplane", "antelope", "bear"]
    empty = tmp_path / "empty.txt"
    empty.write_text("\n")
    with pytest.raises(ValueError, match="empty"):
        load_class_names(empty)
