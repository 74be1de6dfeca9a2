import json
import struct

import numpy as np
import pytest

from capstraffic.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from capstraffic.data import ScalingStats, WindowedDataset
from capstraffic.errors import CheckpointError, GeometryError
from capstraffic.models import ModelSpec, TrainConfig, build_model, predict, train
from capstraffic.tasks import TASKS, TaskSpec


@pytest.fixture(scope="module")
def trained():
    task = TaskSpec(1, 8, 8)
    rng = np.random.default_rng(0)
    inputs = rng.uniform(size=(32, 8, 8))
    labels = rng.uniform(size=(32, 8))
    stats = ScalingStats(5.0, 105.0)
    ds = WindowedDataset(inputs, labels, stats, task, stats.unscale(labels), np.arange(32).astype("datetime64[s]"))
    model = build_model(ModelSpec.cnn((4, 4, 4), seed=2), task)
    return train(model, ds, TrainConfig(epochs=2, batch_size=8), meta={"split": "x"}).checkpoint


def test_round_trip_bit_exact(trained, tmp_path):
    path = save_checkpoint(trained, tmp_path / "c.bin")
    back = load_checkpoint(path)
    window = np.random.default_rng(1).uniform(10, 90, size=(8, 8))
    np.testing.assert_array_equal(predict(back, window), predict(trained, window))
    assert back.step == trained.step == 8
    assert back.stats == trained.stats and back.meta == {"split": "x"}
    for k in trained.params:
        assert back.params[k].tobytes() == trained.params[k].tobytes()
        assert back.optimizer.m[k].tobytes() == trained.optimizer.m[k].tobytes()
        assert back.optimizer.v[k].tobytes() == trained.optimizer.v[k].tobytes()


def test_saving_is_byte_stable(trained, tmp_path):
    a = save_checkpoint(trained, tmp_path / "a.bin").read_bytes()
    b = save_checkpoint(load_checkpoint(tmp_path / "a.bin"), tmp_path / "b.bin").read_bytes()
    assert a == b
    assert not (tmp_path / "a.bin.tmp").exists()


def test_layout_header(trained, tmp_path):
    raw = save_checkpoint(trained, tmp_path / "c.bin").read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", raw)
    assert magic == MAGIC and version == 1
    header = json.loads(raw[20 : 20 + hlen])
    assert (header["task"]["L"], header["task"]["M"], header["task"]["N"]) == (1, 8, 8)
    assert {t["group"] for t in header["tensors"]} == {"param", "adam_m", "adam_v"}
    assert header["payload_bytes"] == len(raw) - 20 - hlen


def test_truncated_file(trained, tmp_path):
    raw = save_checkpoint(trained, tmp_path / "c.bin").read_bytes()
    for cut in (5, 30, len(raw) - 8):
        (tmp_path / "t.bin").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.bin")


def test_corruption_and_version(trained, tmp_path):
    raw = bytearray(save_checkpoint(trained, tmp_path / "c.bin").read_bytes())
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    (tmp_path / "f.bin").write_bytes(flipped)
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "f.bin")
    bumped = bytearray(raw)
    struct.pack_into("<I", bumped, 8, 99)
    (tmp_path / "v.bin").write_bytes(bumped)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")


def test_task_mismatch_is_geometry_error(tmp_path):
    model = build_model(ModelSpec.cnn((2, 2, 2)), TASKS["task1"])
    from capstraffic.layers import AdamState
    from capstraffic.models import Checkpoint

    ckpt = Checkpoint.capture(model, AdamState(), ScalingStats(0, 1), 0)
    save_checkpoint(ckpt, tmp_path / "c.bin")
    assert load_checkpoint(tmp_path / "c.bin", expect_task=TASKS["task1"]).task == TASKS["task1"]
    with pytest.raises(GeometryError):
        load_checkpoint(tmp_path / "c.bin", expect_task=TASKS["task3"])
