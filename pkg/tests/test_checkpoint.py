import numpy as np
import pytest

from tkpcl.checkpoint import Checkpoint, CheckpointError, dumps, load, loads, save


def example():
    rng = np.random.default_rng(0)
    return Checkpoint(config={"train.k": 6, "run_id": "r"}, meta={"epoch": 3},
                      blobs={"a": rng.normal(size=(2, 3)), "b": np.array(1.5), "c": rng.normal(size=(4,))})


def test_round_trip_bitwise(tmp_path):
    ck = example()
    save(tmp_path / "x.tkp", ck)
    back = load(tmp_path / "x.tkp")
    assert back.config == ck.config and back.meta == ck.meta
    assert list(back.blobs) == list(ck.blobs)
    for k in ck.blobs:
        assert back.blobs[k].shape == ck.blobs[k].shape
        assert back.blobs[k].tobytes() == ck.blobs[k].tobytes()


def test_serialisation_is_deterministic():
    assert dumps(example()) == dumps(example())


def test_no_temp_file_left(tmp_path):
    save(tmp_path / "x.tkp", example())
    assert [p.name for p in tmp_path.iterdir()] == ["x.tkp"]


def test_corruption_detected():
    data = dumps(example())
    with pytest.raises(CheckpointError):
        loads(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        loads(data[:-5])
    with pytest.raises(CheckpointError):
        loads(data + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load(tmp_path / "none.tkp")
