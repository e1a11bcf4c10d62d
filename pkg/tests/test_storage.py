import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aptlm import storage
from aptlm.errors import CheckpointError

shapes = hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)
tensors = st.dictionaries(st.text(min_size=1, max_size=8),
                          shapes.flatmap(lambda s: hnp.arrays(np.float32, s, elements=st.floats(-1e3, 1e3, width=32))),
                          max_size=5)


@settings(max_examples=60, deadline=None)
@given(tensors)
def test_checkpoint_round_trip(ts):
    blob = storage.encode_checkpoint(ts)
    back = storage.decode_checkpoint(blob)
    assert list(back) == list(ts)
    for k in ts:
        assert back[k].shape == ts[k].shape and back[k].tobytes() == ts[k].tobytes()
    assert storage.encode_checkpoint(back) == blob


def test_save_load(tmp_path):
    ts = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.float32(2.5)}
    storage.save_checkpoint(tmp_path / "x" / "m.aptf", ts)
    back = storage.load_checkpoint(tmp_path / "x" / "m.aptf")
    assert np.array_equal(back["a"], ts["a"]) and back["b.c"] == 2.5
    assert not list((tmp_path / "x").glob("*.tmp"))
    with pytest.raises(CheckpointError):
        storage.load_checkpoint(tmp_path / "missing.aptf")


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-1] + bytes([b[-1] ^ 1]),
    lambda b: b[:20] + bytes([b[20] ^ 0x40]) + b[21:],
    lambda b: b"XPTF" + b[4:],
    lambda b: b[:10],
])
def test_corruption_detected(mutate):
    blob = storage.encode_checkpoint({"w": np.ones((3, 3), np.float32)})
    with pytest.raises(CheckpointError):
        storage.decode_checkpoint(mutate(blob))


def test_version_and_truncation_checked():
    import struct
    import zlib
    blob = storage.encode_checkpoint({"w": np.ones(2, np.float32)})
    body = bytearray(blob[:-4])
    body[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version"):
        storage.decode_checkpoint(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
    short = blob[:-8]
    with pytest.raises(CheckpointError):
        storage.decode_checkpoint(short + struct.pack("<I", zlib.crc32(short)))


def test_manifest_round_trip(tmp_path):
    recs = [{"task": "AT", "target": "dog bark", "meta": {"b": 1, "a": "é"}}, {"x": [1, 2]}]
    storage.write_manifest(tmp_path / "m.jsonl", recs)
    assert storage.read_manifest(tmp_path / "m.jsonl") == recs


def test_metrics_log(tmp_path):
    log = storage.MetricsLog(tmp_path / "metrics.csv")
    log.append({"step": 0, "stage": 1, "task": "AT", "loss": 0.1, "lr": 1e-4})
    storage.MetricsLog(tmp_path / "metrics.csv").append({"step": 1, "stage": 1, "task": "SEC", "loss": 1 / 3})
    rows = storage.read_metrics(tmp_path / "metrics.csv")
    assert [r["step"] for r in rows] == ["0", "1"]
    assert float(rows[1]["loss"]) == 1 / 3  # repr keeps every bit
    assert rows[0]["gn_lm"] == "" and list(rows[0]) == list(storage.METRIC_COLUMNS)
