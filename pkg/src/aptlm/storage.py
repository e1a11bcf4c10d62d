"""On-disk formats: tensor checkpoints, JSONL manifests, the metrics CSV."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"APTF"
VERSION = 1


def encode_checkpoint(tensors) -> bytes:
    """Serialize an ordered {name: array} map: header, tensor table, trailing CRC32."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    parts = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> dict:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an APTF checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(body):
                raise CheckpointError(f"truncated checkpoint: tensor {name!r} runs past the end")
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name in out:
                raise CheckpointError(f"duplicate tensor {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return out


def save_checkpoint(path, tensors):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_hash(*paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = ("step", "stage", "task", "loss", "loss_atm", "loss_agtg", "loss_atc", "lr",
                  "gn_encoder", "gn_aligner", "gn_audio_marker", "gn_lm")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


class MetricsLog:
    """Append-only CSV of per-step training metrics."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
