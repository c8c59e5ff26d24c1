"""On-disk formats: EEGD datasets, model checkpoints, atomic text writes.

EEGD layout (all little-endian)::

    b"EEGD" | version u8 | C, T, N, K, S as u32
    N x ( y u32 | s u32 | x as C*T float64, row-major )
    CRC32 u32 over every preceding byte

Checkpoint layout::

    b"PTSMCKPT" | version u8 | header length u32 | header JSON (utf-8)
    float64 payload of every tensor listed in the header, in order
    CRC32 u32 over every preceding byte

The checkpoint header holds the config, its hash, the tensor table
(name, kind, shape) and small scalar state such as the step counter.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CheckpointError,
    ChecksumMismatchError,
    ContractError,
    DatasetFormatError,
    DatasetTruncatedError,
)
from .synthdata import EegTrial

EEGD_MAGIC = b"EEGD"
EEGD_VERSION = 1
_EEGD_HEADER = struct.Struct("<4sB5I")

CKPT_MAGIC = b"PTSMCKPT"
CKPT_VERSION = 1


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _record_dtype(c: int, t: int) -> np.dtype:
    return np.dtype([("y", "<u4"), ("s", "<u4"), ("x", "<f8", (c, t))])


def encode_dataset(trials: Sequence[EegTrial], n_classes: int | None = None, n_subjects: int | None = None) -> bytes:
    if not trials:
        raise ContractError("cannot encode an empty dataset")
    c, t = trials[0].x.shape
    if any(tr.x.shape != (c, t) for tr in trials):
        raise ContractError("all trials must share one (C, T) shape")
    k = n_classes if n_classes is not None else max(tr.y for tr in trials) + 1
    s = n_subjects if n_subjects is not None else max(tr.s for tr in trials) + 1
    rec = np.empty(len(trials), dtype=_record_dtype(c, t))
    rec["y"] = [tr.y for tr in trials]
    rec["s"] = [tr.s for tr in trials]
    rec["x"] = np.stack([tr.x for tr in trials])
    body = _EEGD_HEADER.pack(EEGD_MAGIC, EEGD_VERSION, c, t, len(trials), k, s) + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(blob: bytes) -> tuple[list[EegTrial], dict[str, int]]:
    if len(blob) < len(EEGD_MAGIC):
        if EEGD_MAGIC.startswith(blob):
            raise DatasetTruncatedError("file ends inside the magic bytes")
        raise DatasetFormatError("not an EEGD file")
    if blob[:4] != EEGD_MAGIC:
        raise DatasetFormatError("not an EEGD file (bad magic)")
    if len(blob) < _EEGD_HEADER.size:
        raise DatasetTruncatedError("file ends inside the header")
    _, version, c, t, n, k, s = _EEGD_HEADER.unpack_from(blob)
    if version != EEGD_VERSION:
        raise DatasetFormatError(f"unsupported EEGD version {version}")
    if min(c, t, k, s) == 0:
        raise DatasetFormatError("header declares a zero dimension")
    dt = _record_dtype(c, t)
    expected = _EEGD_HEADER.size + n * dt.itemsize + 4
    if len(blob) < expected:
        raise DatasetTruncatedError(f"expected {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise DatasetFormatError(f"{len(blob) - expected} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[: expected - 4]) != crc:
        raise ChecksumMismatchError("CRC32 trailer does not match contents")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=_EEGD_HEADER.size)
    if n and (rec["y"].max() >= k or rec["s"].max() >= s):
        raise DatasetFormatError("labels exceed the declared class/subject counts")
    trials = [EegTrial(np.array(r["x"], dtype=np.float64), int(r["y"]), int(r["s"])) for r in rec]
    return trials, {"n_channels": c, "n_times": t, "n_trials": n, "n_classes": k, "n_subjects": s}


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_dataset(
    trials: Sequence[EegTrial],
    path: str | Path,
    metadata: dict | None = None,
    n_classes: int | None = None,
    n_subjects: int | None = None,
) -> None:
    """Write ``trials`` as EEGD, plus a JSON sidecar when ``metadata`` is given."""
    atomic_write_bytes(path, encode_dataset(trials, n_classes, n_subjects))
    if metadata is not None:
        atomic_write_text(sidecar_path(path), json.dumps(metadata, indent=2, sort_keys=True))


def load_dataset(path: str | Path) -> list[EegTrial]:
    return load_dataset_full(path)[0]


def load_dataset_full(path: str | Path) -> tuple[list[EegTrial], dict[str, int], dict | None]:
    """Trials, header fields and sidecar metadata (``None`` if there is no sidecar)."""
    trials, header = decode_dataset(Path(path).read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else None
    return trials, header, meta


def file_checksum(path: str | Path) -> str:
    return f"{zlib.crc32(Path(path).read_bytes()):08x}"


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(tensors: dict[str, dict[str, np.ndarray]], header: dict) -> bytes:
    """``tensors`` maps a kind ("param", "buffer", ...) to named arrays."""
    table = []
    payload = []
    for kind in sorted(tensors):
        for name in sorted(tensors[kind]):
            arr = np.asarray(tensors[kind][name], dtype="<f8")
            table.append({"kind": kind, "name": name, "shape": list(arr.shape)})
            payload.append(np.ascontiguousarray(arr).tobytes())
    head = dict(header, tensors=table)
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    body = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(head_bytes)) + head_bytes + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a PTSM checkpoint (bad magic)")
    if len(blob) < 17:
        raise CheckpointError("checkpoint truncated")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<BI", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 13
    header = json.loads(blob[start : start + hlen].decode())
    offset = start + hlen
    tensors: dict[str, dict[str, np.ndarray]] = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        tensors.setdefault(entry["kind"], {})[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(blob) - 4:
        raise CheckpointError("checkpoint payload size does not match its header")
    return tensors, header
