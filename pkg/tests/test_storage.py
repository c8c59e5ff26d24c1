import json
import struct
import zlib

import numpy as np
import pytest

from ptsm.errors import CheckpointError, ChecksumMismatchError, DatasetFormatError, DatasetTruncatedError
from ptsm.storage import (
    decode_checkpoint,
    decode_dataset,
    encode_checkpoint,
    encode_dataset,
    load_dataset,
    load_dataset_full,
    save_dataset,
)
from ptsm.synthdata import SyntheticSpec, generate, generate_with_structure, metadata


@pytest.fixture(scope="module")
def trials():
    return generate(SyntheticSpec(n_channels=3, n_times=16, n_subjects=3, trials_per_pair=4, seed=3))


def test_round_trip_is_bit_identical(tmp_path, trials):
    path = tmp_path / "d.eegd"
    save_dataset(trials, path)
    back = load_dataset(path)
    assert len(back) == len(trials)
    for a, b in zip(trials, back):
        assert a.y == b.y and a.s == b.s
        assert a.x.tobytes() == b.x.tobytes()
    # and re-encoding gives the same bytes
    assert encode_dataset(back) == path.read_bytes()


def test_header_and_sidecar(tmp_path):
    spec = SyntheticSpec(n_channels=2, n_times=8, n_subjects=2, trials_per_pair=2)
    tr, ps = generate_with_structure(spec)
    path = tmp_path / "d.eegd"
    save_dataset(tr, path, metadata(spec, ps), n_classes=2, n_subjects=2)
    _, header, meta = load_dataset_full(path)
    assert header == {"n_channels": 2, "n_times": 8, "n_trials": 8, "n_classes": 2, "n_subjects": 2}
    assert meta["spec"]["seed"] == 0
    assert len(meta["channel_std"]) == 2


def test_every_truncation_is_detected(trials):
    blob = encode_dataset(trials[:3])
    for cut in range(len(blob)):
        with pytest.raises((DatasetTruncatedError, DatasetFormatError)):
            decode_dataset(blob[:cut])
    with pytest.raises(DatasetTruncatedError):
        decode_dataset(blob[:-1])


def test_single_bit_flip_in_payload_fails_checksum(trials):
    blob = bytearray(encode_dataset(trials[:3]))
    blob[40] ^= 0x01
    with pytest.raises(ChecksumMismatchError):
        decode_dataset(bytes(blob))


def test_bad_magic_version_and_trailing_bytes(trials):
    blob = encode_dataset(trials[:2])
    with pytest.raises(DatasetFormatError):
        decode_dataset(b"XXXX" + blob[4:])
    with pytest.raises(DatasetFormatError):
        decode_dataset(blob[:4] + bytes([9]) + blob[5:])
    with pytest.raises(DatasetFormatError):
        decode_dataset(blob + b"\x00")


def test_labels_beyond_declared_counts_are_rejected(trials):
    blob = bytearray(encode_dataset(trials[:2], n_classes=2, n_subjects=3))
    hdr = struct.calcsize("<4sB5I")
    struct.pack_into("<I", blob, hdr, 7)  # first label
    body = bytes(blob[:-4])
    blob[-4:] = struct.pack("<I", zlib.crc32(body))
    with pytest.raises(DatasetFormatError):
        decode_dataset(bytes(blob))


def test_checkpoint_round_trip_and_corruption():
    rng = np.random.default_rng(0)
    tensors = {"param": {"b": rng.standard_normal(3), "a": rng.standard_normal((2, 2))}, "buffer": {"m": np.ones(1)}}
    blob = encode_checkpoint(tensors, {"step": 4})
    back, header = decode_checkpoint(blob)
    assert header == {"step": 4}
    for kind in tensors:
        for name, arr in tensors[kind].items():
            assert back[kind][name].tobytes() == arr.tobytes()
    assert encode_checkpoint(back, header) == blob
    bad = bytearray(blob)
    bad[-10] ^= 0xFF
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(bad))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"nope")


def test_atomic_write_leaves_no_temp_files(tmp_path, trials):
    save_dataset(trials, tmp_path / "x.eegd", {"k": 1})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.eegd", "x.eegd.json"]
    assert json.loads((tmp_path / "x.eegd.json").read_text()) == {"k": 1}
