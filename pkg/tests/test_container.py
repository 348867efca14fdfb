import json

import numpy as np
import pytest

from dpuflow import container
from dpuflow.errors import ContainerError


def _bundle(tmp_path, **tensors):
    blob = container.BlobBuilder()
    for name, arr in tensors.items():
        blob.add(name, arr)
    manifest = {"format": "model", "tensors": blob.records}
    return container.save_container(tmp_path / "t.json", manifest, blob.tobytes())


def test_roundtrip_dtypes(tmp_path):
    w = np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2) / 7.0
    q = np.array([-128, 0, 127], dtype=np.int8)
    b = np.array([-(2**31), 2**31 - 1], dtype=np.int32)
    path = _bundle(tmp_path, w=w, q=q, b=b)
    manifest, blob = container.load_container(path)
    out = container.attach_tensors(manifest, blob)
    assert out["w"].dtype == np.float32 and np.array_equal(out["w"], w)
    assert out["q"].dtype == np.int8 and np.array_equal(out["q"], q)
    assert out["b"].dtype == np.int32 and np.array_equal(out["b"], b)


def test_blob_offsets_are_packed(tmp_path):
    blob = container.BlobBuilder()
    r1 = blob.add("a", np.zeros(3, np.int8))
    r2 = blob.add("b", np.zeros(2, np.float32))
    assert r1["offset"] == 0 and r1["nbytes"] == 3
    assert r2["offset"] == 3 and r2["nbytes"] == 8
    assert len(blob.tobytes()) == 11


def test_duplicate_tensor_name_rejected():
    blob = container.BlobBuilder()
    blob.add("a", np.zeros(1, np.int8))
    with pytest.raises(ContainerError, match="duplicate"):
        blob.add("a", np.zeros(1, np.int8))


def test_checksum_catches_corruption(tmp_path):
    path = _bundle(tmp_path, w=np.ones(16, np.float32))
    raw = bytearray((tmp_path / "t.bin").read_bytes())
    raw[5] ^= 0xFF
    (tmp_path / "t.bin").write_bytes(bytes(raw))
    manifest, blob = container.load_container(path)
    with pytest.raises(ContainerError, match="checksum"):
        container.attach_tensors(manifest, blob)


def test_version_mismatch_rejected(tmp_path):
    path = _bundle(tmp_path, w=np.ones(4, np.float32))
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ContainerError, match="format_version"):
        container.load_container(path)


def test_wrong_format_kind_rejected(tmp_path):
    path = _bundle(tmp_path, w=np.ones(4, np.float32))
    with pytest.raises(ContainerError, match="expected"):
        container.load_container(path, expected_format="qmodel")


def test_truncated_blob_rejected(tmp_path):
    path = _bundle(tmp_path, w=np.ones(16, np.float32))
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:10])
    manifest, blob = container.load_container(path)
    with pytest.raises(ContainerError, match="outside blob"):
        container.attach_tensors(manifest, blob)


def test_missing_blob_with_tensors_rejected(tmp_path):
    path = _bundle(tmp_path, w=np.ones(4, np.float32))
    (tmp_path / "t.bin").unlink()
    with pytest.raises(ContainerError, match="missing"):
        container.load_container(path)


def test_shape_payload_mismatch_rejected(tmp_path):
    path = _bundle(tmp_path, w=np.ones(4, np.float32))
    doc = json.loads(path.read_text())
    doc["tensors"]["w"]["shape"] = [5]
    path.write_text(json.dumps(doc))
    manifest, blob = container.load_container(path)
    with pytest.raises(ContainerError, match="shape"):
        container.attach_tensors(manifest, blob)
