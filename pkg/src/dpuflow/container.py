"""Two-file tensor container: a UTF-8 JSON manifest next to a binary blob.

``model.json`` holds structure and per-tensor records, ``model.bin`` holds the
raw little-endian payloads back to back. Every tensor record carries a CRC32
of its byte range so corruption is caught at load time rather than as silent
numeric garbage. Model, quantized-model and compiled-model files all reuse
this layer and differ only in their manifest schema.
"""

import json
import pathlib
import zlib

import numpy as np

from .errors import ContainerError

FORMAT_VERSION = 1

# on-disk dtype codes, always little endian regardless of host
DTYPE_CODES = {
    "fp32": "<f4",
    "int8": "i1",
    "int32": "<i4",
    "int64": "<i8",
}
_CODE_FOR_KIND = {np.dtype(c).str: name for name, c in DTYPE_CODES.items()}


def dtype_name(array):
    key = array.dtype.newbyteorder("<").str if array.dtype.itemsize > 1 else array.dtype.str
    try:
        return _CODE_FOR_KIND[key]
    except KeyError:
        raise ContainerError("unsupported tensor dtype %r" % (array.dtype,)) from None


class BlobBuilder:
    """Accumulates tensors into one blob and the matching manifest records."""

    def __init__(self):
        self._chunks = []
        self._records = {}
        self._offset = 0

    def add(self, name, array):
        if name in self._records:
            raise ContainerError("duplicate tensor name %r" % name)
        arr = np.ascontiguousarray(array)
        raw = arr.astype(DTYPE_CODES[dtype_name(arr)], copy=False).tobytes()
        self._records[name] = {
            "dtype": dtype_name(arr),
            "shape": list(arr.shape),
            "offset": self._offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
        }
        self._chunks.append(raw)
        self._offset += len(raw)
        return self._records[name]

    @property
    def records(self):
        return dict(self._records)

    def tobytes(self):
        return b"".join(self._chunks)


def read_tensor(record, blob):
    """Decode one manifest record from the blob, verifying its checksum."""
    off, n = record["offset"], record["nbytes"]
    if off < 0 or off + n > len(blob):
        raise ContainerError("tensor range [%d, %d) outside blob of %d bytes" % (off, off + n, len(blob)))
    raw = blob[off : off + n]
    if (zlib.crc32(raw) & 0xFFFFFFFF) != record["crc32"]:
        raise ContainerError("checksum mismatch for tensor at offset %d" % off)
    arr = np.frombuffer(raw, dtype=DTYPE_CODES[record["dtype"]])
    expect = 1
    for d in record["shape"]:
        expect *= d
    if arr.size != expect:
        raise ContainerError("tensor payload holds %d values, shape %r wants %d" % (arr.size, record["shape"], expect))
    return arr.reshape(record["shape"]).copy()


def attach_tensors(manifest, blob):
    """Decode every tensor record in the manifest. Returns name -> ndarray."""
    return {name: read_tensor(rec, blob) for name, rec in manifest.get("tensors", {}).items()}


def _paths(path):
    p = pathlib.Path(path)
    if p.suffix == ".json":
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save_container(path, manifest, blob):
    """Write ``<stem>.json`` and ``<stem>.bin``. Returns the manifest path."""
    jpath, bpath = _paths(path)
    doc = dict(manifest)
    doc.setdefault("format_version", FORMAT_VERSION)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    bpath.write_bytes(blob)
    return jpath


def load_container(path, expected_format=None):
    """Read manifest + blob, checking format name and version."""
    jpath, bpath = _paths(path)
    if not jpath.exists():
        raise ContainerError("no such file: %s" % jpath)
    try:
        manifest = json.loads(jpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ContainerError("manifest %s is not valid JSON: %s" % (jpath, e)) from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerError(
            "unsupported format_version %r in %s (this build reads version %d)"
            % (version, jpath, FORMAT_VERSION)
        )
    if expected_format is not None and manifest.get("format") != expected_format:
        raise ContainerError(
            "%s holds a %r file, expected %r" % (jpath, manifest.get("format"), expected_format)
        )
    blob = bpath.read_bytes() if bpath.exists() else b""
    if manifest.get("tensors") and not blob:
        raise ContainerError("manifest %s references tensors but %s is missing" % (jpath, bpath))
    return manifest, blob
