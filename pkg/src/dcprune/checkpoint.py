"""DCPG1 container: magic, u64 header length, JSON header, float64 blob.

Layout::

    b"DCPG1\\n" | <u64 little-endian header length> | header (UTF-8 JSON) | blob

The header is ``{"config": {...}, "tensors": [{"name", "shape", "offset",
"len"}, ...]}`` plus optional extra keys; offsets and lengths count float64
elements from the start of the blob.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCPG1\n"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class HeaderMismatchError(CheckpointError):
    pass


def write_container(path, tensors: dict, config: dict, extra: dict | None = None) -> None:
    entries, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": int(arr.size)})
        offset += int(arr.size)
    header = {"config": config, "tensors": entries}
    if extra:
        header.update(extra)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(tensors[e["name"]], dtype="<f8").tobytes() for e in entries)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def read_header(path) -> dict:
    return _read(path, header_only=True)[0]


def read_container(path) -> tuple[dict, dict]:
    """Returns (header, {name: array})."""
    return _read(path, header_only=False)


def _read(path, header_only: bool):
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise TruncatedBlobError(f"{path}: file ends inside the header length field")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise TruncatedBlobError(f"{path}: header declares {hlen} bytes, only {len(raw) - pos} present")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatchError(f"{path}: header is not valid JSON ({exc})") from exc
    pos += hlen
    if not isinstance(header, dict) or "tensors" not in header or "config" not in header:
        raise HeaderMismatchError(f"{path}: header lacks 'config' or 'tensors'")
    if header_only:
        return header, {}
    blob = raw[pos:]
    n_floats = len(blob) // 8
    tensors = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        if int(np.prod(shape)) != e["len"]:
            raise HeaderMismatchError(f"{path}: tensor {e['name']} shape {shape} disagrees with len {e['len']}")
        if e["offset"] + e["len"] > n_floats:
            raise TruncatedBlobError(
                f"{path}: tensor {e['name']} needs floats [{e['offset']}, {e['offset'] + e['len']}), "
                f"blob holds {n_floats}")
        arr = np.frombuffer(blob, dtype="<f8", count=e["len"], offset=8 * e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(shape)
    return header, tensors


def save_checkpoint(gen, path) -> None:
    gen.check()
    write_container(path, gen.weights, gen.config.to_dict(), extra={"kind": "generator"})


def load_checkpoint(path):
    from .synthnet import Generator, GeneratorConfig, param_shapes

    header, tensors = read_container(path)
    config = GeneratorConfig.from_dict(header["config"])
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise HeaderMismatchError(f"{path}: tensor {name} missing")
        if tensors[name].shape != shape:
            raise HeaderMismatchError(f"{path}: tensor {name} has shape {tensors[name].shape}, config implies {shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise HeaderMismatchError(f"{path}: unexpected tensors {extra}")
    return Generator(config, {name: tensors[name] for name in expected})
