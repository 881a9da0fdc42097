"""File formats: WAV audio, the tensor container, JSON/JSONL helpers.

Container layout (all integers little-endian)::

    bytes 0-7    magic  b"D2MCONT\\0"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-15  uint32 header length H
    bytes 16..   H bytes of UTF-8 JSON header
    then         raw float32 little-endian payload

The header holds ``{"version", "meta", "tensors": [{"name", "group",
"shape", "offset", "count"}]}``; ``offset``/``count`` are in elements of
the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
from scipy.io import wavfile

from .codec import AudioClip

MAGIC = b"D2MCONT\0"
VERSION = 1


class ContainerError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# -- tensor container ------------------------------------------------------

def pack_container(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None,
                   groups: Mapping[str, str] | None = None) -> bytes:
    groups = groups or {}
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        entries.append({
            "name": name,
            "group": groups.get(name, ""),
            "shape": list(a.shape),
            "offset": offset,
            "count": int(a.size),
        })
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps(
        {"version": VERSION, "meta": dict(meta or {}), "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def unpack_container(data: bytes) -> tuple[dict[str, np.ndarray], dict, dict[str, str]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise ContainerError("not a d2m container (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt container header: {e}") from None
    payload = np.frombuffer(data, dtype="<f4", offset=16 + hlen)
    tensors, groups = {}, {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]: e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ContainerError(f"truncated payload for tensor {e['name']!r}")
        tensors[e["name"]] = chunk.reshape(e["shape"]).astype(np.float32)
        groups[e["name"]] = e["group"]
    return tensors, header["meta"], groups


def save_container(path, tensors, meta=None, groups=None) -> None:
    atomic_write_bytes(path, pack_container(tensors, meta, groups))


def load_container(path):
    with open(path, "rb") as f:
        return unpack_container(f.read())


def save_visual_features(path, features: np.ndarray, feature_rate: float) -> None:
    save_container(path, {"features": features}, {"kind": "visual", "feature_rate": float(feature_rate)})


def load_visual_features(path) -> tuple[np.ndarray, float]:
    tensors, meta, _ = load_container(path)
    if meta.get("kind") != "visual" or "features" not in tensors:
        raise ContainerError(f"{path} is not a visual-feature container")
    return tensors["features"], float(meta["feature_rate"])


# -- audio ---------------------------------------------------------------

def write_wav(path, clip: AudioClip, subtype: str = "float") -> None:
    """Write ``clip`` as RIFF WAV; ``subtype`` is ``"float"`` (32-bit) or ``"pcm16"``."""
    x = np.clip(clip.samples, -1.0, 1.0).T
    if subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif subtype == "float":
        data = x.astype("<f4")
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        wavfile.write(tmp, clip.sample_rate, data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_wav(path) -> AudioClip:
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    x = x[None, :] if x.ndim == 1 else x.T
    return AudioClip(x, sr)


# -- JSON lines ----------------------------------------------------------

def write_jsonl(path, records: Iterable[Mapping]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
