"""Grid containers, intensity normalization, cropping and the VVOL/1 file format.

Axis order is (H, W, L) with the last axis fastest in memory. Displacement
components (u_x, u_y, u_z) follow the same axis order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = "VVOL"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


class VolumeFormatError(ValueError):
    """Raised when a VVOL file cannot be decoded."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense multi-channel scalar grid, ``data`` shaped (C, H, W, L)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"Volume data must be (C, H, W, L), got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, Volume) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer region labels on an (H, W, L) grid; 0 is background."""

    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise ValueError(f"LabelMap data must be (H, W, L), got {raw.shape}")
        if raw.dtype.kind == "f" and not np.all(raw == np.round(raw)):
            raise ValueError("LabelMap data must be integer valued")
        data = raw.astype(np.int32)
        if data.size and data.min() < 0:
            raise ValueError("LabelMap labels must be non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def labels(self) -> list:
        return [int(v) for v in np.unique(self.data) if v != 0]

    def __eq__(self, other):
        return isinstance(other, LabelMap) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement in voxel units, ``data`` shaped (3, h, w, l)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError(f"DisplacementField data must be (3, h, w, l), got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    @classmethod
    def zeros(cls, shape) -> "DisplacementField":
        return cls(np.zeros((3, *shape), dtype=np.float32))

    def __eq__(self, other):
        return isinstance(other, DisplacementField) and np.array_equal(self.data, other.data)


GridObject = Union[Volume, LabelMap, DisplacementField]


def _header_for(obj: GridObject) -> tuple[dict, np.ndarray]:
    if isinstance(obj, Volume):
        kind, dtype, channels, arr = "image", "f32", obj.channels, obj.data
    elif isinstance(obj, LabelMap):
        kind, dtype, channels, arr = "labels", "i32", 1, obj.data[None]
    elif isinstance(obj, DisplacementField):
        kind, dtype, channels, arr = "field", "f32", 3, obj.data
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "kind": kind,
        "shape": [int(s) for s in arr.shape[1:]],
        "channels": int(channels),
        "dtype": dtype,
        "order": "C",
    }
    return header, np.ascontiguousarray(arr, dtype=_DTYPES[dtype])


def encode_volume(obj: GridObject) -> bytes:
    header, payload = _header_for(obj)
    return json.dumps(header).encode("utf-8") + b"\n" + payload.tobytes(order="C")


def decode_volume(blob: bytes) -> GridObject:
    newline = blob.find(b"\n")
    if newline < 0:
        raise VolumeFormatError("header: missing newline terminator")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"header: not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise VolumeFormatError("header: expected a JSON object")
    if header.get("magic") != MAGIC:
        raise VolumeFormatError(f"magic: expected {MAGIC!r}, got {header.get('magic')!r}")
    if header.get("version") != VERSION:
        raise VolumeFormatError(f"version: unsupported value {header.get('version')!r}")
    if header.get("order", "C") != "C":
        raise VolumeFormatError(f"order: unsupported value {header.get('order')!r}")
    kind = header.get("kind")
    if kind not in ("image", "labels", "field"):
        raise VolumeFormatError(f"kind: unsupported value {kind!r}")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"dtype: unsupported value {dtype!r}")
    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and s > 0 for s in shape)):
        raise VolumeFormatError(f"shape: expected three positive integers, got {shape!r}")
    channels = header.get("channels")
    if not isinstance(channels, int) or channels < 1:
        raise VolumeFormatError(f"channels: expected a positive integer, got {channels!r}")
    expected_dtype = {"image": "f32", "labels": "i32", "field": "f32"}[kind]
    if dtype != expected_dtype:
        raise VolumeFormatError(f"dtype: kind {kind!r} requires {expected_dtype!r}, got {dtype!r}")
    if kind == "field" and channels != 3:
        raise VolumeFormatError(f"channels: kind 'field' requires 3, got {channels}")
    if kind == "labels" and channels != 1:
        raise VolumeFormatError(f"channels: kind 'labels' requires 1, got {channels}")

    count = channels * shape[0] * shape[1] * shape[2]
    payload = blob[newline + 1:]
    nbytes = count * _DTYPES[dtype].itemsize
    if len(payload) != nbytes:
        raise VolumeFormatError(f"payload: expected {nbytes} bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(channels, *shape)
    if kind == "image":
        return Volume(arr.astype(np.float32))
    if kind == "labels":
        return LabelMap(arr[0].astype(np.int32))
    return DisplacementField(arr.astype(np.float32))


def save_volume(obj: GridObject, path) -> None:
    Path(path).write_bytes(encode_volume(obj))


def load_volume(path) -> GridObject:
    return decode_volume(Path(path).read_bytes())


def normalize_minmax(v: Volume) -> Volume:
    """Affinely rescale intensities so the minimum is 0 and the maximum 1."""
    data = np.asarray(v.data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if not hi > lo:
        raise ValueError("normalize_minmax: volume is constant (max == min)")
    return Volume(((data - lo) / (hi - lo)).astype(np.float32))


def center_crop(v, target):
    """Crop the trailing three axes to ``target``; odd margins drop the extra voxel at the end."""
    target = tuple(int(t) for t in target)
    shape = v.shape
    if len(target) != 3 or any(t < 1 for t in target):
        raise ValueError(f"center_crop: target must be three positive sizes, got {target}")
    if any(t > s for t, s in zip(target, shape)):
        raise ValueError(f"center_crop: target {target} exceeds source shape {tuple(shape)}")
    starts = [(s - t) // 2 for s, t in zip(shape, target)]
    index = tuple(slice(a, a + t) for a, t in zip(starts, target))
    if isinstance(v, LabelMap):
        return LabelMap(v.data[index])
    if isinstance(v, DisplacementField):
        return DisplacementField(v.data[(slice(None),) + index])
    if isinstance(v, Volume):
        return Volume(v.data[(slice(None),) + index])
    raise TypeError(f"center_crop: unsupported type {type(v).__name__}")
