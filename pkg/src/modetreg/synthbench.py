"""Synthetic registration pairs with known ground-truth deformations."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .fieldops import folding_fraction, warp
from .volgrid import DisplacementField, LabelMap, Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

MAX_FIELD_ATTEMPTS = 20
LABEL_THRESHOLD = 0.25


@dataclass(frozen=True)
class SynthPair:
    fixed: Volume
    moving: Volume
    gt_field: DisplacementField
    labels_fixed: LabelMap
    labels_moving: LabelMap


class FieldGenerationError(RuntimeError):
    pass


def _blobs(shape, n_blobs, rng):
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    shape_arr = np.asarray(shape, dtype=np.float64).reshape(3, 1)
    centers = rng.uniform(0.25, 0.75, size=(3, n_blobs)) * shape_arr
    widths = rng.uniform(0.07, 0.16, size=(3, n_blobs)) * shape_arr
    amps = rng.uniform(0.6, 1.0, size=n_blobs)
    out = np.empty((n_blobs, *shape))
    for b in range(n_blobs):
        d = (grid - centers[:, b].reshape(3, 1, 1, 1)) / widths[:, b].reshape(3, 1, 1, 1)
        out[b] = amps[b] * np.exp(-0.5 * (d ** 2).sum(0))
    return out


def smooth_random_field(shape, max_disp: float, smooth: float, rng) -> np.ndarray:
    """Gaussian-filtered white noise rescaled so the largest |component| equals ``max_disp``."""
    noise = rng.standard_normal((3, *shape))
    field = np.stack([gaussian_filter(c, smooth, mode="reflect") for c in noise])
    peak = np.abs(field).max()
    return field * (max_disp / peak) if peak > 0 and max_disp > 0 else np.zeros_like(field)


def generate_pair(shape=(32, 32, 32), n_blobs: int = 5, max_disp: float = 3.0,
                  smooth: float = 4.0, seed: int = 0) -> SynthPair:
    """Blob phantom plus a fold-free smooth field; the fixed image is the warped moving image."""
    shape = tuple(int(s) for s in shape)
    seq = np.random.SeedSequence(int(seed))
    image_seq, field_seq = seq.spawn(2)
    rng = np.random.default_rng(image_seq)

    blobs = _blobs(shape, n_blobs, rng)
    texture = gaussian_filter(rng.standard_normal(shape), 2.0, mode="reflect")
    texture *= 0.25 / np.abs(texture).max()
    raw = blobs.sum(0) + texture
    moving = (raw - raw.min()) / (raw.max() - raw.min())
    total = blobs.sum(0)
    labels_moving = np.where(total > LABEL_THRESHOLD * total.max(), blobs.argmax(0) + 1, 0)

    if max_disp == 0:
        field = np.zeros((3, *shape))
    else:
        for attempt, sub in enumerate(field_seq.spawn(MAX_FIELD_ATTEMPTS)):
            field = smooth_random_field(shape, max_disp, smooth, np.random.default_rng(sub))
            if folding_fraction(field) == 0:
                break
        else:
            raise FieldGenerationError(
                f"no fold-free field in {MAX_FIELD_ATTEMPTS} attempts (smooth={smooth} too small "
                f"for max_disp={max_disp})")

    fixed = warp(moving, field, "trilinear", "border").numpy()
    labels_fixed = warp(labels_moving.astype(np.float64), field, "nearest", "border").numpy()
    labels_fixed = np.rint(labels_fixed).astype(np.int32)
    lost = set(np.unique(labels_moving)) - set(np.unique(labels_fixed))
    if lost:
        logger.warning("labels %s warped out of view (seed %s)", sorted(int(v) for v in lost), seed)
    return SynthPair(Volume(fixed.astype(np.float32)), Volume(moving.astype(np.float32)),
                     DisplacementField(field.astype(np.float32)),
                     LabelMap(labels_fixed), LabelMap(labels_moving.astype(np.int32)))


def endpoint_error(phi_pred, phi_gt, margin: int = 2) -> tuple[float, float]:
    """Mean and max displacement-error norm over voxels at least ``margin`` from the border."""
    pred = np.asarray(getattr(phi_pred, "data", phi_pred), dtype=np.float64)
    gt = np.asarray(getattr(phi_gt, "data", phi_gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"endpoint_error: shape mismatch {pred.shape} vs {gt.shape}")
    inner = (slice(None),) + tuple(slice(margin, s - margin) for s in pred.shape[1:])
    err = np.sqrt(((pred - gt)[inner] ** 2).sum(0))
    if err.size == 0:
        raise ValueError(f"endpoint_error: margin {margin} leaves no voxels")
    return float(err.mean()), float(err.max())


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def write_dataset(out_dir, count: int, shape=(32, 32, 32), max_disp: float = 3.0,
                  smooth: float = 4.0, seed: int = 0, n_blobs: int = 5) -> Path:
    """Write ``count`` pairs as VVOL files plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        pair = generate_pair(shape, n_blobs, max_disp, smooth, pair_seed(seed, i))
        files = {"fixed": pair.fixed, "moving": pair.moving, "labels_fixed": pair.labels_fixed,
                 "labels_moving": pair.labels_moving, "gt_field": pair.gt_field}
        entry = {}
        for key, obj in files.items():
            name = f"pair{i:03d}_{key}.vvol"
            save_volume(obj, out / name)
            entry[key] = name
        entries.append(entry)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def read_manifest(path) -> list[dict]:
    """Manifest entries with paths resolved against the manifest's directory."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValueError(f"manifest {path}: expected a JSON list")
    resolved = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "fixed" not in entry or "moving" not in entry:
            raise ValueError(f"manifest {path}: entry {i} needs 'fixed' and 'moving'")
        resolved.append({k: str(path.parent / v) for k, v in entry.items()})
    return resolved


def load_pair(entry: dict) -> dict:
    return {k: load_volume(v) for k, v in entry.items()}
