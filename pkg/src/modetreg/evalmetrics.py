"""Overlap, surface-distance and fold statistics for registration results."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .fieldops import folding_fraction, warp
from .synthbench import endpoint_error

logger = logging.getLogger(__name__)

_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def _labels(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x))
    return arr.reshape(arr.shape[-3:])


def dice(a, b, labels=None) -> tuple[dict[int, float], float]:
    """Per-label Dice 2|A∩B| / (|A| + |B|) and their mean.

    Labels present in neither map are skipped.
    """
    a, b = _labels(a), _labels(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    if labels is None:
        labels = sorted((set(np.unique(a).tolist()) | set(np.unique(b).tolist())) - {0})
    scores = {}
    for lab in labels:
        in_a, in_b = a == lab, b == lab
        total = np.count_nonzero(in_a) + np.count_nonzero(in_b)
        if total == 0:
            logger.info("dice: label %s absent from both maps, skipped", lab)
            continue
        scores[int(lab)] = 2.0 * np.count_nonzero(in_a & in_b) / total
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask voxels with a face neighbour outside the mask or the grid."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBORS, border_value=0)
    return np.argwhere(mask & ~inner)


def assd(a, b, label) -> float:
    """Average symmetric surface distance between the ``label`` regions, in voxels."""
    a, b = _labels(a), _labels(b)
    if a.shape != b.shape:
        raise ValueError(f"assd: shape mismatch {a.shape} vs {b.shape}")
    sa, sb = surface_voxels(a == label), surface_voxels(b == label)
    if len(sa) == 0 or len(sb) == 0:
        raise ValueError(f"assd: label {label} is empty in {'first' if len(sa) == 0 else 'second'} map")
    d_ab, _ = cKDTree(sb).query(sa)
    d_ba, _ = cKDTree(sa).query(sb)
    return float((d_ab.sum() + d_ba.sum()) / (len(sa) + len(sb)))


@dataclass
class RegistrationReport:
    pair: str
    dsc_mean: float
    dsc_per_label: dict = field(default_factory=dict)
    assd_mean: float = float("nan")
    folding: float = 0.0
    epe: float | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["dsc_per_label"] = {str(k): v for k, v in self.dsc_per_label.items()}
        if self.epe is None:
            del d["epe"]
        return d


def warp_labels(labels, phi) -> np.ndarray:
    lab = _labels(labels)
    out = warp(lab.astype(np.float64), np.asarray(getattr(phi, "data", phi), dtype=np.float64),
               "nearest", "border")
    return np.rint(out.numpy()).astype(np.int32)


def evaluate_pair(fixed, moving, labels_fixed, labels_moving, phi, gt_field=None,
                  name: str = "pair", margin: int = 2) -> RegistrationReport:
    """Score a predicted field against the fixed labels (moving labels are warped nearest-neighbour)."""
    phi = np.asarray(getattr(phi, "data", phi))
    lf = _labels(labels_fixed)
    warped = warp_labels(labels_moving, phi)
    per_label, mean = dice(lf, warped)
    distances = []
    for lab in per_label:
        if np.any(lf == lab) and np.any(warped == lab):
            distances.append(assd(lf, warped, lab))
        else:
            logger.info("assd: label %s missing after warping in %s, skipped", lab, name)
    epe = None
    if gt_field is not None:
        epe = endpoint_error(phi, gt_field, margin)[0]
    return RegistrationReport(
        pair=name, dsc_mean=mean, dsc_per_label=per_label,
        assd_mean=float(np.mean(distances)) if distances else float("nan"),
        folding=folding_fraction(phi), epe=epe)


def aggregate(reports) -> dict:
    reports = list(reports)
    out = {"pairs": len(reports)}
    for key in ("dsc_mean", "assd_mean", "folding", "epe"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = float(np.mean(vals))
    return out
