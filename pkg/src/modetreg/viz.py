"""Static plots of displacement fields: deformed grid, quiver and CWM weights."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def parse_slice(text: str, ndim: int = 3) -> tuple[int, int]:
    """Parse ``AXIS=IDX`` where AXIS is 0-2 or one of x/y/z."""
    try:
        axis, idx = text.split("=")
        axis = {"x": 0, "y": 1, "z": 2}.get(axis.strip().lower(), axis)
        axis, idx = int(axis), int(idx)
    except ValueError:
        raise ValueError(f"slice must look like AXIS=IDX, got {text!r}") from None
    if not 0 <= axis < ndim:
        raise ValueError(f"slice axis must be in 0..{ndim - 1}, got {axis}")
    return axis, idx


def field_slice(field: np.ndarray, axis: int, index: int):
    """In-plane displacement components (2, a, b) of one slice."""
    if not 0 <= index < field.shape[1 + axis]:
        raise ValueError(f"slice index {index} outside 0..{field.shape[1 + axis] - 1}")
    plane = np.take(field, index, axis=1 + axis)
    keep = [c for c in range(3) if c != axis]
    return plane[keep]


def deformed_grid_lines(disp: np.ndarray, step: int = 1):
    """Polylines of the displaced regular grid; each is an (k, 2) array of (row, col)."""
    rows, cols = disp.shape[1:]
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pr, pc = r + disp[0], c + disp[1]
    lines = [np.stack([pr[i], pc[i]], 1) for i in range(0, rows, step)]
    lines += [np.stack([pr[:, j], pc[:, j]], 1) for j in range(0, cols, step)]
    return lines


def plot_field(field: np.ndarray, axis: int, index: int, out, weights: np.ndarray | None = None,
               grid_step: int = 1) -> None:
    disp = field_slice(np.asarray(field), axis, index)
    panels = 2 + (0 if weights is None else weights.shape[0])
    fig, axes = plt.subplots(1, panels, figsize=(4 * panels, 4), squeeze=False)
    axes = axes[0]
    for line in deformed_grid_lines(disp, grid_step):
        axes[0].plot(line[:, 1], line[:, 0], color="k", lw=0.6)
    axes[0].set_title("deformed grid")
    rows, cols = disp.shape[1:]
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    mag = np.hypot(disp[0], disp[1])
    axes[1].quiver(c, r, disp[1], disp[0], mag, angles="xy", scale_units="xy", scale=1, cmap="viridis")
    axes[1].set_title("displacement")
    for ax in axes[:2]:
        ax.set_xlim(-1, cols)
        ax.set_ylim(rows, -1)
        ax.set_aspect("equal")
    if weights is not None:
        wslice = np.take(np.asarray(weights), index, axis=1 + axis)
        for s, ax in enumerate(axes[2:]):
            im = ax.imshow(wslice[s], vmin=0, vmax=1, cmap="magma")
            ax.set_title(f"weight, sub-field {s + 1}")
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
