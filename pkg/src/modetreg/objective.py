"""Unsupervised training objective, learning-rate decay and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .fieldops import as_tensor
from .netcore import ParameterStore, save_checkpoint
from .pyramid import ModelConfig, register

logger = logging.getLogger(__name__)

NCC_EPS = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    ncc_window: int = 9
    lr_init: float = 1e-4
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"TrainConfig: lambda must be >= 0, got {self.lam}")
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ValueError(f"TrainConfig: ncc_window must be odd, got {self.ncc_window}")
        if self.epochs < 1:
            raise ValueError(f"TrainConfig: epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ValueError("TrainConfig: only batch size 1 is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def _box_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    kernel = torch.ones((1, 1, window, window, window), dtype=x.dtype)
    return F.conv3d(x[None, None], kernel, padding=window // 2)[0, 0]


def ncc_loss(fixed, warped, window: int = 9) -> torch.Tensor:
    """Negative mean squared local correlation over window^3 patches.

    Patches are truncated at the volume boundary (only in-grid voxels count).
    """
    fixed = as_tensor(fixed)
    warped = as_tensor(warped, fixed.dtype)
    fixed, warped = fixed.reshape(fixed.shape[-3:]), warped.reshape(warped.shape[-3:])
    if window < 1 or window % 2 == 0:
        raise ValueError(f"ncc_loss: window must be a positive odd integer, got {window}")
    if any(window > s for s in fixed.shape):
        raise ValueError(f"ncc_loss: window {window} larger than volume {tuple(fixed.shape)}")
    count = _box_sum(torch.ones_like(fixed), window)
    sf, sm = _box_sum(fixed, window), _box_sum(warped, window)
    sff, smm = _box_sum(fixed * fixed, window), _box_sum(warped * warped, window)
    sfm = _box_sum(fixed * warped, window)
    cross = sfm - sf * sm / count
    var_f = sff - sf * sf / count
    var_m = smm - sm * sm / count
    return -(cross * cross / (var_f * var_m + NCC_EPS)).mean()


def smoothness_loss(phi) -> torch.Tensor:
    """Mean squared forward difference, averaged over the three directions."""
    phi = as_tensor(phi)
    dx = phi[:, 1:] - phi[:, :-1]
    dy = phi[:, :, 1:] - phi[:, :, :-1]
    dz = phi[:, :, :, 1:] - phi[:, :, :, :-1]
    return ((dx ** 2).mean() + (dy ** 2).mean() + (dz ** 2).mean()) / 3


def total_loss(fixed, warped, phi, lam: float = 1.0, window: int = 9):
    """Return (total, ncc, reg) tensors."""
    ncc = ncc_loss(fixed, warped, window)
    reg = smoothness_loss(phi)
    return ncc + lam * reg, ncc, reg


def lr_schedule(m: int, epochs: int, lr_init: float) -> float:
    """Polynomial decay: lr_init * (1 - (m - 1) / M) ** 0.9 for epoch m in 1..M."""
    if not 1 <= m <= epochs:
        raise ValueError(f"lr_schedule: epoch {m} outside 1..{epochs}")
    return lr_init * (1 - (m - 1) / epochs) ** 0.9


class TrainingDiverged(RuntimeError):
    pass


def train(pairs: Sequence, store: ParameterStore, model_config: ModelConfig = ModelConfig(),
          config: TrainConfig = TrainConfig(), log_path=None, checkpoint_path=None,
          progress: bool = False) -> list[dict]:
    """Adam with per-epoch polynomial decay over (name, fixed, moving) pairs, batch size 1.

    Pair order is reshuffled every epoch from ``config.seed``. Returns the loss
    log; optionally writes it as JSON lines and saves a checkpoint.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("train: empty dataset")
    params = [t for _, t in store.items()]
    opt = torch.optim.Adam(params, lr=config.lr_init, betas=tuple(config.betas), eps=config.eps)
    rng = np.random.default_rng(config.seed)
    log = []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            lr = lr_schedule(epoch, config.epochs, config.lr_init)
            for group in opt.param_groups:
                group["lr"] = lr
            for idx in rng.permutation(len(pairs)):
                name, fixed, moving = pairs[idx]
                opt.zero_grad(set_to_none=False)
                out = register(fixed, moving, store, model_config)
                loss, ncc, reg = total_loss(fixed, out.warped, out.phi, config.lam, config.ncc_window)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, pair {name!r}")
                loss.backward()
                opt.step()
                row = {"epoch": epoch, "pair": str(name), "lr": lr, "ncc": ncc.item(),
                       "reg": reg.item(), "total": loss.item()}
                log.append(row)
                if sink:
                    sink.write(json.dumps(row) + "\n")
                    sink.flush()
            if progress:
                rows = [r["total"] for r in log if r["epoch"] == epoch]
                logger.info("epoch %d/%d lr %.3g mean loss %.5f", epoch, config.epochs, lr,
                            float(np.mean(rows)))
    finally:
        if sink:
            sink.close()
    if checkpoint_path:
        save_checkpoint(store, checkpoint_path, {"model": model_config.to_dict(), "train": config.to_dict()})
    return log


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def randomize_for_check(store: ParameterStore, seed: int = 0) -> ParameterStore:
    """Move freshly initialized weights to a generic point so fields are O(0.1-1) voxels.

    Near-zero fields put every sample on an integer grid position, where
    trilinear interpolation is only one-sided differentiable.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, t in store.items():
            noise = torch.randn(t.shape, generator=gen, dtype=torch.float64).to(t.dtype)
            if name.endswith("proj.weight"):
                t.copy_(noise / t.shape[1] ** 0.5)
            elif name.endswith("rel_bias"):
                t.copy_(0.5 * noise)
            elif name.endswith("gamma"):
                t.add_(0.1 * noise)
            elif name.endswith("bias") or name.endswith("beta"):
                t.copy_(0.05 * noise)
    return store


def pipeline_gradcheck(seed: int = 0, model_config: ModelConfig | None = None, shape=(16, 16, 16),
                       window: int = 3, lam: float = 1.0):
    """Finite-difference check of the full registration loss on the micro configuration."""
    from .pyramid import MICRO_CONFIG, init_model
    from .synthbench import generate_pair

    model_config = model_config or MICRO_CONFIG
    store = randomize_for_check(init_model(model_config, seed, dtype=torch.float64), seed)
    pair = generate_pair(shape, n_blobs=3, max_disp=1.5, smooth=3.0, seed=seed)
    fixed = torch.as_tensor(pair.fixed.data, dtype=torch.float64)
    moving = torch.as_tensor(pair.moving.data, dtype=torch.float64)

    def op(s):
        out = register(fixed, moving, s, model_config)
        return total_loss(fixed, out.warped, out.phi, lam, window)[0]

    from .netcore import gradcheck
    return gradcheck(op, store, seed=seed)
