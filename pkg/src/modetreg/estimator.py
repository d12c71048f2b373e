"""scikit-learn style wrapper around the registration network.

``X`` is an array of image pairs shaped (n_pairs, 2, H, W, L) holding
(fixed, moving) per row. ``fit`` trains unsupervised, ``predict`` returns
displacement fields (n_pairs, 3, H, W, L) and ``transform`` the warped
moving images (n_pairs, H, W, L).
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .netcore import ParameterStore, load_checkpoint, save_checkpoint
from .objective import TrainConfig, ncc_loss, train
from .pyramid import LEVELS, ModelConfig, init_model, register


def check_pairs(X) -> np.ndarray:
    """Validate and convert a stack of (fixed, moving) volume pairs."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != 2:
        raise ValueError(f"expected pairs shaped (n_pairs, 2, H, W, L), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("expected at least one pair")
    div = 2 ** (LEVELS - 1)
    if any(s % div for s in X.shape[2:]):
        raise ValueError(f"spatial shape {X.shape[2:]} must be divisible by {div}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


class ModeTRegistration(BaseEstimator):
    def __init__(self, heads=(8, 4, 2, 1, 1), head_dim=6, neighborhood=3, base_channels=8,
                 proj_init_std=1e-5, lam=1.0, ncc_window=9, lr_init=1e-4, epochs=30, seed=0):
        self.heads = heads
        self.head_dim = head_dim
        self.neighborhood = neighborhood
        self.base_channels = base_channels
        self.proj_init_std = proj_init_std
        self.lam = lam
        self.ncc_window = ncc_window
        self.lr_init = lr_init
        self.epochs = epochs
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(tuple(self.heads), self.head_dim, self.neighborhood,
                           self.base_channels, self.proj_init_std)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lam=self.lam, ncc_window=self.ncc_window, lr_init=self.lr_init,
                           epochs=self.epochs, seed=self.seed)

    def initialize(self) -> "ModeTRegistration":
        """Set up untrained weights without fitting."""
        self.config_ = self._model_config()
        self.store_ = init_model(self.config_, self.seed)
        self.loss_log_ = []
        return self

    def fit(self, X, y=None, log_path=None):
        X = check_pairs(X)
        self.initialize()
        pairs = [(str(i), x[0], x[1]) for i, x in enumerate(X)]
        self.loss_log_ = train(pairs, self.store_, self.config_, self._train_config(), log_path=log_path)
        return self

    def _register_all(self, X):
        check_is_fitted(self, "store_")
        X = check_pairs(X)
        with torch.no_grad():
            return [register(x[0], x[1], self.store_, self.config_) for x in X]

    def predict(self, X) -> np.ndarray:
        return np.stack([r.phi.numpy() for r in self._register_all(X)])

    def transform(self, X) -> np.ndarray:
        return np.stack([r.warped[0].numpy() for r in self._register_all(X)])

    def score(self, X, y=None) -> float:
        """Mean local squared correlation between fixed and warped moving images."""
        regs = self._register_all(X)
        X = check_pairs(X)
        return float(np.mean([-ncc_loss(x[0], r.warped, self.ncc_window).item()
                              for x, r in zip(X, regs)]))

    def save(self, path) -> None:
        check_is_fitted(self, "store_")
        save_checkpoint(self.store_, path, {"model": self.config_.to_dict(),
                                            "train": self._train_config().to_dict()})

    @classmethod
    def load(cls, path) -> "ModeTRegistration":
        arrays, config, tags = load_checkpoint(path)
        model = ModelConfig.from_dict(config.get("model", {}))
        tr = config.get("train", {})
        est = cls(heads=model.heads, head_dim=model.head_dim, neighborhood=model.neighborhood,
                  base_channels=model.base_channels, proj_init_std=model.proj_init_std,
                  lam=tr.get("lam", 1.0), ncc_window=tr.get("ncc_window", 9),
                  lr_init=tr.get("lr_init", 1e-4), epochs=tr.get("epochs", 30), seed=tr.get("seed", 0))
        est.initialize()
        est.store_.load_state(arrays)
        return est


def store_from_checkpoint(path) -> tuple[ParameterStore, ModelConfig]:
    est = ModeTRegistration.load(path)
    return est.store_, est.config_
