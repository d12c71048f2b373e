"""Coarse-to-fine registration network: shared encoder, per-level motion
decomposition, competitive fusion and field compounding."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field

import torch

from .cwm import cwm_fuse, cwm_params, init_cwm
from .fieldops import as_tensor, compose, upsample2, warp
from .modet import HEAD_DIM, NEIGHBORHOOD, PROJ_INIT_STD, ModeTParams, init_modet, modet_forward
from .netcore import EncoderConfig, ParameterStore, encode, init_encoder

LEVELS = 5


@dataclass(frozen=True)
class ModelConfig:
    """Heads are listed coarse to fine (level 5 first)."""

    heads: tuple = (8, 4, 2, 1, 1)
    head_dim: int = HEAD_DIM
    neighborhood: int = NEIGHBORHOOD
    base_channels: int = 8
    proj_init_std: float = PROJ_INIT_STD

    def __post_init__(self):
        heads = tuple(int(h) for h in self.heads)
        object.__setattr__(self, "heads", heads)
        if len(heads) != LEVELS:
            raise ValueError(f"ModelConfig: need {LEVELS} head counts, got {len(heads)}")
        if any(h < 1 for h in heads) or any(a < b for a, b in zip(heads, heads[1:])):
            raise ValueError(f"ModelConfig: head counts must be positive and non-increasing, got {heads}")
        if heads[-2:] != (1, 1):
            raise ValueError(f"ModelConfig: the two finest levels use a single head, got {heads}")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ValueError(f"ModelConfig: neighborhood must be odd, got {self.neighborhood}")
        if self.head_dim < 1 or self.base_channels < 1:
            raise ValueError("ModelConfig: head_dim and base_channels must be positive")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(base_channels=self.base_channels, levels=LEVELS)

    def heads_at(self, level: int) -> int:
        return self.heads[LEVELS - level]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        keys = cls.__dataclass_fields__
        return cls(**{k: (tuple(v) if k == "heads" else v) for k, v in d.items() if k in keys})


MICRO_CONFIG = ModelConfig(heads=(2, 2, 1, 1, 1), head_dim=2, base_channels=2)
MICRO_SHAPE = (16, 16, 16)


@dataclass
class LevelTrace:
    level: int
    field: torch.Tensor             # fused (or single) field produced at this level
    subfields: torch.Tensor         # (S, 3, h, w, l) before fusion
    weights: torch.Tensor | None = None


@dataclass
class Registration:
    phi: torch.Tensor
    warped: torch.Tensor
    trace: list = dc_field(default_factory=list)


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0,
               dtype=torch.float32) -> ParameterStore:
    gen = torch.Generator().manual_seed(int(seed))
    store = ParameterStore(dtype)
    enc = config.encoder
    init_encoder(store, enc, gen)
    for level in range(LEVELS, 0, -1):
        s = config.heads_at(level)
        init_modet(store, f"modet{level}", enc.channels(level), s, gen,
                   head_dim=config.head_dim, n=config.neighborhood, proj_std=config.proj_init_std)
        if level >= 3 and s > 1:
            init_cwm(store, f"cwm{level}", s, gen)
    return store


def _level_fields(level, feat_f, feat_m, store, config):
    p = ModeTParams.from_store(store, f"modet{level}", config.heads_at(level), config.neighborhood)
    return modet_forward(feat_f, feat_m, p)


def register(fixed, moving, store: ParameterStore, config: ModelConfig = ModelConfig()) -> Registration:
    """Predict the field mapping fixed-image voxels to moving-image positions."""
    fixed = as_tensor(fixed, store.dtype)
    moving = as_tensor(moving, store.dtype)
    if fixed.dim() == 3:
        fixed, moving = fixed[None], moving[None]
    if fixed.shape != moving.shape:
        raise ValueError(f"register: fixed {tuple(fixed.shape)} and moving {tuple(moving.shape)} differ")
    enc = config.encoder
    feats_f = encode(fixed, store, enc)
    feats_m = encode(moving, store, enc)
    trace = []

    def fuse(level, subs):
        prefix = f"cwm{level}"
        params = cwm_params(store, prefix) if f"{prefix}.conv1.weight" in store else None
        fused, weights = cwm_fuse(subs, params)
        trace.append(LevelTrace(level, fused, subs, weights))
        return fused

    phi = fuse(5, _level_fields(5, feats_f[4], feats_m[4], store, config))
    for level in (4, 3):
        m_warped = warp(feats_m[level - 1], phi, "trilinear", "zeros")
        residual = fuse(level, _level_fields(level, feats_f[level - 1], m_warped, store, config))
        phi = compose(upsample2(phi), residual)
    for level in (2, 1):
        if phi.shape[1:] != feats_m[level - 1].shape[1:]:
            raise AssertionError(f"level {level}: field {tuple(phi.shape[1:])} vs features "
                                 f"{tuple(feats_m[level - 1].shape[1:])}")
        m_warped = warp(feats_m[level - 1], phi, "trilinear", "zeros")
        subs = _level_fields(level, feats_f[level - 1], m_warped, store, config)
        residual = subs[0]
        trace.append(LevelTrace(level, residual, subs))
        phi = compose(phi, residual)
        if level == 2:
            phi = upsample2(phi)
    warped = warp(moving, phi, "trilinear", "border")
    return Registration(phi, warped, trace)


def count_parameters(store: ParameterStore) -> int:
    return store.count()


def describe(config: ModelConfig) -> str:
    enc = config.encoder
    lines = [f"ModeT registration pyramid: {LEVELS} levels, head_dim {config.head_dim}, "
             f"neighborhood {config.neighborhood}^3, encoder base {config.base_channels}"]
    for level in range(LEVELS, 0, -1):
        s = config.heads_at(level)
        fusion = "competitive weighting" if level >= 3 and s > 1 else "single field"
        lines.append(f"  level {level}: {enc.channels(level)} channels, {s} head(s), {fusion}")
    return "\n".join(lines)
