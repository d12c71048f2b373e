"""Competitive fusion of per-head displacement sub-fields."""
from __future__ import annotations

from typing import Sequence

import torch

from .fieldops import upsample2
from .netcore import ParameterStore, add_conv, conv3, leaky_relu


def init_cwm(store: ParameterStore, prefix: str, heads: int, generator: torch.Generator) -> None:
    width = 3 * heads
    add_conv(store, f"{prefix}.conv1", width, width, generator)
    add_conv(store, f"{prefix}.conv2", width, width, generator)
    add_conv(store, f"{prefix}.conv3", width, heads, generator)


def cwm_params(store: ParameterStore, prefix: str) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [(store[f"{prefix}.conv{i}.weight"], store[f"{prefix}.conv{i}.bias"]) for i in (1, 2, 3)]


def cwm_fuse(fields: torch.Tensor, params: Sequence | None):
    """Upsample S sub-fields (S, 3, h, w, l) and blend them with softmax weights.

    Returns the fused field (3, 2h, 2w, 2l) and the weights (S, 2h, 2w, 2l).
    With a single sub-field the weight is 1 and ``params`` may be None.
    """
    if fields.dim() != 5 or fields.shape[1] != 3:
        raise ValueError(f"cwm_fuse: expected sub-fields shaped (S, 3, h, w, l), got {tuple(fields.shape)}")
    heads = fields.shape[0]
    up = torch.stack([upsample2(f) for f in fields])
    if heads == 1 and params is None:
        return up[0], torch.ones_like(up[:, 0])
    if params is None:
        raise ValueError("cwm_fuse: weighting convolutions are required when S > 1")
    (w1, b1), (w2, b2), (w3, b3) = params
    if w3.shape[0] != heads:
        raise ValueError(f"cwm_fuse: weighting block scores {w3.shape[0]} sub-fields, got {heads}")
    x = up.reshape(3 * heads, *up.shape[2:])
    x = leaky_relu(conv3(x, w1, b1))
    x = leaky_relu(conv3(x, w2, b2))
    weights = torch.softmax(conv3(x, w3, b3), dim=0)
    # dividing by the weights' own rounded sum keeps the blend inside the hull exactly
    num, den = weights[0, None] * up[0], weights[0]
    for s in range(1, heads):
        num = num + weights[s, None] * up[s]
        den = den + weights[s]
    return num / den, weights
