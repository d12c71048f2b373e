"""Motion decomposition via multi-head neighborhood attention.

Each head attends from a fixed-feature voxel to the n^3 neighbourhood of the
same location in the (already warped) moving features; the attention
distribution is turned into a displacement by taking the expected neighbour
offset. The offsets are fixed, only the projection, the LayerNorm affines and
the relative positional bias are learned.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .netcore import ParameterStore, layernorm

HEAD_DIM = 6
NEIGHBORHOOD = 3
PROJ_INIT_STD = 1e-5


def neighborhood_offsets(n: int = NEIGHBORHOOD, dtype=torch.float32) -> torch.Tensor:
    """(n^3, 3) integer offsets in raster order, last axis fastest."""
    if n < 1 or n % 2 == 0:
        raise ValueError(f"neighborhood size must be a positive odd integer, got {n}")
    r = n // 2
    rng = range(-r, r + 1)
    return torch.tensor(list(itertools.product(rng, rng, rng)), dtype=dtype)


@dataclass
class ModeTParams:
    proj_weight: torch.Tensor   # (S*d, c_in)
    proj_bias: torch.Tensor     # (S*d,)
    ln_f: tuple                 # (gamma, beta)
    ln_m: tuple
    bias: torch.Tensor          # (S, n, n, n)
    heads: int
    head_dim: int = HEAD_DIM
    n: int = NEIGHBORHOOD

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str, heads: int,
                   n: int = NEIGHBORHOOD) -> "ModeTParams":
        w = store[f"{prefix}.proj.weight"]
        return cls(w, store[f"{prefix}.proj.bias"],
                   (store[f"{prefix}.ln_f.gamma"], store[f"{prefix}.ln_f.beta"]),
                   (store[f"{prefix}.ln_m.gamma"], store[f"{prefix}.ln_m.beta"]),
                   store[f"{prefix}.rel_bias"], heads, w.shape[0] // heads, n)


def init_modet(store: ParameterStore, prefix: str, c_in: int, heads: int,
               generator: torch.Generator, head_dim: int = HEAD_DIM, n: int = NEIGHBORHOOD,
               proj_std: float = PROJ_INIT_STD) -> None:
    width = heads * head_dim
    store.add(f"{prefix}.proj.weight",
              torch.randn((width, c_in), generator=generator, dtype=torch.float64) * proj_std,
              f"normal(0,{proj_std:g})")
    store.add(f"{prefix}.proj.bias", torch.zeros(width), "zeros")
    for branch in ("ln_f", "ln_m"):
        store.add(f"{prefix}.{branch}.gamma", torch.ones(width), "ones")
        store.add(f"{prefix}.{branch}.beta", torch.zeros(width), "zeros")
    store.add(f"{prefix}.rel_bias", torch.zeros((heads, n, n, n)), "zeros")


def project_qk(feat_f: torch.Tensor, feat_m: torch.Tensor, p: ModeTParams):
    """Shared linear projection of both feature maps, then branch-specific LayerNorm."""
    if feat_f.shape != feat_m.shape:
        raise ValueError(f"project_qk: feature shapes differ {tuple(feat_f.shape)} vs {tuple(feat_m.shape)}")
    if feat_f.shape[0] != p.proj_weight.shape[1]:
        raise ValueError(
            f"project_qk: features have {feat_f.shape[0]} channels, projection expects {p.proj_weight.shape[1]}")

    def proj(x):
        return torch.einsum("oc,c...->o...", p.proj_weight, x) + p.proj_bias.view(-1, 1, 1, 1)

    return layernorm(proj(feat_f), *p.ln_f), layernorm(proj(feat_m), *p.ln_m)


def neighborhood_attention(q: torch.Tensor, k: torch.Tensor, rel_bias: torch.Tensor,
                           heads: int, n: int = NEIGHBORHOOD) -> torch.Tensor:
    """Attention map shaped (S, h, w, l, n^3).

    Logit for offset o is <Q_p, K_{p+o}> + B[o] per head, with K zero padded
    outside the grid; no 1/sqrt(d) scaling.
    """
    if q.shape != k.shape:
        raise ValueError(f"neighborhood_attention: Q {tuple(q.shape)} and K {tuple(k.shape)} differ")
    if q.shape[0] % heads:
        raise ValueError(f"neighborhood_attention: {q.shape[0]} channels not divisible into {heads} heads")
    if rel_bias.shape != (heads, n, n, n):
        raise ValueError(f"neighborhood_attention: bias must be {(heads, n, n, n)}, got {tuple(rel_bias.shape)}")
    r = n // 2
    h, w, l = q.shape[1:]
    qh = q.reshape(heads, -1, h, w, l)
    kp = F.pad(k, (r, r, r, r, r, r)).reshape(heads, -1, h + 2 * r, w + 2 * r, l + 2 * r)
    logits = []
    for a, b, c in neighborhood_offsets(n).long().tolist():
        shifted = kp[:, :, r + a:r + a + h, r + b:r + b + w, r + c:r + c + l]
        logits.append((qh * shifted).sum(1))
    logits = torch.stack(logits, dim=-1) + rel_bias.reshape(heads, 1, 1, 1, n ** 3)
    return torch.softmax(logits, dim=-1)


def subfields(attn: torch.Tensor) -> torch.Tensor:
    """Expected neighbour offset per head: (S, h, w, l, n^3) -> (S, 3, h, w, l)."""
    n = round(attn.shape[-1] ** (1 / 3))
    offsets = neighborhood_offsets(n, attn.dtype)
    # (P - N) / (P + N + Z) from separately summed masses equals the plain
    # expectation on the simplex but cannot round past the offset range
    pos = attn @ offsets.clamp(min=0)
    neg = attn @ (-offsets).clamp(min=0)
    rest = attn @ (offsets == 0).to(attn.dtype)
    return ((pos - neg) / (pos + neg + rest)).permute(0, 4, 1, 2, 3)


def modet_forward(feat_f: torch.Tensor, feat_m: torch.Tensor, p: ModeTParams,
                  return_attention: bool = False):
    q, k = project_qk(feat_f, feat_m, p)
    attn = neighborhood_attention(q, k, p.bias, p.heads, p.n)
    fields = subfields(attn)
    return (fields, attn) if return_attention else fields
