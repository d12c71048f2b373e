"""Parameter storage, convolutional building blocks, the feature encoder and
gradient checking.

Reverse-mode differentiation is delegated to ``torch.autograd``; everything
here is written functionally against a :class:`ParameterStore` so the same
weights can be evaluated in float32 for training and float64 for checks.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.2
LN_EPS = 1e-5
CKPT_MAGIC = "MCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Named trainable tensors with an initializer tag per entry."""

    def __init__(self, dtype=torch.float32):
        self.dtype = dtype
        self._values: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self._tags: dict[str, str] = {}

    def add(self, name: str, value, tag: str = "custom") -> torch.Tensor:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already exists")
        t = torch.as_tensor(value, dtype=self.dtype).detach().clone().requires_grad_(True)
        self._values[name] = t
        self._tags[name] = tag
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._values[name]

    def __contains__(self, name) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self) -> list[str]:
        return list(self._values)

    def tag(self, name: str) -> str:
        return self._tags[name]

    def grad(self, name: str) -> torch.Tensor:
        g = self._values[name].grad
        return torch.zeros_like(self._values[name]) if g is None else g

    def zero_grads(self) -> None:
        for t in self._values.values():
            if t.grad is None:
                t.grad = torch.zeros_like(t)
            else:
                t.grad.zero_()

    def count(self) -> int:
        return sum(t.numel() for t in self._values.values())

    def astype(self, dtype) -> "ParameterStore":
        """Detached copy in another precision."""
        out = ParameterStore(dtype)
        for name, t in self._values.items():
            out.add(name, t.detach(), self._tags[name])
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy().copy() for n, t in self._values.items()}

    def load_state(self, state: dict) -> None:
        for name, t in self._values.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            value = torch.as_tensor(np.asarray(state[name]), dtype=self.dtype)
            if value.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {tuple(value.shape)} != {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(value)


def save_checkpoint(store: ParameterStore, path, config: dict | None = None) -> None:
    """Write the MCKPT/1 format: JSON manifest line, then little-endian f32 payloads."""
    entries, chunks, offset = [], [], 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "tag": store.tag(name)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"magic": CKPT_MAGIC, "version": CKPT_VERSION, "params": entries,
                "config": config or {}}
    Path(path).write_bytes(json.dumps(manifest).encode("utf-8") + b"\n" + b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict[str, str]]:
    """Return (arrays by name, config, tags by name)."""
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError("manifest: missing newline terminator")
    try:
        manifest = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"manifest: not valid JSON ({exc})") from None
    if manifest.get("magic") != CKPT_MAGIC:
        raise CheckpointError(f"magic: expected {CKPT_MAGIC!r}, got {manifest.get('magic')!r}")
    if manifest.get("version") != CKPT_VERSION:
        raise CheckpointError(f"version: unsupported value {manifest.get('version')!r}")
    payload = blob[newline + 1:]
    arrays, tags = {}, {}
    for entry in manifest.get("params", []):
        shape = tuple(entry["shape"])
        start = entry["offset"]
        stop = start + 4 * int(np.prod(shape, dtype=np.int64))
        if stop > len(payload):
            raise CheckpointError(f"payload: parameter {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(shape).copy()
        tags[entry["name"]] = entry.get("tag", "custom")
    return arrays, manifest.get("config", {}), tags


# ---------------------------------------------------------------- building blocks

def conv3(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
          stride: int = 1) -> torch.Tensor:
    """3x3x3 cross-correlation with zero padding 1 on a (C, H, W, L) tensor."""
    if stride not in (1, 2):
        raise ValueError(f"conv3: stride must be 1 or 2, got {stride}")
    if weight.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3: kernel must be 3x3x3, got {tuple(weight.shape[2:])}")
    if x.shape[0] != weight.shape[1]:
        raise ValueError(f"conv3: input has {x.shape[0]} channels, kernel expects {weight.shape[1]}")
    return F.conv3d(x[None], weight, bias, stride=stride, padding=1)[0]


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return torch.where(x >= 0, x, slope * x)


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
              eps: float = LN_EPS) -> torch.Tensor:
    """Normalize each voxel over channels of a (C, ...) tensor, then scale and shift."""
    mean = x.mean(0, keepdim=True)
    var = ((x - mean) ** 2).mean(0, keepdim=True)
    shape = (-1,) + (1,) * (x.dim() - 1)
    return (x - mean) / torch.sqrt(var + eps) * gamma.view(shape) + beta.view(shape)


def fan_in_normal(generator: torch.Generator, shape, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / ((1 + slope ** 2) * fan_in))
    return torch.randn(shape, generator=generator, dtype=torch.float64) * std


def add_conv(store: ParameterStore, prefix: str, c_in: int, c_out: int,
             generator: torch.Generator) -> None:
    store.add(f"{prefix}.weight", fan_in_normal(generator, (c_out, c_in, 3, 3, 3)), "fan_in_normal")
    store.add(f"{prefix}.bias", torch.zeros(c_out), "zeros")


# ---------------------------------------------------------------- encoder

@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 8
    levels: int = 5
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.base_channels < 1 or self.levels < 1:
            raise ValueError("EncoderConfig: base_channels and levels must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def init_encoder(store: ParameterStore, config: EncoderConfig, generator: torch.Generator) -> None:
    c_prev = 1
    for k in range(1, config.levels + 1):
        c = config.channels(k)
        add_conv(store, f"enc{k}.conv1", c_prev, c, generator)
        add_conv(store, f"enc{k}.conv2", c, c, generator)
        c_prev = c


def encode(image: torch.Tensor, store: ParameterStore, config: EncoderConfig) -> list[torch.Tensor]:
    """Feature pyramid [F1, ..., F5]; level k has base*2^(k-1) channels at 1/2^(k-1) resolution."""
    if image.dim() == 3:
        image = image[None]
    div = 2 ** (config.levels - 1)
    if any(s % div for s in image.shape[1:]):
        raise ValueError(f"encode: spatial shape {tuple(image.shape[1:])} must be divisible by {div}")
    feats, x = [], image
    for k in range(1, config.levels + 1):
        stride = 1 if k == 1 else 2
        x = leaky_relu(conv3(x, store[f"enc{k}.conv1.weight"], store[f"enc{k}.conv1.bias"], stride),
                       config.leaky_slope)
        x = leaky_relu(conv3(x, store[f"enc{k}.conv2.weight"], store[f"enc{k}.conv2.bias"]),
                       config.leaky_slope)
        feats.append(x)
    return feats


# ---------------------------------------------------------------- gradients

def backward(loss: torch.Tensor) -> None:
    loss.backward()


def central_difference(f: Callable[[float], float], step: float = 1e-4, shrink: int = 3,
                       rtol: float = 1e-5) -> float:
    """Richardson-extrapolated central difference of f at 0.

    The extrapolated value from steps h and h/2 is accepted once plain
    quotients at h/10 and h/100 both agree with it to ``rtol`` plus rounding
    noise. A kink (LeakyReLU, trilinear cell boundary) closer to 0 than h
    biases all quotients that straddle it by about the same amount, so one
    check scale is not enough; on disagreement the step is divided by 10.
    """
    noise = 4 * np.finfo(np.float64).eps * max(1.0, abs(f(0.0)))
    cache: dict[float, float] = {}

    def quotient(h):
        if h not in cache:
            cache[h] = (f(h) - f(-h)) / (2 * h)
        return cache[h]

    for _ in range(shrink + 1):
        extrapolated = (4 * quotient(step / 2) - quotient(step)) / 3
        slack = 200 * noise / step
        if all(abs(extrapolated - c) <= rtol * max(abs(extrapolated), abs(c)) + slack
               for c in (quotient(step / 10), quotient(step / 100))):
            return extrapolated
        step /= 10
    return quotient(step * 10 / 100)


def gradcheck(op: Callable[[ParameterStore], torch.Tensor], store: ParameterStore,
              seed: int = 0, step: float = 1e-4, max_entries: int = 4,
              floor: float = 1e-6) -> tuple[float, dict[str, float]]:
    """Compare reverse-mode gradients of ``op(store)`` with central differences.

    Runs in float64. Every parameter tensor is checked on up to ``max_entries``
    randomly chosen entries plus one random direction spanning the whole
    tensor. Relative error is |a - b| / max(|a|, |b|, floor).
    Returns (max relative error, per-parameter max).
    """
    store = store.astype(torch.float64)
    store.zero_grads()
    loss = op(store)
    loss.backward()
    rng = np.random.default_rng(seed)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), floor)

    report = {}
    for name, t in store.items():
        grad = store.grad(name).detach().clone().reshape(-1)
        flat = t.data.view(-1)
        orig = flat.clone()
        n = flat.numel()
        picks = range(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        directions = []
        for i in picks:
            d = torch.zeros(n, dtype=torch.float64)
            d[int(i)] = 1.0
            directions.append(d)
        d = torch.as_tensor(rng.standard_normal(n))
        directions.append(d / d.norm())

        worst = 0.0
        for d in directions:
            def f(h, d=d):
                flat.copy_(orig + h * d)
                with torch.no_grad():
                    return float(op(store))
            numeric = central_difference(f, step)
            flat.copy_(orig)
            worst = max(worst, rel(float(grad @ d), numeric))
        report[name] = worst
    return max(report.values(), default=0.0), report
