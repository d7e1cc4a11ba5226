"""Small differentiable substrate: named parameters, MLP/attention layers, AdamW, cosine lr.

Reverse-mode gradients come from torch autograd on float64 CPU tensors; everything the
rest of the package needs goes through the functions here so that parameter layout,
initialization, optimizer arithmetic and checkpoint format stay under our control.
"""
from __future__ import annotations

import contextlib
import json
import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class OptimizerStateError(RuntimeError):
    pass


def tensor(x, requires_grad=False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))


# --- multiply-add accounting -------------------------------------------------

_MAC_COUNTERS: list = []


@contextlib.contextmanager
def count_macs():
    """Collect dense-layer multiply-adds issued inside the block."""
    c = {"macs": 0}
    _MAC_COUNTERS.append(c)
    try:
        yield c
    finally:
        _MAC_COUNTERS.pop()


def _record(n: int) -> None:
    for c in _MAC_COUNTERS:
        c["macs"] += int(n)


# --- parameters ---------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with name-keyed deterministic initialization."""

    def __init__(self, seed: int = 0):
        self.rng_seed = int(seed)
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.frozen: set = set()

    def _rng(self, name):
        return np.random.default_rng([self.rng_seed, zlib.crc32(name.encode())])

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name} already exists")
        t = tensor(value).clone().requires_grad_(True)
        self.params[name] = t
        return t

    def linear(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.add(f"{name}.w", self._rng(f"{name}.w").uniform(-bound, bound, size=(fan_in, fan_out)))
        self.add(f"{name}.b", np.zeros(fan_out))

    def embedding(self, name: str, rows: int, width: int, scale: float = 1.0) -> None:
        self.add(name, self._rng(name).normal(0.0, scale, size=(rows, width)))

    def norm(self, name: str, width: int) -> None:
        self.add(f"{name}.g", np.ones(width))
        self.add(f"{name}.b", np.zeros(width))

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def trainable(self):
        return [(n, p) for n, p in self.params.items() if n not in self.frozen]

    def freeze_all_except(self, keep) -> None:
        self.frozen = {n for n in self.params if not keep(n)}

    def unfreeze(self) -> None:
        self.frozen = set()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad(self, name: str) -> torch.Tensor:
        g = self.params[name].grad
        return torch.zeros_like(self.params[name]) if g is None else g

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.detach().numpy().copy()) for n, p in self.params.items())

    def load_arrays(self, arrays) -> None:
        for n, a in arrays.items():
            if n not in self.params:
                raise KeyError(f"unknown parameter {n}")
            if tuple(self.params[n].shape) != tuple(np.shape(a)):
                raise ShapeError(f"parameter {n}: shape {np.shape(a)} != {tuple(self.params[n].shape)}")
            with torch.no_grad():
                self.params[n].copy_(tensor(a))

    def clone(self) -> "ParamStore":
        other = ParamStore(self.rng_seed)
        for n, p in self.params.items():
            other.params[n] = p.detach().clone().requires_grad_(True)
        other.frozen = set(self.frozen)
        return other


# --- layers -------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    name: str
    widths: tuple
    activation: str = "relu"

    def build(self, store: ParamStore) -> "MLPSpec":
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            store.linear(f"{self.name}.{i}", a, b)
        return self

    def macs(self, rows: int = 1) -> int:
        return rows * sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))


def linear(store: ParamStore, name: str, x: torch.Tensor) -> torch.Tensor:
    w, b = store[f"{name}.w"], store[f"{name}.b"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"layer {name}: input width {x.shape[-1]} != {w.shape[0]}")
    _record(x.numel() // max(x.shape[-1], 1) * w.shape[0] * w.shape[1])
    return x @ w + b


def mlp_forward(store: ParamStore, spec: MLPSpec, x: torch.Tensor) -> torch.Tensor:
    n = len(spec.widths) - 1
    for i in range(n):
        x = linear(store, f"{spec.name}.{i}", x)
        if i < n - 1:
            if spec.activation == "relu":
                x = torch.relu(x)
            else:
                raise ValueError(f"unknown activation {spec.activation}")
    return x


def layer_norm(store: ParamStore, name: str, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * store[f"{name}.g"] + store[f"{name}.b"]


@dataclass(frozen=True)
class AttentionSpec:
    name: str
    width: int
    heads: int = 4

    def build(self, store: ParamStore) -> "AttentionSpec":
        if self.width % self.heads:
            raise ShapeError(f"{self.name}: width {self.width} not divisible by {self.heads} heads")
        for p in ("q", "k", "v", "o"):
            store.linear(f"{self.name}.{p}", self.width, self.width)
        return self


def scaled_dot_attention(q, k, v, rel=None, mask=None, heads: int = 1, return_weights=False):
    """Multi-head attention core without projections.

    q (..., Lq, D); k, v (..., Lk, D); rel (..., Lq, Lk, D) is added to the keys of each
    query/key pair before scoring; mask (..., Lq, Lk) bool, True = attend.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys ({k.shape[-2]}) and values ({v.shape[-2]}) differ in length")
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ShapeError("query/key/value widths differ")
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    lq, lk = q.shape[-2], k.shape[-2]
    qh = q.reshape(*q.shape[:-1], heads, dh)
    vh = v.reshape(*v.shape[:-1], heads, dh)
    if rel is not None:
        if rel.shape[-3:] != (lq, lk, d):
            raise ShapeError(f"relative encodings {tuple(rel.shape)} do not match ({lq}, {lk}, {d})")
        kk = (k.unsqueeze(-3) + rel).reshape(*rel.shape[:-1], heads, dh)
        scores = (qh.unsqueeze(-3) * kk).sum(-1)  # (..., Lq, Lk, H)
    else:
        kh = k.reshape(*k.shape[:-1], heads, dh)
        scores = torch.einsum("...qhd,...khd->...qkh", qh, kh)
    _record(scores.numel() * dh)
    scores = scores / math.sqrt(dh)
    if mask is not None:
        scores = scores.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    w = torch.softmax(scores, dim=-2)
    out = torch.einsum("...qkh,...khd->...qhd", w, vh)
    _record(w.numel() * dh)
    out = out.reshape(*out.shape[:-2], d)
    return (out, w) if return_weights else out


def attention_forward(store: ParamStore, spec: AttentionSpec, queries, keys, values,
                      relative_encodings=None, mask=None, return_weights=False):
    q = linear(store, f"{spec.name}.q", queries)
    k = linear(store, f"{spec.name}.k", keys)
    v = linear(store, f"{spec.name}.v", values)
    res = scaled_dot_attention(q, k, v, relative_encodings, mask, spec.heads, return_weights)
    if return_weights:
        out, w = res
        return linear(store, f"{spec.name}.o", out), w
    return linear(store, f"{spec.name}.o", res)


def backward(output_scalar: torch.Tensor) -> None:
    if output_scalar.numel() != 1:
        raise ValueError(f"backward needs a scalar, got shape {tuple(output_scalar.shape)}")
    output_scalar.reshape(()).backward()


# --- optimization -------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    weight_decay: float = 1e-4
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(store: ParamStore, state: OptimizerState, lr: float) -> ParamStore:
    params = store.trainable()
    if params and all(p.grad is None for _, p in params):
        raise OptimizerStateError("no gradients populated; call backward first")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params:
            g = store.grad(name)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.mul_(1.0 - lr * state.weight_decay)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return store


def cosine_lr(step: int, total_steps: int, base_lr: float = 5e-4) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


# --- checkpoint ---------------------------------------------------------------

def save_checkpoint(store: ParamStore, path, hyperparameters: dict) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f64 blobs)."""
    path = Path(path)
    entries, offset, blobs = [], 0, []
    for name, arr in store.arrays().items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        blobs.append(raw)
    manifest = {"format": "unimm-checkpoint-1", "seed": store.rng_seed,
                "hyperparameters": hyperparameters, "parameters": entries,
                "blob": path.name + ".bin"}
    path.parent.mkdir(parents=True, exist_ok=True)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    Path(str(path) + ".bin").write_bytes(b"".join(blobs))


def load_checkpoint(path):
    """Returns (arrays, hyperparameters, seed)."""
    path = Path(str(path).removesuffix(".json").removesuffix(".bin"))
    manifest = json.loads(Path(str(path) + ".json").read_text())
    blob = Path(str(path) + ".bin").read_bytes()
    arrays = OrderedDict()
    for e in manifest["parameters"]:
        a = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["hyperparameters"], manifest["seed"]
