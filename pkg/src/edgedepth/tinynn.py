"""Minimal differentiable layer stack with hand-written backward passes.

Everything operates on float64 tensors shaped (batch, edges, features).
A layer applies, in order: fully-connected map, context normalization
(per-feature standardization across the edge axis of one instance, which
injects set-level information into every edge), batch normalization over
all edges of all instances in the batch, and a rectifier. Gradients are
exact; `grad_check` verifies any model against central finite differences.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import (
    IncompatibleCheckpoint,
    NonFiniteGradient,
    ParseError,
    ShapeMismatch,
)

EPS_NORM = 1e-8

CHECKPOINT_FORMAT = "edgedepth.checkpoint"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameter arrays plus AdamW moments and non-trained buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step = 0

    def register_param(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = arr
        self.moment1[name] = np.zeros_like(arr)
        self.moment2[name] = np.zeros_like(arr)
        return arr

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(a) for name, a in self.params.items()}

    def copy_state(self) -> dict:
        """Deep copy of everything needed to restore this store later."""
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "buffers": {k: v.copy() for k, v in self.buffers.items()},
            "moment1": {k: v.copy() for k, v in self.moment1.items()},
            "moment2": {k: v.copy() for k, v in self.moment2.items()},
            "step": self.step,
        }

    def load_state(self, state: dict) -> None:
        for group_name in ("params", "buffers", "moment1", "moment2"):
            group = getattr(self, group_name)
            incoming = state[group_name]
            if set(group) != set(incoming):
                raise IncompatibleCheckpoint(
                    f"{group_name} names differ: {sorted(set(group) ^ set(incoming))}"
                )
            for k, arr in incoming.items():
                if group[k].shape != arr.shape:
                    raise IncompatibleCheckpoint(
                        f"{group_name}[{k}] shape {arr.shape} != {group[k].shape}"
                    )
                group[k][...] = arr
        self.step = int(state["step"])


def adamw_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Decoupled-weight-decay adaptive update, in place.

    Only parameters present in `grads` are touched. Raises
    NonFiniteGradient before modifying anything if any gradient is bad.
    """
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"unknown parameter {name!r}")
        if g.shape != store.params[name].shape:
            raise ShapeMismatch(f"gradient shape for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name)
    store.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** store.step
    bc2 = 1.0 - b2 ** store.step
    for name, g in grads.items():
        p = store.params[name]
        m1 = store.moment1[name]
        m2 = store.moment2[name]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * g * g
        update = (m1 / bc1) / (np.sqrt(m2 / bc2) + eps) + weight_decay * p
        p -= lr * update


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True)
class EncoderConfig:
    """Sizes for an edge-feature encoder (layer count K, widths)."""

    layers: int = 6
    hidden: int = 128
    in_dim: int = 4
    out_dim: int = 128
    momentum: float = 0.9
    eps: float = EPS_NORM

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if min(self.hidden, self.in_dim, self.out_dim) < 1:
            raise ValueError("widths must be >= 1")


@dataclass
class LayerCache:
    mode: str
    x: np.ndarray
    xc: np.ndarray        # context-normalized activations
    inv_cn: np.ndarray    # (B, d)
    mu_bn: np.ndarray     # (d,)
    inv_bn: np.ndarray    # (d,)


class Layer:
    """FC -> context norm -> batch norm -> ReLU with exact backward."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator, momentum: float = 0.9,
                 eps: float = EPS_NORM):
        self.eps = eps
        self.momentum = momentum
        self.W = store.register_param(f"{prefix}.W", xavier_uniform(rng, d_in, d_out))
        self.b = store.register_param(f"{prefix}.b", np.zeros(d_out))
        self.gamma = store.register_param(f"{prefix}.gamma", np.ones(d_out))
        self.beta = store.register_param(f"{prefix}.beta", np.zeros(d_out))
        self.run_mean = store.register_buffer(f"{prefix}.run_mean", np.zeros(d_out))
        self.run_var = store.register_buffer(f"{prefix}.run_var", np.ones(d_out))
        self.prefix = prefix

    def forward(self, x: np.ndarray, mode: str) -> tuple[np.ndarray, LayerCache]:
        if x.ndim != 3 or x.shape[2] != self.W.shape[0]:
            raise ShapeMismatch(
                f"{self.prefix}: input {x.shape} incompatible with W {self.W.shape}"
            )
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        B, m, _ = x.shape
        z = (x.reshape(B * m, -1) @ self.W).reshape(B, m, -1)
        z += self.b
        y, xc, inv_cn, mu_bn, inv_bn = _backend.cn_bn_relu_forward(
            z, self.gamma, self.beta, self.run_mean, self.run_var,
            self.momentum, self.eps, mode == "train")
        return y, LayerCache(mode, x, xc, inv_cn, mu_bn, inv_bn)

    def backward(self, cache: LayerCache, dy: np.ndarray):
        if dy.shape != cache.xc.shape:
            raise ShapeMismatch(f"{self.prefix}: dy {dy.shape}")
        dz, dgamma, dbeta = _backend.cn_bn_relu_backward(
            dy, cache.xc, cache.inv_cn, cache.mu_bn, cache.inv_bn,
            self.gamma, self.beta, cache.mode == "train")
        x2 = cache.x.reshape(-1, cache.x.shape[2])
        dz2 = dz.reshape(-1, dz.shape[2])
        grads = {
            f"{self.prefix}.W": x2.T @ dz2,
            f"{self.prefix}.b": dz2.sum(axis=0),
            f"{self.prefix}.gamma": dgamma,
            f"{self.prefix}.beta": dbeta,
        }
        dx = (dz2 @ self.W.T).reshape(cache.x.shape)
        return dx, grads


class EdgeEncoder:
    """Stack of K layers mapping raw edge features to matching features."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str,
                 rng: np.random.Generator):
        self.cfg = cfg
        dims = [cfg.in_dim] + [cfg.hidden] * (cfg.layers - 1) + [cfg.out_dim]
        self.layers = [
            Layer(store, f"{prefix}.layer{i}", dims[i], dims[i + 1], rng,
                  cfg.momentum, cfg.eps)
            for i in range(cfg.layers)
        ]

    def forward(self, x: np.ndarray, mode: str):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dy: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, layer_grads = layer.backward(cache, dy)
            grads.update(layer_grads)
        return dy, grads


class PlainMLP:
    """FC + ReLU stack without normalization, for small scalar heads."""

    def __init__(self, dims: list[int], store: ParamStore, prefix: str,
                 rng: np.random.Generator):
        self.prefix = prefix
        self.W = []
        self.b = []
        for i in range(len(dims) - 1):
            self.W.append(store.register_param(
                f"{prefix}.fc{i}.W", xavier_uniform(rng, dims[i], dims[i + 1])))
            self.b.append(store.register_param(
                f"{prefix}.fc{i}.b", np.zeros(dims[i + 1])))

    def forward(self, x: np.ndarray):
        cache = []
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = x @ W + b
            if i < len(self.W) - 1:
                y = np.maximum(z, 0.0)
                cache.append((x, z > 0.0))
                x = y
            else:
                cache.append((x, None))
                x = z
        return x, cache

    def backward(self, cache, dy: np.ndarray):
        grads = {}
        for i in range(len(self.W) - 1, -1, -1):
            x, mask = cache[i]
            dz = dy if mask is None else None
            if mask is not None:
                dz = dy * mask
            x2 = x.reshape(-1, x.shape[-1])
            dz2 = dz.reshape(-1, dz.shape[-1])
            grads[f"{self.prefix}.fc{i}.W"] = x2.T @ dz2
            grads[f"{self.prefix}.fc{i}.b"] = dz2.sum(axis=0)
            dy = dz @ self.W[i].T
        return dy, grads


def l2_normalize_rows(x: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """Scale each row to unit Euclidean norm; rows with norm <= eps pass through
    divided by eps (so exact zero rows stay zero)."""
    return _backend.l2_normalize_rows(x, eps)


def l2_normalize_rows_backward(x: np.ndarray, dy: np.ndarray,
                               eps: float = EPS_NORM) -> np.ndarray:
    return _backend.l2_normalize_rows_backward(x, dy, eps)


def grad_check(loss_and_grads, store: ParamStore, n_samples: int = 1000,
               h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_and_grads()` must be deterministic (frozen normalization statistics
    or a fixed batch) and return (loss, grads_dict). The relative error is
    measured against a floor of 1e-3 times the largest sampled analytic
    gradient, so directions with negligible gradient cannot drown the check
    in finite-difference roundoff.
    """
    loss0, grads = loss_and_grads()
    positions = []
    for name in sorted(grads):
        for flat in range(store.params[name].size):
            positions.append((name, flat))
    rng = np.random.default_rng(seed)
    if len(positions) > n_samples:
        chosen = rng.choice(len(positions), size=n_samples, replace=False)
        positions = [positions[i] for i in sorted(chosen)]
    gmax = max(abs(float(grads[name].flat[flat])) for name, flat in positions)
    floor = 1e-3 * max(gmax, 1e-8)
    worst = 0.0
    for name, flat in positions:
        p = store.params[name]
        orig = p.flat[flat]
        p.flat[flat] = orig + h
        lp, _ = loss_and_grads()
        p.flat[flat] = orig - h
        lm, _ = loss_and_grads()
        p.flat[flat] = orig
        fd = (lp - lm) / (2.0 * h)
        a = float(grads[name].flat[flat])
        rel = abs(a - fd) / max(abs(a), abs(fd), floor)
        worst = max(worst, rel)
    return worst


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape),
            "data": base64.b64encode(data).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
    if arr.size != expected:
        raise ParseError(f"array data has {arr.size} values, shape says {expected}")
    return arr.reshape(entry["shape"])


def save_checkpoint(path, store: ParamStore, config: dict) -> None:
    """Write a self-describing checkpoint.

    Single JSON object with sorted keys (bit-identical for identical state):
    format/version markers, the caller's config, the optimizer step, and
    params / buffers / moment1 / moment2 maps of name -> {shape, data},
    where data is base64 of the row-major little-endian float64 bytes.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "step": store.step,
        "params": {k: _encode_array(v) for k, v in store.params.items()},
        "buffers": {k: _encode_array(v) for k, v in store.buffers.items()},
        "moment1": {k: _encode_array(v) for k, v in store.moment1.items()},
        "moment2": {k: _encode_array(v) for k, v in store.moment2.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (state, config) where state matches
    ParamStore.load_state input."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid checkpoint JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint("not an edgedepth checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported version {doc.get('version')}")
    state = {"step": doc["step"]}
    for group in ("params", "buffers", "moment1", "moment2"):
        state[group] = {k: _decode_array(v) for k, v in doc[group].items()}
    return state, doc["config"]
