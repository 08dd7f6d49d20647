"""AdamW with decoupled weight decay, and the bit-exact parameter checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Value

_CHECKPOINT_FORMAT = "skeldiff-checkpoint-v1"


@dataclass
class AdamWHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    """First/second moment buffers per parameter, plus the shared step counter."""

    hyper: AdamWHyper
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def adamw_init(params: dict[str, Value], hyper: AdamWHyper | None = None) -> AdamWState:
    hyper = hyper if hyper is not None else AdamWHyper()
    state = AdamWState(hyper=hyper)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params: dict[str, Value], grads: dict[str, np.ndarray], state: AdamWState) -> AdamWState:
    """One update: decoupled decay (param *= 1 - lr*wd), then bias-corrected moments.

    Parameters and state are updated in place; the state is returned for chaining.
    """
    if not state.m:
        raise ValueError("optimizer state is uninitialized; call adamw_init first")
    h = state.hyper
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - h.beta1**t
    bc2 = 1.0 - h.beta2**t
    for name, p in params.items():
        if name not in state.m:
            raise ValueError(f"parameter {name!r} missing from optimizer state")
        g = grads.get(name)
        if g is None:
            raise ValueError(f"no gradient provided for parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        if h.weight_decay:
            p.data *= 1.0 - h.lr * h.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * g * g
        p.data -= h.lr * (m / bc1) / (np.sqrt(v / bc2) + h.eps)
    return state


def save_checkpoint(params: dict[str, Value | np.ndarray], path, extra: dict | None = None) -> None:
    """One JSON manifest line (ordered names and shapes), then raw '<f8' buffers."""
    entries = []
    buffers = []
    for name, p in params.items():
        data = p.data if isinstance(p, Value) else np.asarray(p, dtype=np.float64)
        entries.append({"name": name, "shape": list(data.shape)})
        buffers.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    manifest = {"format": _CHECKPOINT_FORMAT, "params": entries, "extra": extra or {}}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for buf in buffers:
            f.write(buf)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode("utf-8"))
        if manifest.get("format") != _CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        params: dict[str, np.ndarray] = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 8)
            if len(buf) != n * 8:
                raise ValueError(f"{path}: truncated buffer for parameter {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        trailing = f.read(1)
    if trailing:
        raise ValueError(f"{path}: trailing bytes after declared parameters")
    return params, manifest.get("extra", {})
