"""Parameter containers, layers, optimizer and checkpoint files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


def uniform_param(shape, fan_in: int, rng: Rng, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Module:
    """Collects Tensor parameters from attributes, nested modules and lists."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, bias: bool = True):
        self.weight = uniform_param((n_in, n_out), n_in, rng)
        self.bias = uniform_param((n_out,), n_in, rng) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift)


class MLP(Module):
    """Two affine layers with a ReLU between them."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: Rng):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params)))

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += scale * p.grad
            p.data = p.data - self.lr * v


# -- checkpoint files -------------------------------------------------------------
#
# <stem>.bin holds the arrays back to back as little-endian float64;
# <stem>.json holds {"arrays": [{name, shape, offset}], "meta": {...}}.


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"format": "vlrisk-f64-v1", "arrays": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_arrays(path) -> tuple[dict, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        buf = raw[start : start + 8 * count]
        if len(buf) != 8 * count:
            raise ValueError(f"checkpoint truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
    return arrays, manifest.get("meta", {})
