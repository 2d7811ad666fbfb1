"""Image/text encoders and their momentum (EMA) copies."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import MLP, Module, uniform_param
from .rng import Rng
from .tensor import Tensor


def pad_tokens(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Pack token sequences into a (N, L) id array and a boolean mask."""
    seqs = [list(s) for s in seqs]
    for s in seqs:
        if not s:
            raise ValueError("empty token sequence")
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


class ImageEncoder(Module):
    def __init__(self, d_img: int, d_model: int, rng: Rng, hidden: int = 64):
        self.d_img = d_img
        self.mlp = MLP(d_img, hidden, d_model, rng)

    def __call__(self, img) -> Tensor:
        x = T.as_tensor(img)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        if x.shape[-1] != self.d_img:
            raise ValueError(f"image features have length {x.shape[-1]}, expected {self.d_img}")
        out = self.mlp(x)
        return out.reshape(-1) if squeeze else out


class TextEncoder(Module):
    def __init__(self, vocab_size: int, d_model: int, rng: Rng, d_embed: int = 32, hidden: int = 64):
        self.vocab_size = vocab_size
        self.table = uniform_param((vocab_size, d_embed), 1, rng)  # lookup rows: fan_in 1
        self.mlp = MLP(d_embed, hidden, d_model, rng)

    def __call__(self, ids, mask=None) -> Tensor:
        """Encode padded ids (N, L) with mask, or one plain token sequence."""
        ids = np.asarray(ids)
        squeeze = ids.ndim == 1
        if squeeze:
            if ids.size == 0:
                raise ValueError("empty token sequence")
            ids = ids[None, :]
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("empty token sequence")
        used = ids[mask]
        if used.min() < 0 or used.max() >= self.vocab_size:
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        emb = self.table[np.where(mask, ids, 0)]  # (N, L, d_embed)
        weights = mask / mask.sum(axis=1, keepdims=True)
        pooled = (emb * weights[:, :, None]).sum(axis=1)
        out = self.mlp(pooled)
        return out.reshape(-1) if squeeze else out


class EncoderPair(Module):
    """Main encoders plus EMA copies that never enter a gradient tape."""

    def __init__(self, d_img: int, vocab_size: int, d_model: int, rng: Rng, beta: float = 0.99):
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        self.beta = beta
        self.image = ImageEncoder(d_img, d_model, rng)
        self.text = TextEncoder(vocab_size, d_model, rng)
        self._momentum_image = ImageEncoder(d_img, d_model, rng)
        self._momentum_text = TextEncoder(vocab_size, d_model, rng)
        for main, mom in ((self.image, self._momentum_image), (self.text, self._momentum_text)):
            for (_, p), (_, q) in zip(main.named_parameters(), mom.named_parameters()):
                q.data = p.data.copy()
            for q in mom.parameters():
                q.requires_grad = False
                q.grad = None

    @property
    def momentum_image(self) -> ImageEncoder:
        return self._momentum_image

    @property
    def momentum_text(self) -> TextEncoder:
        return self._momentum_text

    def _pairs(self):
        for main, mom in ((self.image, self._momentum_image), (self.text, self._momentum_text)):
            main_p = dict(main.named_parameters())
            mom_p = dict(_all_tensors(mom))
            if main_p.keys() != mom_p.keys():
                raise ValueError("main and momentum encoders have different parameter sets")
            for name, p in main_p.items():
                q = mom_p[name]
                if p.shape != q.shape:
                    raise ValueError(f"shape mismatch for {name}: {p.shape} vs {q.shape}")
                yield name, p, q

    def momentum_update(self) -> None:
        """phi_m <- beta * phi_m + (1 - beta) * phi, elementwise."""
        pairs = list(self._pairs())
        b = self.beta
        for _, p, q in pairs:
            q.data = b * q.data + (1.0 - b) * p.data

    def momentum_state(self) -> dict:
        out = {}
        for prefix, mom in (("image", self._momentum_image), ("text", self._momentum_text)):
            for name, q in _all_tensors(mom):
                out[f"{prefix}.{name}"] = q.data.copy()
        return out

    def load_momentum_state(self, state: dict) -> None:
        for prefix, mom in (("image", self._momentum_image), ("text", self._momentum_text)):
            for name, q in _all_tensors(mom):
                q.data = np.asarray(state[f"{prefix}.{name}"], dtype=np.float64).copy()


def _all_tensors(module: Module, prefix: str = ""):
    """Like named_parameters but also yields frozen tensors."""
    for key, value in vars(module).items():
        if key.startswith("_"):
            continue
        name = f"{prefix}{key}"
        if isinstance(value, Tensor):
            yield name, value
        elif isinstance(value, Module):
            yield from _all_tensors(value, name + ".")
