"""Irregular-gap time encoding, per-visit fusion and the causal decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, uniform_param
from .rng import Rng
from .tensor import Tensor


def time_features(delta_t, omega: Tensor) -> Tensor:
    """[sin(w dt), cos(w dt), dt, log(1 + dt)] stacked on the last axis."""
    dt = np.asarray(delta_t, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError("time gaps must be non-negative")
    phase = T.as_tensor(dt[..., None]) * omega  # (..., 1)
    lin = Tensor(dt[..., None])
    logc = Tensor(np.log1p(dt)[..., None])
    return T.concat([T.sin(phase), T.cos(phase), lin, logc], axis=-1)


class TimeEncoder(Module):
    """psi(dt) = W_t [sin(w dt), cos(w dt), dt, log(1 + dt)] + b_t.

    Gaps arrive in days and are divided by ``unit_days`` first.  The
    frequency is kept positive as exp(rho) and starts at one cycle per year.
    """

    def __init__(self, d_model: int, rng: Rng, unit_days: float = 30.0):
        self.unit_days = float(unit_days)
        self.weight = uniform_param((4, d_model), 4, rng)  # W_t, stored transposed
        self.bias = uniform_param((d_model,), 4, rng)
        self.rho = Tensor(np.array([np.log(2 * np.pi * self.unit_days / 365.0)]), requires_grad=True)

    @property
    def omega(self) -> float:
        return float(np.exp(self.rho.data[0]))

    def features(self, delta_t_days) -> Tensor:
        dt = np.asarray(delta_t_days, dtype=np.float64) / self.unit_days
        return time_features(dt, T.exp(self.rho))

    def __call__(self, delta_t_days) -> Tensor:
        """Gaps of any shape (...) -> encodings (..., d_model)."""
        feats = self.features(delta_t_days)
        lead = feats.shape[:-1]
        out = feats.reshape(-1, 4) @ self.weight + self.bias
        return out.reshape(*lead, out.shape[-1])


def attend(query: Tensor, rows: Tensor, wq: Tensor, wk: Tensor, wv: Tensor):
    """Single-head scaled dot-product attention of one query over a row set.

    query (N, d), rows (N, R, d) -> (attended (N, d), weights (N, R)).
    """
    d = wq.shape[1]
    q = (query @ wq).reshape(query.shape[0], 1, d)
    k = rows @ wk
    v = rows @ wv
    scores = (k @ q.transpose(0, 2, 1)).reshape(rows.shape[0], rows.shape[1]) * (1.0 / np.sqrt(d))
    w = T.softmax(scores, axis=-1)
    out = (w.reshape(rows.shape[0], 1, rows.shape[1]) @ v).reshape(rows.shape[0], d)
    return out, w


class CrossAttention(Module):
    """z = query + W_o attend(query, {img, txt, time}), query = img + time."""

    def __init__(self, d_model: int, rng: Rng):
        self.d_model = d_model
        self.wq = uniform_param((d_model, d_model), d_model, rng)
        self.wk = uniform_param((d_model, d_model), d_model, rng)
        self.wv = uniform_param((d_model, d_model), d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self._last_weights = None

    def fuse_rows(self, query: Tensor, rows: Tensor) -> Tensor:
        att, w = attend(query, rows, self.wq, self.wk, self.wv)
        self._last_weights = w.data
        return query + self.out(att)

    def __call__(self, img: Tensor, txt: Tensor, time_vec: Tensor) -> Tensor:
        img, txt, time_vec = T.as_tensor(img), T.as_tensor(txt), T.as_tensor(time_vec)
        squeeze = img.ndim == 1
        if squeeze:
            img, txt, time_vec = (x.reshape(1, -1) for x in (img, txt, time_vec))
        if not img.shape == txt.shape == time_vec.shape or img.shape[-1] != self.d_model:
            raise ValueError(
                f"cross_attend expects equal (N, {self.d_model}) inputs, got {img.shape}, {txt.shape}, {time_vec.shape}"
            )
        rows = T.stack([img, txt, time_vec], axis=1)
        z = self.fuse_rows(img + time_vec, rows)
        return z.reshape(-1) if squeeze else z


class CausalSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: Rng):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.proj = Linear(d_model, d_model, rng)
        self._last_weights = None

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, S, d = x.shape
        H = self.n_heads
        dh = d // H
        qkv = self.qkv(x).reshape(B, S, 3, H, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, S, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        w = T.softmax(scores, axis=-1, mask=mask[:, None, :, :])
        self._last_weights = w.data
        out = (w @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        return self.proj(out)


class DecoderBlock(Module):
    def __init__(self, d_model: int, n_heads: int, rng: Rng, ff_mult: int = 4):
        self.ln1 = LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, ff_mult * d_model, rng)
        self.ff2 = Linear(ff_mult * d_model, d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ff2(T.gelu(self.ff1(self.ln2(x))))


def causal_mask(valid: np.ndarray) -> np.ndarray:
    """(B, S+1, S+1) mask for S visits plus a trailing CLS slot.

    Row t admits column j when j <= t and visit j is real; the CLS row
    therefore sees every real visit and itself.
    """
    B, S = valid.shape
    keys = np.concatenate([valid, np.ones((B, 1), dtype=bool)], axis=1)
    tri = np.tril(np.ones((S + 1, S + 1), dtype=bool))
    return tri[None, :, :] & keys[:, None, :]


class CausalDecoder(Module):
    """Pre-norm masked self-attention stack with a learned CLS slot at the end."""

    def __init__(self, d_model: int, rng: Rng, n_layers: int = 2, n_heads: int = 4):
        self.blocks = [DecoderBlock(d_model, n_heads, rng) for _ in range(n_layers)]
        self.ln_f = LayerNorm(d_model)
        self.cls = uniform_param((d_model,), d_model, rng)

    def attention_maps(self) -> list:
        return [b.attn._last_weights for b in self.blocks]

    def __call__(self, z: Tensor, valid=None) -> tuple[Tensor, Tensor]:
        """z (B, S, d) or (S, d) -> (h with the same leading shape, cls state)."""
        z = T.as_tensor(z)
        squeeze = z.ndim == 2
        if squeeze:
            z = z.reshape(1, *z.shape)
        B, S, d = z.shape
        if S < 1:
            raise ValueError("decode_causal needs at least one visit")
        if valid is None:
            valid = np.ones((B, S), dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        cls = T.concat([self.cls.reshape(1, 1, d)] * B, axis=0) if B > 1 else self.cls.reshape(1, 1, d)
        x = T.concat([z, cls], axis=1)
        mask = causal_mask(valid)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_f(x)
        h = x[:, :S, :]
        cls_state = x[:, S, :]
        if squeeze:
            return h.reshape(S, d), cls_state.reshape(d)
        return h, cls_state
