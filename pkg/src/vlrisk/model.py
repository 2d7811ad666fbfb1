"""The assembled risk model and batch packing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoders import EncoderPair
from .nn import Linear, Module
from .ontology import DiseaseGraph, OntologyAdapter
from .risk_head import RiskHead
from .rng import Rng
from .temporal import CausalDecoder, CrossAttention, TimeEncoder


@dataclass
class ModelConfig:
    d_model: int = 64
    d_img: int = 16
    vocab_size: int = 200
    n_classes: int = 2
    d_graph: int = 32
    gat_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    beta: float = 0.99
    dropout: float = 0.1
    mc_samples: int = 20
    unit_days: float = 30.0
    n_codes: int = 16
    codes_per_chapter: int = 4
    queue_capacity: int = 1024

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    patient_ids: list
    img: np.ndarray  # (B, S, D)
    tokens: np.ndarray  # (B, S, L)
    token_mask: np.ndarray  # (B, S, L)
    delta_t: np.ndarray  # (B, S) days
    valid: np.ndarray  # (B, S)
    dx_mask: np.ndarray  # (B, n_nodes)
    labels: np.ndarray  # (B,)
    next_gap: np.ndarray  # (B, S) log(1 + next gap in days)
    next_gap_mask: np.ndarray  # (B, S)

    @property
    def size(self) -> int:
        return len(self.patient_ids)


def make_batch(records, n_nodes: int, d_img: int) -> Batch:
    B = len(records)
    S = max(len(r.visits) for r in records)
    L = max(len(v.tokens) for r in records for v in r.visits)
    img = np.zeros((B, S, d_img))
    tokens = np.zeros((B, S, L), dtype=np.int64)
    tmask = np.zeros((B, S, L), dtype=bool)
    tmask[:, :, 0] = True  # padded visits get one dummy token
    delta = np.zeros((B, S))
    valid = np.zeros((B, S), dtype=bool)
    dx = np.zeros((B, n_nodes), dtype=bool)
    nxt = np.zeros((B, S))
    nmask = np.zeros((B, S), dtype=bool)
    for i, r in enumerate(records):
        for t, v in enumerate(r.visits):
            if len(v.img) != d_img:
                raise ValueError(f"{r.patient_id}: image features of length {len(v.img)}, expected {d_img}")
            img[i, t] = v.img
            tokens[i, t, : len(v.tokens)] = v.tokens
            tmask[i, t, : len(v.tokens)] = True
            delta[i, t] = v.delta_t
            valid[i, t] = True
            for c in v.dx:
                if not 0 <= c < n_nodes:
                    raise ValueError(f"{r.patient_id}: diagnosis code {c} outside the graph")
                dx[i, c] = True
            if t + 1 < len(r.visits):
                nxt[i, t] = np.log1p(r.visits[t + 1].delta_t)
                nmask[i, t] = True
    return Batch(
        patient_ids=[r.patient_id for r in records],
        img=img,
        tokens=tokens,
        token_mask=tmask,
        delta_t=delta,
        valid=valid,
        dx_mask=dx,
        labels=np.array([r.label for r in records], dtype=np.int64),
        next_gap=nxt,
        next_gap_mask=nmask,
    )


class RiskFormer(Module):
    def __init__(self, cfg: ModelConfig, graph: DiseaseGraph, rng: Rng):
        self.cfg = cfg
        d = cfg.d_model
        self.encoders = EncoderPair(cfg.d_img, cfg.vocab_size, d, rng.child(1), beta=cfg.beta)
        self.time = TimeEncoder(d, rng.child(2), unit_days=cfg.unit_days)
        self.fusion = CrossAttention(d, rng.child(3))
        self.decoder = CausalDecoder(d, rng.child(4), n_layers=cfg.decoder_layers, n_heads=cfg.heads)
        self.ontology = OntologyAdapter(graph, cfg.d_graph, d, rng.child(5), n_layers=cfg.gat_layers)
        self.head = RiskHead(d, cfg.n_classes, rng.child(6), dropout=cfg.dropout, mc_samples=cfg.mc_samples)
        self.gap_head = Linear(d, 1, rng.child(7))
        self.gate_enabled = True

    @property
    def graph(self) -> DiseaseGraph:
        return self.ontology.graph

    def forward(self, batch: Batch, rng: Rng | None = None, train: bool = False, sequence: bool = False) -> dict:
        cfg = self.cfg
        B, S = batch.valid.shape
        N = B * S
        zi = self.encoders.image(batch.img.reshape(N, cfg.d_img))
        zt = self.encoders.text(batch.tokens.reshape(N, -1), batch.token_mask.reshape(N, -1))
        psi = self.time(batch.delta_t.reshape(N))
        z = self.fusion(zi, zt, psi).reshape(B, S, cfg.d_model)
        h, cls = self.decoder(z, batch.valid)

        g = self.ontology.node_states()
        gstar = self.ontology.patient_context(g, batch.dx_mask)
        if not self.gate_enabled:
            gstar = gstar * 0.0
        h_cls = self.ontology.inject(cls, gstar)
        dropped = T.dropout(h_cls, cfg.dropout, rng, enabled=train and rng is not None)
        logits = self.head.logits(dropped)

        flat_valid = np.flatnonzero(batch.valid.reshape(N))
        out = {
            "logits": logits,
            "h": h,
            "h_cls": h_cls,
            "gap_pred": self.gap_head(h).reshape(B, S),
            "z_img": zi[flat_valid],
            "z_txt": zt[flat_valid],
            "groups": flat_valid // S,  # patient row of each valid visit
            "nodes": g,
        }
        if sequence:
            out["h_tilde"] = self.ontology.inject(h, gstar)
        return out

    def momentum_text(self, batch: Batch) -> np.ndarray:
        N = batch.valid.size
        with T.no_grad():
            zt = self.encoders.momentum_text(batch.tokens.reshape(N, -1), batch.token_mask.reshape(N, -1))
        return zt.data[np.flatnonzero(batch.valid.reshape(N))]
