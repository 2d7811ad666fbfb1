"""Disease graph, graph attention, patient-level aggregation and gated injection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Linear, Module, uniform_param
from .rng import Rng
from .tensor import Tensor

RELATIONS = ("self", "is-a", "co-occurs")
_REL_ID = {name: i for i, name in enumerate(RELATIONS)}


class GraphError(ValueError):
    pass


@dataclass
class DiseaseGraph:
    """Directed typed graph; an edge (src, dst) lets dst attend to src.

    Nodes ``0..n_codes-1`` are diagnosis codes, the rest are chapter nodes.
    ``heldout`` / ``negatives`` are code pairs reserved for link prediction.
    """

    n_nodes: int
    n_codes: int
    edges: list  # (src, dst, relation name)
    heldout: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()
        self.adjacency = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)  # [dst, src]
        self.relation = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int64)
        for src, dst, rel in self.edges:
            self.adjacency[dst, src] = True
            self.relation[dst, src] = _REL_ID[rel]

    def validate(self) -> None:
        if self.n_nodes < 1 or not 0 <= self.n_codes <= self.n_nodes:
            raise GraphError("invalid node counts")
        loops = set()
        for src, dst, rel in self.edges:
            if not (0 <= src < self.n_nodes and 0 <= dst < self.n_nodes):
                raise GraphError(f"edge ({src}, {dst}) has an endpoint outside [0, {self.n_nodes})")
            if rel not in _REL_ID:
                raise GraphError(f"unknown relation type {rel!r}")
            if src == dst:
                loops.add(src)
        missing = sorted(set(range(self.n_nodes)) - loops)
        if missing:
            raise GraphError(f"nodes without a self-loop: {missing[:5]}")
        for a, b in list(self.heldout) + list(self.negatives):
            if not (0 <= a < self.n_codes and 0 <= b < self.n_codes):
                raise GraphError(f"link-prediction pair ({a}, {b}) is not a code pair")

    def neighbors(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[v])

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": i, "kind": "code" if i < self.n_codes else "chapter"} for i in range(self.n_nodes)],
            "edges": [{"src": int(s), "dst": int(d), "type": r} for s, d, r in self.edges],
            "heldout": [[int(a), int(b)] for a, b in self.heldout],
            "negatives": [[int(a), int(b)] for a, b in self.negatives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiseaseGraph":
        try:
            nodes = d["nodes"]
            edges = [(int(e["src"]), int(e["dst"]), str(e["type"])) for e in d["edges"]]
        except (KeyError, TypeError) as exc:
            raise GraphError(f"graph file missing field: {exc}") from exc
        ids = [int(n["id"]) for n in nodes]
        if ids != list(range(len(ids))):
            raise GraphError("node ids must be 0..n-1 in order")
        n_codes = sum(1 for n in nodes if n.get("kind", "code") == "code")
        return cls(
            n_nodes=len(ids),
            n_codes=n_codes,
            edges=edges,
            heldout=[tuple(p) for p in d.get("heldout", [])],
            negatives=[tuple(p) for p in d.get("negatives", [])],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DiseaseGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def cooccurrence_pmi(dx_sets, n_codes: int) -> np.ndarray:
    """Patient-level pointwise mutual information between codes (NaN when unseen)."""
    X = np.zeros((len(dx_sets), n_codes))
    for i, s in enumerate(dx_sets):
        X[i, list(s)] = 1.0
    n = max(len(dx_sets), 1)
    p = X.mean(axis=0) if len(dx_sets) else np.zeros(n_codes)
    joint = X.T @ X / n
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(joint / np.outer(p, p))
    pmi[~np.isfinite(pmi)] = np.nan
    return pmi


def build_disease_graph(dx_sets, n_codes: int, codes_per_chapter: int, rng: Rng, holdout_frac: float = 0.2):
    """Chapter/code hierarchy plus co-occurrence edges where PMI > 0."""
    n_chapters = -(-n_codes // codes_per_chapter)
    n_nodes = n_codes + n_chapters
    edges = [(v, v, "self") for v in range(n_nodes)]
    for c in range(n_codes):
        chapter = n_codes + c // codes_per_chapter
        edges.append((chapter, c, "is-a"))
        edges.append((c, chapter, "is-a"))

    pmi = cooccurrence_pmi(dx_sets, n_codes)
    linked, unlinked = [], []
    for a in range(n_codes):
        for b in range(a + 1, n_codes):
            (linked if pmi[a, b] > 0 else unlinked).append((a, b))
    order = rng.permutation(len(linked))
    n_hold = int(round(holdout_frac * len(linked))) if len(linked) > 1 else 0
    heldout = [linked[i] for i in sorted(order[:n_hold])]
    kept = [linked[i] for i in sorted(order[n_hold:])]
    for a, b in kept:
        edges.append((a, b, "co-occurs"))
        edges.append((b, a, "co-occurs"))
    neg_order = rng.permutation(len(unlinked))
    negatives = [unlinked[i] for i in sorted(neg_order[: max(n_hold, 1)])] if unlinked else []
    return DiseaseGraph(n_nodes=n_nodes, n_codes=n_codes, edges=edges, heldout=heldout, negatives=negatives)


# -- graph attention ----------------------------------------------------------------


class GatLayer(Module):
    def __init__(self, d_g: int, rng: Rng):
        # He-scaled so node states keep their magnitude through ReLU rounds
        self.w_g = Tensor(rng.uniform(-1.0, 1.0, size=(d_g, d_g)) * np.sqrt(6.0 / d_g), requires_grad=True)
        self.w_a = uniform_param((d_g, d_g), d_g, rng)


def attention_coeffs(g: Tensor, layer: GatLayer, rel_bias: Tensor, graph: DiseaseGraph) -> Tensor:
    """alpha[v, u] = softmax over u in N(v) of g_v^T W_a g_u / sqrt(d) + bias(rel(v, u))."""
    d = g.shape[1]
    gamma = ((g @ layer.w_a) @ g.T) * (1.0 / np.sqrt(d)) + rel_bias[graph.relation]
    if not graph.adjacency.any(axis=1).all():
        raise GraphError("node without neighbours (missing self-loop)")
    return T.softmax(gamma, axis=1, mask=graph.adjacency)


def gat_forward(g0: Tensor, layers, rel_bias: Tensor, graph: DiseaseGraph, n_layers: int | None = None) -> Tensor:
    """g^(l+1) = ReLU(sum_u alpha_vu W_g g_u), for the first ``n_layers`` layers."""
    g = T.as_tensor(g0)
    n_layers = len(layers) if n_layers is None else n_layers
    for layer in layers[:n_layers]:
        alpha = attention_coeffs(g, layer, rel_bias, graph)
        g = T.relu(alpha @ (g @ layer.w_g))
    return g


def aggregate_gstar(g: Tensor, dx_mask: np.ndarray, query: Tensor) -> Tensor:
    """Attention-weighted mean over each patient's diagnosed nodes.

    g (N, d), dx_mask (B, N) -> (B, d).  Rows with no diagnoses fall back to
    the plain mean over all nodes.
    """
    dx_mask = np.atleast_2d(np.asarray(dx_mask, dtype=bool))
    d = g.shape[1]
    empty = ~dx_mask.any(axis=1)
    scores = (g @ query.reshape(d, 1)).reshape(1, -1) * (1.0 / np.sqrt(d))  # (1, N)
    scores = scores * Tensor((~empty).astype(np.float64)[:, None])  # (B, N); zero on empty rows
    mask = dx_mask | empty[:, None]
    w = T.softmax(scores, axis=1, mask=mask)
    return w @ g


def gated_inject(h: Tensor, gstar: Tensor, w_c: Tensor, b_c: Tensor) -> Tensor:
    """h + sigmoid(W_c [h || g*] + b_c) * g*, with g* broadcast over any time axis."""
    h, gstar = T.as_tensor(h), T.as_tensor(gstar)
    if h.shape[-1] != gstar.shape[-1]:
        raise ValueError(f"dimension mismatch: h {h.shape} vs g* {gstar.shape}")
    if h.ndim == 3 and gstar.ndim == 2:
        gstar = gstar.reshape(gstar.shape[0], 1, gstar.shape[1]) + Tensor(np.zeros(h.shape))
    if gstar.shape != h.shape:
        raise ValueError(f"dimension mismatch: h {h.shape} vs g* {gstar.shape}")
    gate = T.sigmoid(T.concat([h, gstar], axis=-1) @ w_c + b_c)
    return h + gate * gstar


class OntologyAdapter(Module):
    """Node embeddings, GAT stack, patient query and the injection gate."""

    def __init__(self, graph: DiseaseGraph, d_g: int, d_model: int, rng: Rng, n_layers: int = 2):
        self._graph = graph
        self.d_g = d_g
        self.nodes = uniform_param((graph.n_nodes, d_g), 1, rng)  # lookup rows: fan_in 1
        self.layers = [GatLayer(d_g, rng) for _ in range(n_layers)]
        self.rel_bias = Tensor(np.zeros(len(RELATIONS)), requires_grad=True)
        self.query = uniform_param((d_g,), d_g, rng)
        self.proj = Linear(d_g, d_model, rng, bias=False)
        self.w_c = uniform_param((2 * d_model, d_model), 2 * d_model, rng)
        self.b_c = uniform_param((d_model,), 2 * d_model, rng)

    @property
    def graph(self) -> DiseaseGraph:
        return self._graph

    def node_states(self) -> Tensor:
        return gat_forward(self.nodes, self.layers, self.rel_bias, self._graph)

    def patient_context(self, g: Tensor, dx_mask: np.ndarray) -> Tensor:
        """g* projected to d_model, shape (B, d_model)."""
        return self.proj(aggregate_gstar(g, dx_mask, self.query))

    def inject(self, h: Tensor, gstar: Tensor) -> Tensor:
        return gated_inject(h, gstar, self.w_c, self.b_c)

    def link_loss(self, g: Tensor) -> Tensor | None:
        """Logistic loss on held-out co-occurrence pairs against non-edges."""
        graph = self._graph
        if not graph.heldout or not graph.negatives:
            return None
        scale = 1.0 / np.sqrt(g.shape[1])
        pos = np.array(graph.heldout)
        neg = np.array(graph.negatives)
        s_pos = (g[pos[:, 0]] * g[pos[:, 1]]).sum(axis=1) * scale
        s_neg = (g[neg[:, 0]] * g[neg[:, 1]]).sum(axis=1) * scale
        return T.softplus(-s_pos).mean() + T.softplus(s_neg).mean()
