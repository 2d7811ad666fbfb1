"""Central finite-difference checks of the reverse-mode gradients.

Each check builds a scalar from an operation's output (a fixed random
projection of every output entry), backpropagates once, and compares every
input coordinate against ``(f(x + h) - f(x - h)) / 2h``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import AlignmentConfig, NegativeQueue, contrastive_alpha, cosine_sim, infonce_loss, l2_normalize
from .rng import Rng
from .tensor import Tensor

STEP = 1e-3
TOLERANCE = 1e-4
# below this magnitude a gradient entry is compared in absolute terms
SCALE_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def rel_error(analytic, numeric) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), SCALE_FLOOR)
    return np.abs(analytic - numeric) / scale


def check_function(name, fn, inputs, step=STEP, tol=TOLERANCE, corrupt=False, seed=0) -> CheckResult:
    """Compare gradients of ``sum(R * fn(*inputs))`` for every entry of every input.

    ``inputs`` are float arrays; ``fn`` receives Tensors and returns a Tensor.
    ``corrupt`` perturbs the analytic gradient (used to exercise the failure path).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = np.random.default_rng(seed).normal(size=probe_shape)

    def scalar(arrs):
        with T.no_grad():
            out = fn(*[Tensor(a) for a in arrs])
        return float(np.sum(out.data * proj))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    T.backward((out * Tensor(proj)).sum())
    worst, count = 0.0, 0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad.copy()
        if corrupt:
            analytic = analytic + 0.01 * (1.0 + np.abs(analytic))
        numeric = np.zeros_like(analytic)
        for idx in np.ndindex(arrays[k].shape):
            orig = arrays[k][idx]
            arrays[k][idx] = orig + step
            up = scalar(arrays)
            arrays[k][idx] = orig - step
            down = scalar(arrays)
            arrays[k][idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        if analytic.size:
            worst = max(worst, float(rel_error(analytic, numeric).max()))
        count += analytic.size
    return CheckResult(name, worst, count, tol)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _op_cases(rng: np.random.Generator):
    """(name, fn, inputs) for every differentiable primitive and composite."""
    n = rng.normal
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    gather = np.array([2, 0, 2, 1])
    qnorm = n(size=(6, 4))
    qnorm /= np.linalg.norm(qnorm, axis=1, keepdims=True)
    drop_seed = 11
    return [
        ("add", lambda a, b: a + b, [n(size=(3, 4)), n(size=(4,))]),
        ("sub", lambda a, b: a - b, [n(size=(3, 1)), n(size=(3, 4))]),
        ("mul", lambda a, b: a * b, [n(size=(2, 3)), n(size=(2, 3))]),
        ("div", lambda a, b: a / b, [n(size=(2, 3)), pos(2, 3)]),
        ("matmul", lambda a, b: a @ b, [n(size=(3, 4)), n(size=(4, 2))]),
        ("batched_matmul", lambda a, b: a @ b, [n(size=(2, 3, 4)), n(size=(4, 2))]),
        ("neg", lambda a: -a, [n(size=(4,))]),
        ("power", lambda a: a**3, [n(size=(4,))]),
        ("exp", T.exp, [n(size=(5,))]),
        ("log", T.log, [pos(5)]),
        ("log1p", T.log1p, [pos(5)]),
        ("sqrt", T.sqrt, [pos(5)]),
        ("sin", T.sin, [n(size=(5,))]),
        ("cos", T.cos, [n(size=(5,))]),
        ("tanh", T.tanh, [n(size=(5,))]),
        ("relu", T.relu, [_away_from_zero(rng, (6,))]),
        ("gelu", T.gelu, [n(size=(6,))]),
        ("sigmoid", T.sigmoid, [n(size=(6,)) * 3]),
        ("softplus", T.softplus, [n(size=(6,)) * 3]),
        ("clip_min", lambda a: T.clip_min(a, 0.0), [_away_from_zero(rng, (6,))]),
        ("sum", lambda a: a.sum(axis=1), [n(size=(3, 4))]),
        ("mean", lambda a: a.mean(axis=0, keepdims=True), [n(size=(3, 4))]),
        ("reshape", lambda a: a.reshape(4, 3) * Tensor(np.arange(12.0).reshape(4, 3)), [n(size=(3, 4))]),
        ("transpose", lambda a: a.transpose(1, 0) @ Tensor(np.ones((3, 2))), [n(size=(3, 4))]),
        ("getitem", lambda a: a[gather], [n(size=(3, 2))]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [n(size=(2, 2)), n(size=(2, 3))]),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [n(size=(2, 3)), n(size=(2, 3))]),
        ("softmax", lambda a: T.softmax(a, axis=-1, temperature=0.7), [n(size=(3, 5))]),
        ("masked_softmax", lambda a: T.softmax(a, axis=-1, mask=mask), [n(size=(3, 5))]),
        ("softmax_rows", lambda a: T.softmax_rows(a, temperature=2.0), [n(size=(4, 3))]),
        ("log_softmax", lambda a: T.log_softmax(a, axis=1, temperature=1.5), [n(size=(3, 4))]),
        ("logsumexp", lambda a: T.logsumexp(a, axis=1), [n(size=(3, 4))]),
        ("layer_norm", lambda a, g, b: T.layer_norm(a, g, b), [n(size=(3, 5)), pos(5), n(size=(5,))]),
        ("dropout", lambda a: T.dropout(a, 0.3, Rng(drop_seed), enabled=True), [n(size=(4, 4))]),
        ("l2_normalize", l2_normalize, [n(size=(3, 4))]),
        ("cosine_sim", lambda a, b: Tensor(np.zeros(1)) + _cos_tensor(a, b), [n(size=(4,)), n(size=(4,))]),
        (
            "infonce_loss",
            lambda a, b: infonce_loss(a, b, qnorm, AlignmentConfig(tau=0.5), alpha=0.6),
            [n(size=(3, 4)), n(size=(3, 4))],
        ),
        (
            "infonce_in_batch",
            lambda a, b: infonce_loss(a, b, qnorm, AlignmentConfig(tau=0.5), alpha=0.6, in_batch=True),
            [n(size=(3, 4)), n(size=(3, 4))],
        ),
    ]


def _cos_tensor(a: Tensor, b: Tensor) -> Tensor:
    # differentiable twin of cosine_sim, checked against it for the value too
    value = (l2_normalize(a.reshape(1, -1)) * l2_normalize(b.reshape(1, -1))).sum()
    if abs(value.item() - cosine_sim(a.data, b.data)) > 1e-12:
        raise AssertionError("cosine_sim disagrees with its tensor form")
    return value


def _module_cases(rng: np.random.Generator):
    """Model components with their parameters exposed as inputs."""
    from .ontology import DiseaseGraph, gat_forward, GatLayer, aggregate_gstar, gated_inject
    from .temporal import attend, time_features

    n = rng.normal
    graph = DiseaseGraph(
        n_nodes=4,
        n_codes=4,
        edges=[(v, v, "self") for v in range(4)] + [(0, 1, "co-occurs"), (1, 0, "co-occurs"), (2, 1, "is-a")],
    )
    dx = np.array([[True, False, True, False], [False, False, False, False]])

    def gat(g0, wg, wa, bias):
        layer = GatLayer.__new__(GatLayer)
        layer.w_g, layer.w_a = wg, wa
        return gat_forward(g0, [layer], bias, graph)

    gat_inputs = [rng.uniform(0.2, 1.0, size=(4, 3)), np.eye(3) + 0.1 * n(size=(3, 3)), n(size=(3, 3)), n(size=(3,))]
    return [
        ("time_features", lambda w: time_features(np.array([0.0, 0.2, 3.0, 8.0]), w), [np.array([0.52])]),
        (
            "attend",
            lambda q, rows, wq, wk, wv: attend(q, rows, wq, wk, wv)[0],
            [n(size=(2, 3)), n(size=(2, 3, 3)), n(size=(3, 3)), n(size=(3, 3)), n(size=(3, 3))],
        ),
        ("gat_forward", gat, gat_inputs),
        ("aggregate_gstar", lambda g, q: aggregate_gstar(g, dx, q), [n(size=(4, 3)), n(size=(3,))]),
        (
            "gated_inject",
            lambda h, g, w, b: gated_inject(h, g, w, b),
            [n(size=(2, 3)), n(size=(2, 3)), n(size=(6, 3)), n(size=(3,))],
        ),
    ]


def run_op_checks(seed: int = 0, step=STEP, tol=TOLERANCE, corrupt: str | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in _op_cases(rng) + _module_cases(rng):
        results.append(check_function(name, fn, inputs, step, tol, corrupt=(name == corrupt), seed=seed))
    return results


# -- whole model ------------------------------------------------------------------------


def _tiny_setup(seed: int):
    from .cohort import CohortConfig, generate_cohort
    from .training import TrainConfig, init_state

    cohort = generate_cohort(CohortConfig(n_patients=24, max_visits=4, tokens_per_visit=(3, 6), seed=seed))
    cfg = TrainConfig(seed=seed)
    state = init_state(cohort, cfg)
    by_id = {r.patient_id: r for r in cohort}
    records = [by_id[i] for i in state.split_ids["train"]][:6]
    return state, records


def model_loss_fn(state, records):
    """Deterministic joint loss of the assembled model (dropout off, alpha frozen)."""
    from .model import make_batch
    from .training import gap_loss, supervised_loss, total_loss

    model = state.model
    cfg = state.config
    batch = make_batch(records, model.graph.n_nodes, cfg.model.d_img)
    queue = NegativeQueue(cfg.model.d_model, 64)
    queue.enqueue(model.momentum_text(batch))
    negatives = queue.snapshot()
    with T.no_grad():
        out = model.forward(batch)
    align = cfg.alignment
    alpha = contrastive_alpha(out["z_img"], out["z_txt"], negatives, align, in_batch=True, groups=out["groups"])

    def loss():
        out = model.forward(batch)
        comps = {
            "sup": supervised_loss(T.softmax(out["logits"], axis=1), batch.labels),
            "tf": gap_loss(out["gap_pred"], batch.next_gap, batch.next_gap_mask),
            "gac": model.ontology.link_loss(out["nodes"]),
            "cm": infonce_loss(
                out["z_img"], out["z_txt"], negatives, align, alpha=alpha, in_batch=True, groups=out["groups"]
            ),
        }
        return total_loss(comps, cfg.loss)

    return loss


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def run_model_check(
    seed: int = 0, n_params: int = 20, step=STEP, tol=TOLERANCE, corrupt: bool = False
) -> CheckResult:
    """FD check on ``n_params`` randomly chosen scalar parameters of the full model.

    A coordinate whose +h and -h probes land on different sides of a ReLU or
    clip kink has no valid central difference; it is redrawn.
    """
    state, records = _tiny_setup(seed)
    loss = model_loss_fn(state, records)
    model = state.model
    named = list(model.named_parameters())
    model.zero_grad()
    T.backward(loss())
    pick = np.random.default_rng(seed + 1)
    chosen = pick.choice(len(named), size=min(n_params, len(named)), replace=False)
    worst = 0.0
    for i in chosen:
        _, p = named[i]
        live = np.flatnonzero(p.grad)
        for _attempt in range(50):
            flat = int(pick.choice(live)) if live.size else int(pick.integers(p.data.size))
            idx = np.unravel_index(flat, p.shape)
            orig = p.data[idx]
            with T.no_grad():
                p.data[idx] = orig + step
                with T.record_branches() as up_branches:
                    up = loss().item()
                p.data[idx] = orig - step
                with T.record_branches() as down_branches:
                    down = loss().item()
            p.data[idx] = orig
            if _same_branches(up_branches, down_branches):
                break
        else:
            raise RuntimeError("no kink-free coordinate found")
        analytic = p.grad[idx] + (0.01 * (1 + abs(p.grad[idx])) if corrupt else 0.0)
        worst = max(worst, float(rel_error(analytic, (up - down) / (2 * step))))
    return CheckResult("full_model", worst, len(chosen), tol)


def check_names() -> list[str]:
    rng = np.random.default_rng(0)
    return [name for name, _, _ in _op_cases(rng) + _module_cases(rng)] + ["full_model"]


def run_all(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    if corrupt is not None and corrupt not in check_names():
        raise ValueError(f"no gradient check named {corrupt!r}")
    results = run_op_checks(seed, corrupt=corrupt)
    results.append(run_model_check(seed, corrupt=(corrupt == "full_model")))
    return results
