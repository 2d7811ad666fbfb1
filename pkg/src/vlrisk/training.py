"""Joint objective, optimisation loop, temperature fitting and policy-gradient phase."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from . import tensor as T
from .alignment import AlignmentConfig, NegativeQueue, infonce_loss
from .cohort import class_names
from .model import Batch, ModelConfig, RiskFormer, make_batch
from .nn import SGD, load_arrays, save_arrays
from .ontology import DiseaseGraph, build_disease_graph
from .risk_head import ActionTable, build_bundles, calibrated_proba, mc_uncertainty
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "epoch", "split", "loss_total", "loss_cm", "loss_tf", "loss_gac",
    "loss_sup", "auroc", "ece", "act", "reward",
]  # fmt: skip

TEMPERATURE_GRID = np.round(np.arange(0.25, 4.0 + 1e-9, 0.05), 2)
PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    time: float = 0.5
    graph: float = 0.5
    sup: float = 1.0
    rl: float = 0.1

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass
class RewardWeights:
    auroc: float = 0.5
    calibration: float = 0.3
    act: float = 0.2
    baseline_decay: float = 0.9

    def validate(self) -> None:
        if min(self.auroc, self.calibration, self.act) < 0:
            raise ValueError("reward weights must be >= 0")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline decay must lie in [0, 1)")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    reward: RewardWeights = field(default_factory=RewardWeights)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    epochs: int = 20
    rl_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05
    rl_lr: float = 0.005
    momentum: float = 0.9
    clip_norm: float | None = 5.0
    split: tuple = (0.70, 0.15, 0.15)
    act_threshold: float = 0.5
    review_percentile: float = 90.0
    keep_best: bool = True  # restore the supervised epoch with the lowest validation NLL
    seed: int = 42

    def validate(self) -> None:
        self.loss.validate()
        self.reward.validate()
        self.alignment.validate()
        if self.epochs < 0 or self.rl_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError("split fractions must be positive and sum to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        out = cls()
        if "model" in d:
            out.model = ModelConfig.from_dict(d.pop("model"))
        if "loss" in d:
            out.loss = LossWeights(**d.pop("loss"))
        if "reward" in d:
            out.reward = RewardWeights(**d.pop("reward"))
        if "alignment" in d:
            out.alignment = AlignmentConfig(**d.pop("alignment"))
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                continue
            setattr(out, k, tuple(v) if k == "split" else v)
        return out


# -- loss pieces ----------------------------------------------------------------------


def total_loss(components: dict, w: LossWeights) -> Tensor:
    """L_CM + l_time L_TF + l_graph L_GAC + l_sup L_sup + l_RL L_RLHF; missing terms count as 0."""
    weights = {"cm": 1.0, "tf": w.time, "gac": w.graph, "sup": w.sup, "rl": w.rl}
    total = None
    for key, value in components.items():
        if key not in weights:
            raise KeyError(f"unknown loss component {key!r}")
        if value is None:
            continue
        raw = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        if not np.isfinite(raw).all():
            raise ValueError(f"loss component {key} is not finite")
        value = T.as_tensor(value)
        term = value * weights[key] if weights[key] != 1.0 else value
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def supervised_loss(proba, labels) -> Tensor:
    """Mean negative log-likelihood of the true class, floored at 1e-12."""
    proba = T.as_tensor(proba)
    squeeze = proba.ndim == 1
    if squeeze:
        proba = proba.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= proba.shape[1]:
        raise ValueError("label out of range")
    picked = proba[np.arange(labels.size), labels]
    return -(T.log(T.clip_min(picked, PROB_FLOOR))).mean()


def gap_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor | None:
    if not mask.any():
        return None
    diff = (pred - Tensor(target)) * Tensor(mask.astype(np.float64))
    return (diff * diff).sum() * (1.0 / mask.sum())


def composite_reward(auroc: float, ece: float, act: float, w: RewardWeights) -> float:
    for name, v in (("auroc", auroc), ("ece", ece), ("act", act)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    return w.auroc * auroc + w.calibration * (1.0 - ece) + w.act * act


class Baseline:
    """Exponential moving average of past rewards."""

    def __init__(self, decay: float = 0.9, value: float | None = 0.0):
        self.decay = decay
        self.value = value

    def advantage(self, reward: float) -> float:
        if self.value is None:
            self.value = reward
        return reward - self.value

    def update(self, reward: float) -> None:
        self.value = reward if self.value is None else self.decay * self.value + (1.0 - self.decay) * reward


def policy_surrogate(log_probs: Tensor, advantage: float) -> Tensor:
    """Scalar whose gradient is -(R - b) * mean grad log pi(a)."""
    return log_probs.mean() * (-float(advantage))


def policy_gradient_step(log_probs: Tensor, reward: float, baseline: Baseline, optimizer: SGD) -> float:
    """One REINFORCE update; returns the advantage used."""
    adv = baseline.advantage(reward)
    optimizer.zero_grad()
    T.backward(policy_surrogate(log_probs, adv))
    optimizer.step()
    baseline.update(reward)
    return adv


@dataclass
class BanditRun:
    p_rewarded: np.ndarray  # probability of the better arm before step 1 and after each step
    updates: np.ndarray  # norm of each applied parameter update
    raw_updates: np.ndarray  # norm the same step would have had with a zero baseline


def run_bandit(
    steps: int = 200,
    seed: int = 0,
    rewards=(1.0, 0.0),
    lr: float = 0.5,
    use_baseline: bool = True,
    baseline_start: float | None = 0.5,
    decay: float = 0.9,
) -> BanditRun:
    """Two-armed bandit with a softmax policy over two logits, trained by REINFORCE.

    Arm ``k`` pays ``rewards[k]``.  Without a baseline the advantage is the raw
    reward.  ``raw_updates`` replays every step's sampled arm at the same
    parameters with a zero baseline, for matched variance comparisons.
    """
    rng = Rng(seed)
    theta = Tensor(np.zeros(2), requires_grad=True)
    opt = SGD([theta], lr=lr, momentum=0.0)
    baseline = Baseline(decay, baseline_start if use_baseline else 0.0)
    best = int(np.argmax(rewards))
    probs = [float(T.softmax(Tensor(theta.data)).data[best])]
    updates, raw = [], []
    for _ in range(steps):
        logp = T.log_softmax(theta.reshape(1, 2), axis=1)
        p = np.exp(logp.data[0])
        arm = int(rng.choice(2, p=p))
        reward = float(rewards[arm])
        score = -p
        score[arm] += 1.0  # d log pi(arm) / d theta
        raw.append(lr * abs(reward) * float(np.linalg.norm(score)))
        before = theta.data.copy()
        if not use_baseline:
            baseline.value = 0.0
        policy_gradient_step(logp[0, arm].reshape(1), reward, baseline, opt)
        updates.append(float(np.linalg.norm(theta.data - before)))
        probs.append(float(T.softmax(Tensor(theta.data)).data[best]))
    return BanditRun(np.array(probs), np.array(updates), np.array(raw))


def fit_temperature(logits, labels, grid=TEMPERATURE_GRID) -> float:
    """Grid-search temperature minimising validation NLL."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.size == 0 or labels.size == 0:
        raise ValueError("temperature fitting needs a non-empty validation set")
    best_t, best_nll = None, np.inf
    for t in grid:
        z = logits / t
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        nll = -logp[np.arange(labels.size), labels].mean()
        if nll < best_nll - 1e-15:
            best_t, best_nll = float(t), nll
    return best_t


# -- state and checkpointing -----------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: RiskFormer
    queue: NegativeQueue
    rng: Rng
    class_names: list
    split_ids: dict
    epoch: int = 0
    baseline: float | None = None
    review_threshold: float | None = None
    optimizer: SGD | None = None

    @property
    def temperature(self) -> float:
        return self.model.head.temperature

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"momentum/{k}": v for k, v in self.model.encoders.momentum_state().items()})
        arrays["queue"] = self.queue.snapshot().reshape(-1, self.queue.dim)
        if self.optimizer is not None:
            names = [n for n, _ in self.model.named_parameters()]
            for name, v in zip(names, self.optimizer.velocity):
                arrays[f"velocity/{name}"] = v
        meta = {
            "config": self.config.to_dict(),
            "class_names": self.class_names,
            "split_ids": self.split_ids,
            "epoch": self.epoch,
            "baseline": self.baseline,
            "review_threshold": self.review_threshold,
            "temperature": self.model.head.temperature,
            "rng": _jsonable_rng(self.rng.state()),
            "graph": self.model.graph.to_dict(),
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        arrays, meta = load_arrays(path)
        cfg = TrainConfig.from_dict(meta["config"])
        graph = DiseaseGraph.from_dict(meta["graph"])
        model = RiskFormer(cfg.model, graph, Rng(cfg.seed))
        model.load_state_dict({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
        model.encoders.load_momentum_state(
            {k[len("momentum/") :]: v for k, v in arrays.items() if k.startswith("momentum/")}
        )
        model.head.temperature = float(meta["temperature"])
        queue = NegativeQueue(cfg.model.d_model, cfg.model.queue_capacity)
        queue.load_state(arrays["queue"])
        state = cls(
            config=cfg,
            model=model,
            queue=queue,
            rng=Rng.from_state(meta["rng"]),
            class_names=meta["class_names"],
            split_ids=meta["split_ids"],
            epoch=meta["epoch"],
            baseline=meta["baseline"],
            review_threshold=meta["review_threshold"],
        )
        names = [n for n, _ in model.named_parameters()]
        if all(f"velocity/{n}" in arrays for n in names):
            opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.clip_norm)
            opt.velocity = [arrays[f"velocity/{n}"].copy() for n in names]
            state.optimizer = opt
        return state


def _jsonable_rng(state: dict) -> dict:
    bg = state["bit_generator"]
    return {
        "seed": state["seed"],
        "counter": state["counter"],
        "bit_generator": {
            "bit_generator": bg["bit_generator"],
            "state": {"state": int(bg["state"]["state"]), "inc": int(bg["state"]["inc"])},
            "has_uint32": int(bg["has_uint32"]),
            "uinteger": int(bg["uinteger"]),
        },
    }


# -- evaluation ------------------------------------------------------------------------


@dataclass
class Evaluation:
    logits: np.ndarray
    proba: np.ndarray
    labels: np.ndarray
    uncertainty: np.ndarray
    patient_ids: list
    losses: dict

    def auroc(self) -> float:
        try:
            return metrics.macro_auroc(self.proba, self.labels)
        except ValueError:
            return float("nan")

    def ece(self) -> float:
        return metrics.ece(self.proba, self.labels)


def split_cohort(cohort, fractions, rng: Rng) -> dict:
    n = len(cohort)
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }
    for name, idx in parts.items():
        if not idx:
            raise ValueError(f"empty {name} split; cohort of {n} patients is too small")
    return parts


def _batches(records, size: int):
    for start in range(0, len(records), size):
        yield records[start : start + size]


def evaluate(model: RiskFormer, records, cfg: TrainConfig, queue: NegativeQueue | None, rng: Rng) -> Evaluation:
    """Deterministic forward pass plus MC-dropout uncertainty."""
    n_nodes = model.graph.n_nodes
    logits, h_cls, labels, ids = [], [], [], []
    sums = {"cm": 0.0, "tf": 0.0, "sup": 0.0}
    counts = {"cm": 0, "tf": 0, "sup": 0}
    negatives = queue.snapshot() if queue is not None and len(queue) else None
    with T.no_grad():
        gac = model.ontology.link_loss(model.ontology.node_states())
        for chunk in _batches(records, 128):
            batch = make_batch(chunk, n_nodes, cfg.model.d_img)
            out = model.forward(batch)
            logits.append(out["logits"].data)
            h_cls.append(out["h_cls"].data)
            labels.append(batch.labels)
            ids.extend(batch.patient_ids)
            p = T.softmax(out["logits"], axis=1)
            sums["sup"] += supervised_loss(p, batch.labels).item() * batch.size
            counts["sup"] += batch.size
            tf = gap_loss(out["gap_pred"], batch.next_gap, batch.next_gap_mask)
            if tf is not None:
                m = int(batch.next_gap_mask.sum())
                sums["tf"] += tf.item() * m
                counts["tf"] += m
            if negatives is not None:
                cm = _contrastive(out, negatives, cfg.alignment)
                k = out["z_img"].shape[0]
                sums["cm"] += cm.item() * k
                counts["cm"] += k
    logits = np.concatenate(logits)
    h_cls = np.concatenate(h_cls)
    losses = {k: (sums[k] / counts[k] if counts[k] else 0.0) for k in sums}
    losses["gac"] = gac.item() if gac is not None else 0.0
    proba = calibrated_proba(logits, model.head.temperature)
    s = mc_uncertainty(h_cls, model.head, rng)
    return Evaluation(logits, proba, np.concatenate(labels), np.atleast_1d(s), ids, losses)


def weighted_total(losses: dict, w: LossWeights) -> float:
    return losses["cm"] + w.time * losses["tf"] + w.graph * losses["gac"] + w.sup * losses["sup"]


def act_and_reward(ev: Evaluation, state: TrainState, threshold: float | None = None) -> tuple[float, float]:
    cfg = state.config
    table = ActionTable(state.class_names)
    if threshold is None:
        threshold = float(np.percentile(ev.uncertainty, cfg.review_percentile))
    bundles = build_bundles(ev.proba, ev.uncertainty, table, threshold)
    act = metrics.actionability(bundles, cfg.act_threshold, table)
    auc = ev.auroc()
    reward = composite_reward(auc if np.isfinite(auc) else 0.5, ev.ece(), act, cfg.reward)
    return act, reward


# -- training loop ----------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def init_state(cohort, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    root = Rng(cfg.seed)
    splits = split_cohort(cohort, cfg.split, root.child(1))
    train_dx = [{c for v in cohort[i].visits for c in v.dx} for i in splits["train"]]
    graph = build_disease_graph(train_dx, cfg.model.n_codes, cfg.model.codes_per_chapter, root.child(2))
    model = RiskFormer(cfg.model, graph, root.child(3))
    gaps = [np.log1p(v.delta_t) for i in splits["train"] for v in cohort[i].visits[1:]]
    if gaps:
        # start the gap regressor at the mean target so its early gradient does not swamp clipping
        model.gap_head.bias.data = np.full_like(model.gap_head.bias.data, float(np.mean(gaps)))
    return TrainState(
        config=cfg,
        model=model,
        queue=NegativeQueue(cfg.model.d_model, cfg.model.queue_capacity),
        rng=root.child(4),
        class_names=class_names(cfg.model.n_classes),
        split_ids={k: [cohort[i].patient_id for i in v] for k, v in splits.items()},
    )


def _contrastive(out: dict, negatives, cfg: AlignmentConfig) -> Tensor:
    """Image queries against their own note, the momentum queue and other patients' notes."""
    return infonce_loss(out["z_img"], out["z_txt"], negatives, cfg, in_batch=True, groups=out["groups"])


def _step_losses(model: RiskFormer, batch: Batch, state: TrainState, rng: Rng) -> tuple[dict, dict]:
    cfg = state.config
    out = model.forward(batch, rng=rng, train=True)
    keys = model.momentum_text(batch)
    out["keys"] = keys
    comps = {
        "sup": supervised_loss(T.softmax(out["logits"], axis=1), batch.labels),
        "tf": gap_loss(out["gap_pred"], batch.next_gap, batch.next_gap_mask),
        "gac": model.ontology.link_loss(out["nodes"]),
        "cm": _contrastive(out, state.queue, cfg.alignment) if len(state.queue) else None,
    }
    return comps, out


def _batch_reward(out: dict, batch: Batch, actions: np.ndarray, state: TrainState, rng: Rng) -> float:
    """Composite reward on one batch.

    Discrimination uses the calibrated probabilities; calibration is scored
    on the sampled risk calls (confidence p(a), hit a == y); Act uses MC
    dropout bundles against the frozen review threshold.
    """
    cfg = state.config
    head = state.model.head
    proba = calibrated_proba(out["logits"].data, head.temperature)
    try:
        auc = metrics.macro_auroc(proba, batch.labels)
    except ValueError:
        auc = 0.5
    conf = proba[np.arange(batch.size), actions]
    hits = (actions == batch.labels).astype(float)
    calib = metrics.ece(np.stack([1.0 - conf, conf], axis=1), hits.astype(int))
    s = mc_uncertainty(out["h_cls"].data, head, rng)
    bundles = build_bundles(proba, s, ActionTable(state.class_names), state.review_threshold)
    act = metrics.actionability(bundles, cfg.act_threshold, ActionTable(state.class_names))
    return composite_reward(auc, calib, act, cfg.reward)


def run_epoch(state: TrainState, train_records, optimizer: SGD, rl: bool = False, baseline: Baseline | None = None):
    cfg = state.config
    model = state.model
    n_nodes = model.graph.n_nodes
    epoch_rng = state.rng.child(10_000 + state.epoch)
    order = epoch_rng.permutation(len(train_records))
    records = [train_records[i] for i in order]
    sums = {"cm": 0.0, "tf": 0.0, "gac": 0.0, "sup": 0.0, "total": 0.0}
    n_steps = 0
    for step, chunk in enumerate(_batches(records, cfg.batch_size)):
        batch = make_batch(chunk, n_nodes, cfg.model.d_img)
        step_rng = epoch_rng.child(step + 1)
        try:
            comps, out = _step_losses(model, batch, state, step_rng)
            if rl:
                logp_all = T.log_softmax(out["logits"], axis=1, temperature=model.head.temperature)
                p = np.exp(logp_all.data)
                actions = np.array([step_rng.choice(p.shape[1], p=row / row.sum()) for row in p])
                reward = _batch_reward(out, batch, actions, state, step_rng.child(7))
                adv = baseline.advantage(reward)
                comps["rl"] = policy_surrogate(logp_all[np.arange(batch.size), actions], adv)
            loss = total_loss(comps, cfg.loss)
            optimizer.zero_grad()
            T.backward(loss)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {state.epoch} step {step}: {exc}") from exc
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"epoch {state.epoch} step {step}: loss {loss.item()}")
        optimizer.step()
        model.encoders.momentum_update()
        state.queue.enqueue(out["keys"])
        if rl:
            baseline.update(reward)
        for k in ("cm", "tf", "gac", "sup"):
            if comps[k] is not None:
                sums[k] += comps[k].item()
        sums["total"] += loss.item()
        n_steps += 1
    return {k: v / max(n_steps, 1) for k, v in sums.items()}


def _snapshot(model: RiskFormer) -> dict:
    return {
        "params": {n: p.data.copy() for n, p in model.named_parameters()},
        "momentum": model.encoders.momentum_state(),
    }


def _restore(model: RiskFormer, snap: dict) -> None:
    for n, p in model.named_parameters():
        p.data = snap["params"][n].copy()
    model.encoders.load_momentum_state(snap["momentum"])


def train(cohort, cfg: TrainConfig, metrics_path=None, state: TrainState | None = None):
    """Supervised phase, temperature fit, then the policy-gradient phase.

    Returns (state, rows) where rows are the per-epoch metric records.
    """
    state = state or init_state(cohort, cfg)
    by_id = {r.patient_id: r for r in cohort}
    train_records = [by_id[i] for i in state.split_ids["train"]]
    val_records = [by_id[i] for i in state.split_ids["val"]]
    model = state.model
    rows = []

    def log_epoch(train_losses, phase):
        ev = evaluate(model, val_records, cfg, state.queue, state.rng.child(20_000 + state.epoch))
        threshold = state.review_threshold
        act, reward = act_and_reward(ev, state, threshold)
        base = {"epoch": state.epoch}
        rows.append({**base, "split": "train", "loss_total": train_losses["total"], "loss_cm": train_losses["cm"],
                     "loss_tf": train_losses["tf"], "loss_gac": train_losses["gac"], "loss_sup": train_losses["sup"],
                     "auroc": "", "ece": "", "act": "", "reward": ""})  # fmt: skip
        rows.append({**base, "split": "val", "loss_total": weighted_total(ev.losses, cfg.loss),
                     "loss_cm": ev.losses["cm"], "loss_tf": ev.losses["tf"], "loss_gac": ev.losses["gac"],
                     "loss_sup": ev.losses["sup"], "auroc": ev.auroc(), "ece": ev.ece(), "act": act,
                     "reward": reward})  # fmt: skip
        log.info("%s epoch %d: train loss %.4f val auroc %.4f ece %.4f",
                 phase, state.epoch, train_losses["total"], ev.auroc(), ev.ece())  # fmt: skip
        return ev

    rl_weight = cfg.loss.rl
    cfg.loss.rl = 0.0  # policy term is off during the supervised phase
    try:
        optimizer = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.clip_norm)
        best_nll, best = np.inf, None
        for _ in range(cfg.epochs):
            losses = run_epoch(state, train_records, optimizer)
            state.epoch += 1
            ev = log_epoch(losses, "supervised")
            if cfg.keep_best and ev.losses["sup"] < best_nll:
                best_nll, best = ev.losses["sup"], _snapshot(model)
        if best is not None:
            _restore(model, best)
    finally:
        cfg.loss.rl = rl_weight

    def recalibrate(stream):
        # post-hoc temperature and review threshold are refit on val whenever the weights move
        ev = evaluate(model, val_records, cfg, None, state.rng.child(stream))
        model.head.temperature = fit_temperature(ev.logits, ev.labels)
        ev = evaluate(model, val_records, cfg, state.queue, state.rng.child(stream + 1))
        state.review_threshold = float(np.percentile(ev.uncertainty, cfg.review_percentile))
        act, reward = act_and_reward(ev, state, state.review_threshold)
        rows.append({"epoch": state.epoch, "split": "calibrated", "loss_total": weighted_total(ev.losses, cfg.loss),
                     "loss_cm": ev.losses["cm"], "loss_tf": ev.losses["tf"], "loss_gac": ev.losses["gac"],
                     "loss_sup": ev.losses["sup"], "auroc": ev.auroc(), "ece": ev.ece(), "act": act,
                     "reward": reward})  # fmt: skip
        log.info("calibrated epoch %d: T %.2f reward %.4f", state.epoch, model.head.temperature, reward)

    # starting point of the policy phase: the restored, temperature-scaled model
    recalibrate(30_000)
    if cfg.rl_epochs:
        baseline = Baseline(cfg.reward.baseline_decay, value=None)
        optimizer = SGD(model.parameters(), cfg.rl_lr, cfg.momentum, cfg.clip_norm)
        for _ in range(cfg.rl_epochs):
            losses = run_epoch(state, train_records, optimizer, rl=True, baseline=baseline)
            state.epoch += 1
            log_epoch(losses, "policy")
            recalibrate(30_000 + 2 * state.epoch)
        state.baseline = baseline.value
    state.optimizer = optimizer

    if metrics_path is not None:
        write_metrics_csv(rows, metrics_path)
    return state, rows


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) if r[k] != "" else "" for k in METRIC_COLUMNS})
    return buf.getvalue()


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv_text(rows))
