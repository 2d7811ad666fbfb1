"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in a summary section at the end of the pytest run.
"""

import copy
import csv
import json
import time

import numpy as np
import pytest

from vlrisk import metrics
from vlrisk import tensor as T
from vlrisk.alignment import AlignmentConfig, infonce_loss, infonce_textbook
from vlrisk.cli import dispatch
from vlrisk.cohort import CohortConfig, generate_cohort, load_cohort
from vlrisk.experiments import HISTORY_LENGTHS, trend_holds
from vlrisk.gradcheck import run_all
from vlrisk.model import make_batch
from vlrisk.nn import SGD
from vlrisk.ontology import (
    RELATIONS,
    DiseaseGraph,
    GatLayer,
    attention_coeffs,
    gat_forward,
    gated_inject,
)
from vlrisk.rng import Rng
from vlrisk.tensor import Tensor
from vlrisk.training import Baseline, TrainConfig, init_state, policy_gradient_step, run_bandit, train

RL_SEEDS = range(10)


def _bayes_auroc(records) -> float:
    risk = np.array([r.latent["risk"] for r in records])
    p = np.exp(risk - risk.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return metrics.macro_auroc(p, [r.label for r in records])


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# -- 1 -----------------------------------------------------------------------------------


def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    results = run_all(seed=42)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    model = [r for r in results if r.name == "full_model"][0]
    ok = not failed and elapsed < 120 and model.n_checked == 20
    acceptance(1, ok, f"{len(results) - len(failed)}/{len(results)} checks, worst rel err {worst:.1e} "
                      f"(bar 1e-4), full model {model.n_checked} params, {elapsed:.1f}s (bar 120s)")  # fmt: skip
    assert ok, failed


# -- 2 -----------------------------------------------------------------------------------


def test_criterion_2_causality(acceptance):
    cohort = generate_cohort(CohortConfig(n_patients=100, min_visits=2, max_visits=12, seed=5))
    state = init_state(cohort, TrainConfig(seed=5))
    model = state.model
    n_nodes, d_img = model.graph.n_nodes, state.config.model.d_img
    rng = np.random.default_rng(5)
    checked, broken = 0, 0
    for rec in cohort:  # 100 random sequences
        base = model.forward(make_batch([rec], n_nodes, d_img))["h"].data[0]
        for k in range(1, len(rec.visits)):
            alt = copy.deepcopy(rec)
            v = alt.visits[k]
            v.img = v.img + rng.normal(size=v.img.shape)
            v.tokens = [int(t) for t in rng.integers(0, 200, size=len(v.tokens))]
            v.delta_t = float(rng.uniform(1, 500))
            v.dx = sorted(set(int(c) for c in rng.integers(0, n_nodes, size=3)))
            h = model.forward(make_batch([alt], n_nodes, d_img))["h"].data[0]
            checked += 1
            broken += int(not np.array_equal(h[:k], base[:k]))
    ok = broken == 0
    acceptance(2, ok, f"{checked} future-visit perturbations over 100 sequences, {broken} changed an earlier h_t")
    assert ok


# -- 3 -----------------------------------------------------------------------------------


def test_criterion_3_contrastive_identities(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        img, txt, neg = rng.normal(size=(6, 8)), rng.normal(size=(6, 8)), _unit(rng, 20, 8)
        ours = infonce_loss(Tensor(img), Tensor(txt), neg, AlignmentConfig(), alpha=1.0).item()
        worst = max(worst, abs(ours - infonce_textbook(Tensor(img), Tensor(txt), neg, AlignmentConfig().tau).item()))
    zero = infonce_loss(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5))), _unit(rng, 7, 5),
                        AlignmentConfig(), alpha=0.0).item()  # fmt: skip
    z = np.array([[1.0, 0.0, 0.0]])
    ln2 = abs(infonce_loss(Tensor(z), Tensor(z), z.copy(), AlignmentConfig(tau=1.0), alpha=1.0).item() - np.log(2))
    ok = worst <= 1e-12 and zero == 0.0 and ln2 <= 1e-12
    acceptance(3, ok, f"alpha=1 vs textbook max diff {worst:.1e}; alpha=0 loss {zero}; B=1 |loss - ln2| {ln2:.1e}")
    assert ok


# -- 4 -----------------------------------------------------------------------------------


def _random_graph(n, rng):
    relations = [r for r in RELATIONS if r != "self"]
    edges = [(v, v, "self") for v in range(n)]
    for a, b in rng.integers(0, n, size=(2 * n, 2)):
        if a != b:
            edges.append((int(a), int(b), relations[int(rng.integers(len(relations)))]))
    return DiseaseGraph(n_nodes=n, n_codes=n, edges=edges)


def test_criterion_4_graph_attention(acceptance):
    rng = np.random.default_rng(4)
    worst_sum = 0.0
    for trial in range(100):
        n = int(rng.integers(2, 16))
        g = _random_graph(n, rng)
        a = attention_coeffs(Tensor(rng.normal(size=(n, 6))), GatLayer(6, Rng(trial)),
                             Tensor(rng.normal(size=len(RELATIONS))), g).data  # fmt: skip
        worst_sum = max(worst_sum, float(np.max(np.abs(a.sum(axis=1) - 1.0))))

    comp = [(v, v, "self") for v in range(6)] + [(0, 1, "co-occurs"), (1, 2, "co-occurs"), (3, 4, "is-a"), (4, 5, "is-a")]
    g = DiseaseGraph(n_nodes=6, n_codes=6, edges=comp)
    layers = [GatLayer(5, Rng(1)), GatLayer(5, Rng(2))]
    bias = Tensor(rng.normal(size=len(RELATIONS)))
    emb = rng.normal(size=(6, 5))
    moved = emb.copy()
    moved[3:] += rng.normal(size=(3, 5))
    isolated = np.array_equal(gat_forward(Tensor(emb), layers, bias, g).data[:3],
                              gat_forward(Tensor(moved), layers, bias, g).data[:3])  # fmt: skip

    h, gs = Tensor(rng.normal(size=(4, 3, 8))), Tensor(rng.normal(size=(4, 8)))
    closed = gated_inject(h, gs, Tensor(rng.normal(size=(16, 8)) * 0.01), Tensor(np.full(8, -30.0))).data
    gate_err = float(np.max(np.abs(closed - h.data)))
    ok = worst_sum <= 1e-12 and isolated and gate_err <= 1e-8
    acceptance(4, ok, f"attention row sums max err {worst_sum:.1e}; components isolated {isolated}; "
                      f"closed gate max |change| {gate_err:.1e}")  # fmt: skip
    assert ok


# -- 5 -----------------------------------------------------------------------------------


def _hand_ece(proba, labels, n_bins=10):
    conf = proba.max(axis=1)
    hits = proba.argmax(axis=1) == labels
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        sel = np.array([(lo < c <= hi) or (b == 0 and c == 0.0) for c in conf])
        if sel.any():
            total += sel.sum() / conf.size * abs(hits[sel].mean() - conf[sel].mean())
    return total


def test_criterion_5_metric_oracles(acceptance):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, int(rng.integers(2, 10)), size=n) / 3.0  # ties on purpose
        mismatches += int(metrics.auroc(scores, labels) != metrics.auroc_pairs(scores, labels))
    worst_ece = 0.0
    for _ in range(200):
        n, c = int(rng.integers(1, 100)), int(rng.integers(2, 5))
        proba = rng.dirichlet(np.ones(c) * 0.5, size=n)
        labels = rng.integers(0, c, size=n)
        worst_ece = max(worst_ece, abs(metrics.ece(proba, labels) - _hand_ece(proba, labels)))
    example = metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = mismatches == 0 and worst_ece <= 1e-12 and example == 0.75
    acceptance(5, ok, f"AUROC rank vs pairs mismatches {mismatches}/500; ECE vs hand binning max diff "
                      f"{worst_ece:.1e}; worked example {example}")  # fmt: skip
    assert ok


# -- 6, 7 -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """generate -> train -> eval through the CLI with every default (seed 42, 2000 patients, 20 epochs)."""
    root = tmp_path_factory.mktemp("default")
    start = time.perf_counter()
    assert dispatch(["generate", "--out", str(root / "cohort.jsonl")]) == 0
    assert dispatch(["train", "--cohort", str(root / "cohort.jsonl"), "--out", str(root / "model")]) == 0
    assert dispatch(["eval", "--checkpoint", str(root / "model"), "--cohort", str(root / "cohort.jsonl"),
                     "--split", "test", "--out", str(root / "eval")]) == 0  # fmt: skip
    elapsed = time.perf_counter() - start
    row = next(csv.DictReader(open(root / "eval" / "metrics.csv")))
    cohort = load_cohort(root / "cohort.jsonl")
    preds = [line for line in (root / "eval" / "predictions.jsonl").read_text().splitlines()]
    by_id = {r.patient_id: r for r in cohort}
    test = [by_id[json.loads(p)["patient_id"]] for p in preds]
    return {"row": row, "elapsed": elapsed, "bayes": _bayes_auroc(test), "n": len(cohort), "n_test": len(test)}


def test_criterion_6_learnability(acceptance, default_run):
    auroc, bayes = float(default_run["row"]["auroc"]), default_run["bayes"]
    bar = max(0.80, bayes - 0.07)
    ok = default_run["n"] == 2000 and auroc >= bar and default_run["elapsed"] < 600
    acceptance(6, ok, f"test AUROC {auroc:.4f} vs bar {bar:.4f} (Bayes oracle {bayes:.4f}, "
                      f"{default_run['n_test']} test patients); {default_run['elapsed']:.0f}s (bar 600s)")  # fmt: skip
    assert ok


def test_criterion_7_calibration(acceptance, default_run):
    e = float(default_run["row"]["ece"])
    ok = e <= 0.05
    acceptance(7, ok, f"test ECE after temperature fit {e:.4f} (bar 0.05)")
    assert ok


# -- 8 -----------------------------------------------------------------------------------


def test_criterion_8_history_trend(acceptance, tmp_path):
    """`vlrisk report` with its defaults: gap-sensitive cohort, seeds 42-44."""
    out = tmp_path / "sweep.csv"
    assert dispatch(["report", "--out", str(out)]) == 0
    means = [r for r in csv.DictReader(open(out)) if r["seed"] == "mean"]
    lengths = [int(r["max_visits"]) for r in means]
    aurocs = [float(r["auroc"]) for r in means]
    eces = [float(r["ece"]) for r in means]
    up, down = trend_holds(aurocs, "up", 0.02), trend_holds(eces, "down", 0.02)
    ok = lengths == list(HISTORY_LENGTHS) and up and down
    fmt = lambda xs: "/".join(f"{x:.3f}" for x in xs)  # noqa: E731
    acceptance(8, ok, f"max_visits {lengths}: AUROC {fmt(aurocs)} non-decreasing {up}; "
                      f"ECE {fmt(eces)} non-increasing {down} (band 0.02, 3 seeds)")  # fmt: skip
    assert ok


# -- 9 -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def rl_runs():
    """Default 2000-patient cohort and training per seed, 6 supervised then 2 policy epochs."""
    runs = {}
    for seed in RL_SEEDS:
        cohort = generate_cohort(CohortConfig(seed=seed))
        _, rows = train(cohort, TrainConfig(epochs=6, rl_epochs=2, seed=seed))
        runs[seed] = [r for r in rows if r["split"] == "calibrated"]  # start of the phase, then each policy epoch
    return runs


def test_criterion_9_policy_gradient(acceptance, rl_runs):
    bandit = run_bandit(steps=200, seed=0)
    p_final = float(bandit.p_rewarded[-1])

    theta = Tensor(np.array([[0.3, -0.2, 0.9]]), requires_grad=True)
    before = theta.data.copy()
    policy_gradient_step(T.log_softmax(theta, axis=1)[0, 0].reshape(1), 0.6, Baseline(0.9, 0.6),
                         SGD([theta], lr=0.1))  # fmt: skip
    zero_update = np.array_equal(theta.data, before)

    monotone = [s for s, rows in rl_runs.items() if all(b["reward"] >= a["reward"] for a, b in zip(rows, rows[1:]))]
    end_ge_start = [s for s, rows in rl_runs.items() if rows[-1]["reward"] >= rows[0]["reward"]]
    ok = p_final > 0.9 and zero_update and len(monotone) >= 8
    acceptance("9", ok, f"bandit p(rewarded) after 200 steps {p_final:.4f} (bar 0.9); zero-advantage update exact "
                        f"{zero_update}; reward non-decreasing over every policy epoch in {len(monotone)}/10 seeds "
                        f"(bar 8; end >= start in {len(end_ge_start)}/10)")  # fmt: skip
    for s, rows in rl_runs.items():
        print(f"  seed {s}: reward " + " -> ".join(f"{r['reward']:.4f}" for r in rows))
    assert p_final > 0.9
    assert zero_update
    assert len(monotone) >= 8


def test_policy_phase_keeps_auroc_and_actionability(acceptance, rl_runs):
    held = []
    for s, rows in rl_runs.items():
        auroc_ok = rows[-1]["auroc"] >= rows[0]["auroc"] - 0.02
        act_ok = all(b["act"] >= a["act"] for a, b in zip(rows, rows[1:]))
        if auroc_ok and act_ok:
            held.append(s)
    ok = len(held) >= 8
    acceptance("9-inv", ok, f"policy phase keeps AUROC within 0.02 with non-decreasing Act in {len(held)}/10 seeds")
    assert ok


# -- 10 -----------------------------------------------------------------------------------


def _pipeline(root):
    small = ["--n-patients", "300", "--max-visits", "8"]
    cohort = str(root / "cohort.jsonl")
    assert dispatch(["generate", *small, "--out", cohort]) == 0
    assert dispatch(["train", *small, "--epochs", "3", "--rl-epochs", "1", "--cohort", cohort,
                     "--out", str(root / "model")]) == 0  # fmt: skip
    assert dispatch(["eval", "--checkpoint", str(root / "model"), "--cohort", cohort, "--out", str(root / "eval")]) == 0


def test_criterion_10_determinism(acceptance, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    files = ["cohort.jsonl", "model/metrics.csv", "eval/metrics.csv", "eval/predictions.jsonl"]
    same = {f: (a / f).read_bytes() == (b / f).read_bytes() for f in files}
    ok = all(same.values())
    acceptance(10, ok, "byte-identical across two generate->train->eval runs: "
                       + ", ".join(f"{f} {v}" for f, v in same.items()))  # fmt: skip
    assert ok
