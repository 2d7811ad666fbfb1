import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlrisk.cohort import class_names
from vlrisk.risk_head import (
    ACTIONS,
    ActionTable,
    RiskHead,
    build_bundles,
    calibrated_proba,
    mc_uncertainty,
    population_variance_score,
    recommend,
)
from vlrisk.rng import Rng

D, C = 6, 3


@pytest.fixture
def head():
    return RiskHead(D, C, Rng(0))


def test_logits_projection_example(head):
    head.weight.data = np.zeros((D, C))
    head.weight.data[0, :] = 1.0
    head.bias.data = np.zeros(C)
    h = np.array([2.5, 9.0, -1.0, 0.0, 3.0, 4.0])
    assert np.array_equal(head.logits(h).data, np.full(C, 2.5))


def test_logits_zero_weights_equal_bias(head):
    head.weight.data = np.zeros((D, C))
    assert np.array_equal(head.logits(np.ones(D)).data, head.bias.data)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_logits_affine_identity(a, b, seed):
    head = RiskHead(D, C, Rng(1))
    rng = np.random.default_rng(seed)
    h1, h2 = rng.normal(size=D), rng.normal(size=D)
    lhs = head.logits(a * h1 + b * h2).data
    rhs = a * head.logits(h1).data + b * head.logits(h2).data - (a + b - 1) * head.bias.data
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_logits_dimension_mismatch(head):
    with pytest.raises(ValueError):
        head.logits(np.ones(D + 1))


def test_calibrated_proba_examples():
    assert np.allclose(calibrated_proba([1.0, 0.0], 1.0), [0.73106, 0.26894], atol=1e-5)
    assert np.allclose(calibrated_proba([3.0, -2.0, 0.5], 1e6), np.full(3, 1 / 3), atol=1e-5)
    with pytest.raises(ValueError):
        calibrated_proba([1.0, 0.0], 0.0)


@settings(max_examples=100)
@given(arrays(np.float64, 4, elements=st.floats(-50, 50)))
def test_argmax_invariant_over_temperatures(z):
    srt = np.sort(z)
    if srt[-1] - srt[-2] < 1e-9:
        return
    assert {int(np.argmax(calibrated_proba(z, t))) for t in (0.5, 1.0, 2.0, 10.0)} == {int(np.argmax(z))}


def test_proba_valid_on_1000_random_cases():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=10.0, size=(1000, 5))
    t = np.exp(rng.uniform(-3, 3, size=1000))
    for zi, ti in zip(z, t):
        p = calibrated_proba(zi, ti)
        assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


def test_uncertainty_zero_cases(head):
    h = np.random.default_rng(1).normal(size=(4, D))
    assert np.array_equal(mc_uncertainty(h, head, Rng(0), enabled=False), np.zeros(4))
    head.dropout = 0.0
    assert np.array_equal(mc_uncertainty(h, head, Rng(0)), np.zeros(4))
    single = RiskHead(D, C, Rng(0), mc_samples=1)
    assert np.array_equal(mc_uncertainty(h, single, Rng(0)), np.zeros(4))


def test_population_variance_hand_example():
    samples = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert population_variance_score(samples) == 0.25


def test_uncertainty_positive_and_deterministic(head):
    h = np.random.default_rng(2).normal(size=D)
    s1, s2 = mc_uncertainty(h, head, Rng(5)), mc_uncertainty(h, head, Rng(5))
    assert s1 == s2 and s1 > 0


def test_uncertainty_invariant_to_class_permutation(head):
    h = np.random.default_rng(3).normal(size=(5, D))
    perm = np.array([2, 0, 1])
    other = RiskHead(D, C, Rng(0))
    other.weight.data = head.weight.data[:, perm]
    other.bias.data = head.bias.data[perm]
    s1, s2 = mc_uncertainty(h, head, Rng(9)), mc_uncertainty(h, other, Rng(9))
    assert np.allclose(s1, s2, rtol=0, atol=1e-15)


def test_head_config_errors():
    with pytest.raises(ValueError):
        RiskHead(D, C, Rng(0), dropout=1.0)
    with pytest.raises(ValueError):
        RiskHead(D, C, Rng(0), mc_samples=0)


def test_recommendations_follow_table():
    names = class_names(4)
    table = ActionTable(names)
    assert recommend(names.index("diabetes"), None, table) == ["diet_modification", "exercise_plan"]
    assert recommend(names.index("hypertension"), None, table)[0] == "stress_management"
    table5 = ActionTable(class_names(5))
    ckd = class_names(5).index("chronic_kidney_disease")
    assert recommend(ckd, None, table5) == ["virtual_followup", "medication_reminder"]
    with pytest.raises(KeyError):
        recommend(7, None, table)


def test_every_class_has_actions_from_vocabulary():
    table = ActionTable(class_names(9))
    for c in range(9):
        acts = table.actions_for(c)
        assert acts and set(acts) <= set(ACTIONS)
    with pytest.raises(ValueError):
        ActionTable(["x"], {"x": ["fly"]})
    with pytest.raises(ValueError):
        ActionTable(["x"], {"x": []})


def test_bundles_gate_review_and_export():
    proba = calibrated_proba(np.array([[2.0, 0.0], [0.0, 1.0], [0.1, 0.0]]), 1.0)
    s = np.array([0.01, 0.3, 0.02])
    bundles = build_bundles(proba, s, ActionTable(class_names(2)), 0.1, ["a", "b", "c"])
    assert [b.review_flag for b in bundles] == [False, True, False]
    assert bundles[1].recommendations == []
    assert bundles[0].recommendations
    row = json.loads(bundles[0].to_json())
    assert set(row) == {"patient_id", "proba", "s", "actions", "review_flag"}
    assert abs(sum(row["proba"]) - 1.0) <= 1e-12 and row["s"] >= 0
