import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlrisk import tensor as T
from vlrisk.alignment import (
    AlignmentConfig,
    NegativeQueue,
    adaptive_alpha,
    contrastive_alpha,
    cosine_sim,
    infonce_loss,
    infonce_textbook,
)
from vlrisk.gradcheck import check_function
from vlrisk.tensor import Tensor

vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_cosine_examples():
    u = np.array([1.0, 2.0, -0.5])
    assert abs(cosine_sim(u, u) - 1.0) <= 1e-15
    assert cosine_sim([1.0, 0.0], [0.0, 3.0]) == 0.0
    with pytest.raises(ValueError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_scale_invariance_and_range(u, v, c):
    s = cosine_sim(u, v)
    assert -1.0 <= s <= 1.0
    assert abs(cosine_sim(c * u, v) - s) <= 1e-12


def test_adaptive_alpha_examples():
    cfg = AlignmentConfig(alpha_min=0.1, margin=0.1)
    assert adaptive_alpha(0.9, [0.1, 0.2, 0.79], cfg) == 0.1
    assert adaptive_alpha(0.5, [0.6, 0.7, 0.45], cfg) == 1.0
    assert adaptive_alpha(0.5, [0.6, 0.0, 0.45, -0.3], cfg) == 0.5
    with pytest.raises(ValueError):
        adaptive_alpha(0.5, [], cfg)


@given(st.floats(-1, 1), arrays(np.float64, 10, elements=st.floats(-1, 1)), st.integers(0, 9))
def test_adaptive_alpha_bounded_and_monotone_in_hard_count(pos, sims, k):
    cfg = AlignmentConfig()
    a = adaptive_alpha(pos, sims, cfg)
    assert cfg.alpha_min <= a <= 1.0
    harder = sims.copy()
    harder[k] = 1.0  # one more (or the same) hard negative
    assert adaptive_alpha(pos, harder, cfg) >= a


def test_config_validation():
    for bad in (AlignmentConfig(tau=0.0), AlignmentConfig(alpha_min=0.0), AlignmentConfig(margin=-0.1)):
        with pytest.raises(ValueError):
            bad.validate()


def test_infonce_alpha_zero_is_exactly_zero():
    rng = np.random.default_rng(0)
    loss = infonce_loss(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5))), _unit(rng, 7, 5),
                        AlignmentConfig(), alpha=0.0)  # fmt: skip
    assert loss.item() == 0.0


def test_infonce_equal_similarity_is_ln2():
    z = np.array([[1.0, 0.0, 0.0]])
    loss = infonce_loss(Tensor(z), Tensor(z), z.copy(), AlignmentConfig(tau=1.0), alpha=1.0)
    assert abs(loss.item() - np.log(2.0)) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_infonce_alpha_one_equals_textbook(seed):
    rng = np.random.default_rng(seed)
    img, txt, neg = rng.normal(size=(6, 8)), rng.normal(size=(6, 8)), _unit(rng, 20, 8)
    ours = infonce_loss(Tensor(img), Tensor(txt), neg, AlignmentConfig(), alpha=1.0).item()
    ref = infonce_textbook(Tensor(img), Tensor(txt), neg, AlignmentConfig().tau).item()
    assert abs(ours - ref) <= 1e-12


def test_infonce_no_overflow_at_extreme_logits():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    neg = np.array([[-1.0, 0.0], [0.0, -1.0]])
    loss = infonce_loss(Tensor(z), Tensor(z), neg, AlignmentConfig(tau=1.0 / 700.0), alpha=1.0)
    assert np.isfinite(loss.item()) and loss.item() >= 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_infonce_nonnegative_and_decreasing_in_positive_similarity(seed, tau):
    rng = np.random.default_rng(seed)
    img = _unit(rng, 1, 4)
    neg = _unit(rng, 5, 4)
    other = _unit(rng, 1, 4)
    cfg = AlignmentConfig(tau=tau)
    losses = []
    for w in (0.0, 0.3, 0.6, 0.9, 1.0):
        txt = (1 - w) * other + w * img  # similarity to the image rises with w
        losses.append(infonce_loss(Tensor(img), Tensor(txt), neg, cfg, alpha=0.5).item())
    sims = [cosine_sim(img[0], ((1 - w) * other + w * img)[0]) for w in (0.0, 0.3, 0.6, 0.9, 1.0)]
    assert all(loss >= 0 for loss in losses)
    order = np.argsort(sims)
    ranked = np.array(losses)[order]
    assert np.all(np.diff(ranked) <= 1e-12)


def test_infonce_errors():
    z = Tensor(np.ones((1, 3)))
    with pytest.raises(ValueError):
        infonce_loss(z, z, np.zeros((0, 3)), AlignmentConfig())
    with pytest.raises(ValueError):
        infonce_loss(z, z, NegativeQueue(3), AlignmentConfig())
    with pytest.raises(ValueError):
        infonce_loss(z, z, np.ones((1, 3)), AlignmentConfig(tau=0.0))


def test_infonce_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    neg = _unit(rng, 6, 4)
    cfg = AlignmentConfig()
    alpha = contrastive_alpha(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), neg, cfg)
    img, txt = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    res = check_function("infonce", lambda a, b: infonce_loss(a, b, neg, cfg, alpha=alpha), [img, txt])
    assert res.passed, res


def test_in_batch_negatives_respect_groups():
    rng = np.random.default_rng(4)
    img, txt, neg = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), _unit(rng, 3, 5)
    cfg = AlignmentConfig()
    # every row in one group: no in-batch negatives survive, so the loss equals the queue-only loss
    same = infonce_loss(Tensor(img), Tensor(txt), neg, cfg, alpha=1.0, in_batch=True, groups=[0, 0, 0, 0]).item()
    queue_only = infonce_loss(Tensor(img), Tensor(txt), neg, cfg, alpha=1.0).item()
    assert abs(same - queue_only) <= 1e-12
    apart = infonce_loss(Tensor(img), Tensor(txt), neg, cfg, alpha=1.0, in_batch=True, groups=[0, 1, 2, 3]).item()
    assert apart > queue_only


def test_queue_never_receives_gradients():
    rng = np.random.default_rng(5)
    q = NegativeQueue(4, 8)
    q.enqueue(rng.normal(size=(5, 4)))
    before = q.snapshot()
    img = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    txt = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    T.backward(infonce_loss(img, txt, q, AlignmentConfig()))
    assert np.array_equal(q.snapshot(), before)
    assert img.grad is not None and np.any(img.grad != 0)


def test_queue_fill_and_ring_semantics():
    rng = np.random.default_rng(6)
    q = NegativeQueue(3, capacity=5)
    q.enqueue(rng.normal(size=(4, 3)))
    assert len(q) == 4
    items = rng.normal(size=(6, 3))
    q2 = NegativeQueue(3, capacity=5)
    q2.enqueue(items)
    snap = q2.snapshot()
    assert len(q2) == 5
    expected = items[1:] / np.linalg.norm(items[1:], axis=1, keepdims=True)
    assert np.allclose(snap, expected, rtol=0, atol=1e-15)
    assert np.max(np.abs(np.linalg.norm(snap, axis=1) - 1.0)) <= 1e-10


@given(st.integers(1, 40), st.integers(1, 9))
def test_queue_never_exceeds_capacity(n, cap):
    q = NegativeQueue(2, capacity=cap)
    for k in range(n):
        q.enqueue([[1.0 + k, 2.0]])
    assert len(q) == min(n, cap)
    assert np.allclose(np.linalg.norm(q.snapshot(), axis=1), 1.0, atol=1e-10)


def test_queue_rejects_zero_vector_and_round_trips_state():
    q = NegativeQueue(2, capacity=3)
    with pytest.raises(ValueError):
        q.enqueue([[0.0, 0.0]])
    q.enqueue([[1.0, 0.0], [0.0, 2.0], [3.0, 4.0], [1.0, 1.0]])
    clone = NegativeQueue(2, capacity=3)
    clone.load_state(q.snapshot())
    assert np.array_equal(clone.snapshot(), q.snapshot())
