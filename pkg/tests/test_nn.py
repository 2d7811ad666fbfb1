import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlrisk import tensor as T
from vlrisk.nn import MLP, SGD, Linear, load_arrays, save_arrays, uniform_param
from vlrisk.rng import Rng, splitmix64
from vlrisk.tensor import Tensor


def test_rng_same_seed_same_stream():
    a, b = Rng(5), Rng(5)
    assert np.array_equal(a.normal(size=10), b.normal(size=10))
    assert np.array_equal(a.integers(0, 100, size=10), b.integers(0, 100, size=10))


def test_rng_children_are_keyed_and_do_not_consume_parent():
    parent = Rng(5)
    c1 = parent.child(1).random(5)
    assert np.array_equal(parent.random(3), Rng(5).random(3))
    assert np.array_equal(c1, Rng(5).child(1).random(5))
    assert not np.array_equal(c1, Rng(5).child(2).random(5))
    assert not np.array_equal(c1, Rng(6).child(1).random(5))


def test_rng_state_round_trip():
    r = Rng(9)
    r.random(7)
    r.spawn()
    clone = Rng.from_state(r.state())
    assert np.array_equal(r.random(4), clone.random(4))
    assert r.spawn().seed == clone.spawn().seed


def test_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        Rng(-1)


@given(st.integers(0, 2**64 - 1))
def test_splitmix64_stays_in_64_bits(x):
    assert 0 <= splitmix64(x) < 2**64


@given(st.integers(1, 64), st.integers(0, 1000))
def test_uniform_param_bounds(fan_in, seed):
    p = uniform_param((8, 3), fan_in, Rng(seed))
    assert p.requires_grad
    assert np.all(np.abs(p.data) <= 1.0 / np.sqrt(fan_in))


def test_module_state_dict_round_trip_and_errors():
    a, b = MLP(3, 4, 2, Rng(0)), MLP(3, 4, 2, Rng(1))
    b.load_state_dict(a.state_dict())
    x = Tensor(np.ones((2, 3)))
    assert np.array_equal(a(x).data, b(x).data)
    state = a.state_dict()
    state.pop("fc1.weight")
    with pytest.raises(KeyError):
        b.load_state_dict(state)
    bad = a.state_dict()
    bad["fc1.weight"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        b.load_state_dict(bad)


def test_named_parameters_cover_nested_layers():
    names = [n for n, _ in MLP(3, 4, 2, Rng(0)).named_parameters()]
    assert names == ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    assert [n for n, _ in Linear(2, 2, Rng(0), bias=False).named_parameters()] == ["weight"]


def test_sgd_plain_step_and_momentum():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([1.0, 1.0])
    opt.step()
    assert np.allclose(p.data, [0.9, -2.1], atol=1e-15)
    opt.step()  # velocity 0.5 * 1 + 1 = 1.5
    assert np.allclose(p.data, [0.75, -2.25], atol=1e-15)


def test_sgd_clips_global_norm():
    p = Tensor([0.0, 0.0], requires_grad=True)
    opt = SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0)
    p.grad = np.array([3.0, 4.0])
    opt.step()
    assert np.allclose(p.data, [-0.6, -0.8], atol=1e-15)


def test_sgd_descends_a_quadratic():
    p = Tensor([3.0, -1.0], requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9)
    for _ in range(200):
        opt.zero_grad()
        T.backward((p * p).sum())
        opt.step()
    assert np.max(np.abs(p.data)) < 1e-3


def test_array_file_round_trip(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "s": np.array(2.5), "e": np.zeros((0, 4))}
    save_arrays(tmp_path / "ck", arrays, {"note": "x"})
    loaded, meta = load_arrays(tmp_path / "ck")
    assert meta == {"note": "x"}
    for k, v in arrays.items():
        assert loaded[k].shape == v.shape
        assert np.array_equal(loaded[k], v)


def test_array_file_truncation_detected(tmp_path):
    save_arrays(tmp_path / "ck", {"w": np.ones(10)})
    raw = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(raw[:40])
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "ck")
