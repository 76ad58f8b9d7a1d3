import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avflow import ndgrad as nd
from avflow.ndgrad import checkpoint as ck

from _cases import GRAD_CASES, run_case


def test_matmul_identity():
    a = nd.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ nd.tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_softmax_symmetric():
    np.testing.assert_allclose(nd.softmax(nd.tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_l1_of_identical_is_zero():
    x = nd.tensor(np.random.default_rng(0).standard_normal((4, 3)))
    assert nd.l1_loss(x, x).item() == 0.0


def test_suffix_broadcast_only():
    a = nd.tensor(np.ones((2, 3, 4)))
    assert (a + nd.tensor(np.ones(4))).shape == (2, 3, 4)
    with pytest.raises(nd.ShapeMismatch):
        a + nd.tensor(np.ones((2, 1, 4)))
    with pytest.raises(nd.ShapeMismatch):
        a @ nd.tensor(np.ones((3, 4)))


def test_non_finite_raises():
    with pytest.raises(nd.NonFinite):
        nd.log(nd.tensor([-1.0]))
    with pytest.raises(nd.NonFinite):
        nd.exp(nd.tensor([1000.0]))


def test_sum_grad_is_ones():
    w = nd.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    g = nd.backward(nd.sum(w))
    np.testing.assert_array_equal(g[w], np.ones((2, 3)))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_l2_grad_hand_derived():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 1))
    with nd.precision(np.float64):
        w = nd.tensor(np.zeros((3, 1)), requires_grad=True)
        g = nd.backward(nd.l2_loss(nd.constant(x) @ w, nd.constant(y)))[w]
    np.testing.assert_allclose(g, -2 * x.T @ y / y.size, rtol=1e-12)


def test_not_scalar():
    w = nd.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nd.NotScalar):
        nd.backward(w * 2.0)


def test_non_parameters_get_no_gradient():
    w = nd.tensor(np.ones(3), requires_grad=True)
    c = nd.constant(np.ones(3))
    g = nd.backward(nd.sum(w * c))
    assert c not in g and c.grad is None


def test_disconnected_parameter_zero_and_flagged():
    w = nd.tensor(np.ones(3), requires_grad=True)
    u = nd.tensor(np.ones(2), requires_grad=True)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        g = nd.backward(nd.sum(w), params=[w, u], debug=True)
    np.testing.assert_array_equal(g[u], 0)
    assert any(issubclass(r.category, nd.DisconnectedParameter) for r in rec)


@pytest.mark.parametrize("name,fn,shapes,sampler", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradients_match_finite_differences(name, fn, shapes, sampler):
    for seed in range(10):
        ok, err = run_case(fn, shapes, sampler, seed)
        assert ok, f"{name} seed {seed}: relative error {err:.2e}"


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))

    def grads():
        wa, wb = nd.tensor(a, requires_grad=True), nd.tensor(b, requires_grad=True)
        g = nd.backward(nd.sum(nd.gelu(wa @ wb)) + nd.mean(nd.softmax(wa)))
        return g[wa].tobytes() + g[wb].tobytes()

    assert grads() == grads()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_concat_then_slice_is_identity(ca, cb, rows, seed):
    rng = np.random.default_rng(seed)
    a = nd.tensor(rng.standard_normal((rows, ca)))
    b = nd.tensor(rng.standard_normal((rows, cb)))
    c = nd.concat([a, b], axis=-1)
    assert nd.slice(c, 0, ca).data.tobytes() == a.data.tobytes()
    assert nd.slice(c, ca, ca + cb).data.tobytes() == b.data.tobytes()


# ---------------------------------------------------------------- optimizer

def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0], np.float32)}
    st_ = nd.AdamState.zeros_like(p)
    new, st2 = nd.adamw_step(p, {"w": np.zeros(2, np.float32)}, st_, lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st2.step == 1


def test_adamw_descends_on_square():
    p = {"w": np.array([1.0])}
    new, _ = nd.adamw_step(p, {"w": 2 * p["w"]}, nd.AdamState.zeros_like(p), lr=0.1)
    assert new["w"][0] < 1.0


def test_adamw_converges_on_quadratic():
    # f(w) = (w - c)^T A (w - c) with minimum at c
    a = np.diag([1.0, 4.0])
    c = np.array([0.5, -1.5])
    p = {"w": np.zeros(2)}
    state = nd.AdamState.zeros_like(p)
    for _ in range(200):
        g = {"w": 2 * a @ (p["w"] - c)}
        p, state = nd.adamw_step(p, g, state, lr=0.05)
    assert np.linalg.norm(p["w"] - c) < 1e-2


def test_adamw_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    new, _ = nd.adamw_step(p, {"w": np.zeros(1)}, nd.AdamState.zeros_like(p), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(new["w"], 2.0 * (1 - 0.1 * 0.5))


def test_adamw_state_mismatch():
    p = {"w": np.zeros(2)}
    with pytest.raises(nd.StateMismatch):
        nd.adamw_step(p, {}, nd.AdamState.zeros_like({"v": np.zeros(2)}))
    with pytest.raises(nd.StateMismatch):
        nd.adamw_step(p, {}, nd.AdamState.zeros_like({"w": np.zeros(3)}))


# ---------------------------------------------------------------- checkpoint container

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"audio.block0.attn.wq": rng.standard_normal((4, 4)).astype(np.float32),
              "scalar": np.array(3.5, np.float32), "fusion.block0.b": np.zeros(4, np.float32)}
    path = tmp_path / "m.avfl"
    nd.save_checkpoint(path, arrays)
    back = nd.load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_layout():
    blob = ck.encode_tensors({"ab": np.array([[1.0, 2.0]], np.float32)})
    assert blob[:4] == b"AVFL"
    expected = (b"AVFL" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(2, "little")
                + b"ab" + bytes([2]) + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], "<f4").tobytes())
    assert blob == expected


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.avfl"
    nd.save_checkpoint(path, {"w": np.ones((3, 3), np.float32)})
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(nd.CheckpointError):
        nd.load_checkpoint(path)
