import numpy as np
import pytest
from hypothesis import given, strategies as st

from cgnas import autodiff as ad
from cgnas.autodiff import ParamStore, Tensor

from conftest import central_difference, rel_err

RNG = np.random.default_rng(1234)


def _away_from_zero(shape, rng):
    """Random values with |x| >= 0.1 so ReLU kinks never sit inside the probe."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)


# name -> (builder(*tensors) -> Tensor, input shapes, positive inputs?)
PRIMITIVES = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)], False),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)], False),
    "scale": (lambda a: ad.scale(a, -2.5), [(2, 5)], False),
    "power": (lambda a: ad.power(a, 1.5), [(3, 3)], True),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], False),
    "matmul_batched": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 5)], False),
    "matmul_flat": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)], False),
    "transpose": (lambda a: ad.transpose(a), [(2, 3, 4)], False),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [(2, 6)], False),
    "relu": (lambda a: ad.relu(a), [(4, 5)], False),
    "sigmoid": (lambda a: ad.sigmoid(a), [(4, 5)], False),
    "tanh": (lambda a: ad.tanh(a), [(4, 5)], False),
    "exp": (lambda a: ad.exp(a), [(3, 3)], False),
    "log": (lambda a: ad.log(a), [(3, 3)], True),
    "square": (lambda a: ad.square(a), [(3, 3)], False),
    "sum_axis": (lambda a: ad.sum(a, axis=1), [(3, 4)], False),
    "mean": (lambda a: ad.mean(a, axis=0, keepdims=True), [(3, 4)], False),
    "mean_rows": (lambda a: ad.mean_rows(a), [(5, 3)], False),
    "softmax": (lambda a: ad.softmax(a), [(3, 5)], False),
    "softmax_masked": (lambda a: ad.softmax(a, mask=np.array([[1, 1, 0, 1, 0]], bool)), [(3, 5)], False),
    "log_softmax": (lambda a: ad.log_softmax(a, mask=~np.eye(4, dtype=bool)), [(4, 4)], False),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [(3, 2), (3, 4)], False),
    "concat_rows": (lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (1, 3)], False),
    "l2_normalize": (lambda a: ad.l2_normalize(a), [(4, 6)], False),
    "gather_rows": (lambda a: ad.gather_rows(a, [2, 0, 2, 1]), [(3, 4)], False),
    "scatter_mean_rows": (lambda a: ad.scatter_mean_rows(a, [0, 1, 0, 2, 2, 2], 3), [(6, 4)], False),
}


def primitive_gradcheck(name: str, seed: int = 0) -> float:
    fn, shapes, positive = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    arrays = [np.abs(_away_from_zero(s, rng)) + 0.5 if positive else _away_from_zero(s, rng)
              for s in shapes]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out_shape = fn(*leaves).shape
    weights = rng.normal(size=out_shape)

    def loss():
        return ad.sum(ad.mul(fn(*leaves), weights))

    ad.backward(loss())
    worst = 0.0
    for leaf in leaves:
        numeric = central_difference(lambda: loss().item(), leaf.data)
        worst = max(worst, rel_err(leaf.grad, numeric))
    return worst


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    assert primitive_gradcheck(name) < 1e-4


# -------------------------------------------------------------- forward values

def test_relu_values():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_softmax_constant_row():
    assert np.allclose(ad.softmax(Tensor(np.full((1, 4), 3.7))).data, 0.25, atol=1e-15, rtol=0)


def test_scatter_mean_rows_definition():
    r = RNG.normal(size=(3, 5))
    out = ad.scatter_mean_rows(Tensor(r), [0, 0, 1], 2).data
    assert np.allclose(out[0], (r[0] + r[1]) / 2, atol=1e-15)
    assert np.allclose(out[1], r[2], atol=1e-15)


def test_masked_softmax_zeroes_masked_entries():
    y = ad.softmax(Tensor(RNG.normal(size=(2, 4))), mask=np.array([[1, 0, 1, 1]], bool)).data
    assert np.all(y[:, 1] == 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-15)


def test_log_softmax_matches_definition():
    x = RNG.normal(size=(3, 4))
    y = ad.log_softmax(Tensor(x)).data
    assert np.allclose(y, x - np.log(np.exp(x).sum(axis=1, keepdims=True)), atol=1e-14)


@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.integers(1, 8))
def test_l2_normalize_unit_rows(seed, rows, cols):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 100
    y = ad.l2_normalize(Tensor(x)).data
    assert np.all(np.abs(np.linalg.norm(y, axis=1) - 1) < 1e-12)


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.array_equal(y, [0.0, 0.5, 1.0])


@pytest.mark.parametrize("call,prim", [
    (lambda: ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))), "matmul"),
    (lambda: ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,)))), "add"),
    (lambda: ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1), "concat"),
    (lambda: ad.gather_rows(Tensor(np.ones((2, 3))), [5]), "gather_rows"),
    (lambda: ad.scatter_mean_rows(Tensor(np.ones((2, 3))), [0], 1), "scatter_mean_rows"),
    (lambda: ad.reshape(Tensor(np.ones(6)), (4, 2)), "reshape"),
])
def test_shape_errors_name_primitive(call, prim):
    with pytest.raises(ValueError, match=f"{prim}: dimension error"):
        call()


# ---------------------------------------------------------------- backward

def test_linear_gradient_is_broadcast_input():
    w = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    x = RNG.normal(size=(4,))
    ad.backward(ad.sum(ad.mul(w, x)))
    assert np.array_equal(w.grad, np.broadcast_to(x, (3, 4)))


def test_dead_unit_zero_gradient():
    w = Tensor([0.7, -1.3], requires_grad=True)
    neg_abs = ad.scale(ad.mul(w, np.sign(w.data)), -1.0)
    ad.backward(ad.scale(ad.sum(ad.relu(neg_abs)), 4.0))
    assert np.array_equal(w.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.relu(Tensor(np.ones(3), requires_grad=True)))


def test_unreachable_parameter_has_zero_gradient():
    store = ParamStore()
    a, b = store.add("a", np.ones(2)), store.add("b", np.ones(2))
    store.zero_grad()
    ad.backward(ad.sum(ad.square(a)))
    assert np.array_equal(a.grad, [2.0, 2.0])
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    ad.backward(ad.sum(ad.add(ad.mul(x, x), x)))
    assert np.allclose(x.grad, 2 * x.data + 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_compositions(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    idx = rng.integers(0, 5, size=7)

    def loss():
        h = ad.tanh(x @ w)
        g = ad.gather_rows(h, idx)
        p = ad.scatter_mean_rows(g, idx % 2, 2)
        z = ad.l2_normalize(ad.concat([p, ad.sigmoid(p)], axis=-1))
        return ad.sum(ad.log_softmax(z @ ad.transpose(z), mask=~np.eye(2, dtype=bool)))

    ad.backward(loss())
    for leaf in (x, w):
        assert rel_err(leaf.grad, central_difference(lambda: loss().item(), leaf.data)) < 1e-4


# -------------------------------------------------------------------- Adam

def test_adam_zero_gradient_keeps_parameters():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    store.zero_grad()
    store.adam_step(0.1)
    assert np.array_equal(store["w"].data, [1.0, -2.0])


def test_adam_first_step():
    store = ParamStore()
    store.add("w", np.array([3.0]))
    store.zero_grad()
    store["w"].grad = np.array([1.0])
    store.adam_step(0.1)
    # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
    expected = 3.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert store["w"].data[0] == pytest.approx(expected, abs=1e-15)
    assert 3.0 - store["w"].data[0] == pytest.approx(0.1, rel=1e-7)


def test_adam_skips_frozen_parameters():
    store = ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    store.set_trainable(False, "b")
    for name in store:
        store[name].grad = np.ones(2)
    store.adam_step(0.5)
    assert np.all(store["a"].data < 1) and np.array_equal(store["b"].data, [1.0, 1.0])


def _train(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("w", rng.normal(size=(4, 2)))
    x, y = rng.normal(size=(16, 4)), rng.normal(size=(16, 2))
    for _ in range(25):
        store.zero_grad()
        ad.backward(ad.mean(ad.square(ad.sub(Tensor(x) @ store["w"], y))))
        store.adam_step(0.05)
    return store


def test_adam_deterministic():
    a, b = _train(3), _train(3)
    assert a["w"].data.tobytes() == b["w"].data.tobytes()
    assert a.digest() == b.digest()


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    store = _train(0)
    store.add("bias", np.arange(3.0))
    store.save(tmp_path / "p.npz", "cfg1")
    back = ParamStore.load(tmp_path / "p.npz", "cfg1")
    assert list(back) == list(store)
    for name in store:
        assert back[name].data.tobytes() == store[name].data.tobytes()
    with pytest.raises(ValueError, match="cfg1"):
        ParamStore.load(tmp_path / "p.npz", "other")


def test_store_bookkeeping():
    store = ParamStore()
    store.add("enc.a", np.zeros((2, 3)))
    store.add("pred.b", np.zeros(4))
    assert store.names("enc.") == ["enc.a"]
    assert store.num_values() == 10
    with pytest.raises(KeyError):
        store.add("enc.a", np.zeros(1))
    copy = store.copy()
    copy["enc.a"].data[0, 0] = 1
    assert store["enc.a"].data[0, 0] == 0


def test_non_finite_gradient_raises():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with np.errstate(divide="ignore"):
        with pytest.raises(FloatingPointError):
            ad.backward(ad.sum(ad.power(x, 0.5)))
