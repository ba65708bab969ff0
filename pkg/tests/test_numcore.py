import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calibflow.numcore import (AdamState, NonFiniteGradient, PlateauSchedule, RngStream,
                               ShapeError, Tape, TapeError, Tensor, ad, adam_step,
                               plateau_update, sample_normal)
from gradcheck import numeric_grad, rel_err


def grad_of(fn, *arrays):
    """Analytic gradients of scalar fn(*tensors) w.r.t. each input array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    g = tape.backward(out)
    return [g.get(t, np.zeros_like(t.data)) for t in ts]


def fd_of(fn, arrays, which, h=1e-5):
    arrays = [np.array(a, dtype=float) for a in arrays]

    def f(x):
        args = list(arrays)
        args[which] = x
        return fn(*[Tensor(a) for a in args]).item()

    return numeric_grad(f, arrays[which], h)


# -- forward ------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_relu_and_sum_exp():
    assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert ad.sum(ad.exp(Tensor([0.0, 0.0]))).item() == 2.0


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError, match="concat"):
        ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# -- backward -----------------------------------------------------------------

def test_square_gradient():
    (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == pytest.approx(6.0)


def test_relu_gradient_negative():
    (g,) = grad_of(lambda x: ad.relu(x), -1.0)
    assert g == 0.0


def test_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(y)


def test_tape_consumed_after_backward():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    tape.backward(y)
    with pytest.raises(TapeError, match="consumed"):
        tape.backward(y)


def test_gradient_accumulates_over_paths():
    # f = x*y + x  ->  df/dx = y + 1
    x, y = Tensor(2.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    with Tape() as tape:
        f = x * y + x
    g = tape.backward(f)
    assert g[x] == pytest.approx(6.0)
    assert g[y] == pytest.approx(2.0)


def test_no_tape_records_nothing():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    assert y.item() == 4.0


def test_three_layer_net_matches_finite_differences(nprng):
    W1 = nprng.normal(size=(4, 6))
    W2 = nprng.normal(size=(6, 5))
    W3 = nprng.normal(size=(5, 1))
    X = nprng.normal(size=(7, 4))

    def net(w1, w2, w3):
        h = ad.tanh(Tensor(X) @ w1)
        h = ad.softplus(h @ w2)
        return ad.mean((h @ w3) ** 2)

    grads = grad_of(net, W1, W2, W3)
    for i, g in enumerate(grads):
        assert rel_err(g, fd_of(net, [W1, W2, W3], i)) < 1e-4


# one randomized finite-difference check per primitive
PRIMITIVES = {
    "add": (lambda a, b: ad.sum(a + b * b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum((a - b) ** 2), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: ad.sum(a * b), [(2, 3), (2, 3)]),
    "div": (lambda a, b: ad.sum(a / (ad.exp(b) + 1.0)), [(2, 3), (3,)]),
    "matmul": (lambda a, b: ad.sum(ad.tanh(a @ b)), [(2, 3, 4), (4, 2)]),
    "exp": (lambda a: ad.sum(ad.exp(a)), [(5,)]),
    "log": (lambda a: ad.sum(ad.log(a * a + 1.0)), [(5,)]),
    "relu": (lambda a: ad.sum(ad.relu(a) * a), [(6,)]),
    "tanh": (lambda a: ad.sum(ad.tanh(a)), [(6,)]),
    "softplus": (lambda a: ad.sum(ad.softplus(a)), [(6,)]),
    "sqrt": (lambda a: ad.sum(ad.sqrt(a * a + 0.5)), [(6,)]),
    "power": (lambda a: ad.sum((a * a + 1.0) ** 1.5), [(6,)]),
    "sum": (lambda a: ad.sum(ad.sum(a, axis=1) ** 2), [(3, 4)]),
    "mean": (lambda a: ad.sum(ad.mean(a, axis=(0, 2), keepdims=True) ** 2), [(3, 4, 2)]),
    "gather": (lambda a: ad.sum(ad.gather(a, [2, 0, 2], axis=1) ** 2), [(2, 3, 2)]),
    "scatter_add": (lambda a: ad.sum(ad.scatter_add(a, [1, 1, 0, 3], size=4, axis=1) ** 2), [(2, 4, 3)]),
    "concat": (lambda a, b: ad.sum(ad.concat([a, b], axis=-1) ** 3), [(2, 3), (2, 2)]),
    "slice": (lambda a: ad.sum(a[:, 1:] ** 2 + a[0] .sum()), [(3, 4)]),
    "minimum": (lambda a, b: ad.sum(ad.minimum(a, b) ** 2), [(5,), (5,)]),
    "maximum": (lambda a, b: ad.sum(ad.maximum(a, b) ** 2), [(5,), (5,)]),
    "reshape": (lambda a: ad.sum(ad.reshape(a, (3, 2)) @ Tensor(np.arange(4.0).reshape(2, 2))), [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients(name, seed):
    fn, shapes = PRIMITIVES[name]
    r = np.random.default_rng(seed)
    arrays = [r.normal(size=s) for s in shapes]
    grads = grad_of(fn, *arrays)
    for i, g in enumerate(grads):
        assert rel_err(g, fd_of(fn, arrays, i), floor=1e-6) < 1e-4


def test_backward_is_linear_in_subgraphs(nprng):
    a = nprng.normal(size=(3, 3))

    def f1(x):
        return ad.sum(ad.tanh(x) * x)

    def f2(x):
        return ad.sum(ad.exp(x) / 3.0)

    (g1,) = grad_of(f1, a)
    (g2,) = grad_of(f2, a)
    (g12,) = grad_of(lambda x: f1(x) + f2(x), a)
    assert np.allclose(g12, g1 + g2, rtol=1e-12, atol=1e-12)


# -- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor([1.0, -2.0])}
    new = adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert np.array_equal(new["w"].data, p["w"].data)


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": Tensor([1.0, 1.0])}
    new = adam_step(p, {"w": np.array([3.0, -0.2])}, AdamState(lr=0.01))
    assert np.allclose(new["w"].data - 1.0, [-0.01, 0.01], rtol=1e-5)


def test_adam_quadratic_bowl_converges():
    p = {"x": Tensor(0.0, requires_grad=True)}
    state = AdamState(lr=0.1)
    for _ in range(500):
        with Tape() as tape:
            loss = (p["x"] - 5.0) ** 2
        p = adam_step(p, tape.gradient(loss, p), state)
    assert abs(p["x"].item() - 5.0) < 1e-2


def test_adam_nan_gradient_names_parameter():
    with pytest.raises(NonFiniteGradient, match="bias"):
        adam_step({"bias": Tensor([0.0])}, {"bias": np.array([np.nan])}, AdamState())


# -- plateau schedule -----------------------------------------------------------

def test_plateau_constant_when_improving():
    s = PlateauSchedule(lr=1e-3)
    for k in range(50):
        lr, stop = plateau_update(s, 100.0 - k)
    assert lr == 1e-3 and not stop


def test_plateau_reduces_after_patience():
    s = PlateauSchedule(lr=1e-3, patience=10)
    plateau_update(s, 1.0)
    for _ in range(10):
        lr, _ = plateau_update(s, 1.0)
    assert lr == 1e-3
    lr, stop = plateau_update(s, 1.0)  # 11th non-improving update
    assert lr == pytest.approx(1e-4) and not stop


def test_plateau_stops_on_third_decrease():
    s = PlateauSchedule(lr=1e-3, patience=10)
    lrs, stop = [], False
    plateau_update(s, 1.0)
    while not stop:
        lr, stop = plateau_update(s, 2.0)
        if not lrs or lr != lrs[-1]:
            lrs.append(lr)
    assert lrs == pytest.approx([1e-3, 1e-4, 1e-5, 1e-6])
    assert s.decreases == 3


def test_plateau_rejects_nan():
    with pytest.raises(ValueError):
        plateau_update(PlateauSchedule(), float("nan"))


def test_plateau_small_gain_is_not_improvement():
    s = PlateauSchedule()
    plateau_update(s, 1.0)
    plateau_update(s, 1.0 - 1e-6)
    assert s.stale == 1


# -- RNG ------------------------------------------------------------------------

def test_normal_zero_std_returns_mean():
    out = sample_normal(RngStream(3), (4, 2), mean=1.5, std=0.0)
    assert np.all(out.data == 1.5)


def test_normal_mean_within_clt_bound():
    z = RngStream(11).normal(10**6)
    assert abs(z.mean()) < 4 / math.sqrt(10**6)


def test_same_seed_bit_identical():
    a = RngStream(42).normal((100,))
    b = RngStream(42).normal((100,))
    assert a.tobytes() == b.tobytes()


def test_children_are_independent_and_reproducible():
    r = RngStream(5)
    a, b = r.child(0).normal(10), r.child(1).normal(10)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, RngStream(5).child(0).normal(10))


def test_negative_std_rejected():
    with pytest.raises(ValueError):
        RngStream(1).normal(3, std=-1.0)


def test_draw_counter():
    r = RngStream(1)
    r.normal((3, 4))
    r.uniform(5)
    assert r.describe()["draws"] == 17
