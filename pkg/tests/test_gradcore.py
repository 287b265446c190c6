import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rlbind import gradcore as gc
from rlbind.gradcore import Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# --- forward examples ------------------------------------------------------


def test_matmul_ones():
    out = gc.matmul(np.ones((2, 3)), np.ones((3, 2)))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_softmax_uniform():
    np.testing.assert_allclose(gc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_l2_norm_345():
    assert gc.l2_norm(Tensor([3.0, 4.0])).item() == 5.0


def test_l2_normalize_examples(rng):
    np.testing.assert_allclose(gc.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(gc.l2_normalize(Tensor(u)).data, u)
    for _ in range(20):
        v = rng.normal(size=7) * rng.uniform(0.01, 100)
        assert abs(np.linalg.norm(gc.l2_normalize(Tensor(v)).data) - 1) <= 1e-12


def test_l2_normalize_degenerate():
    with pytest.raises(gc.DegenerateVectorError):
        gc.l2_normalize(Tensor([0.0, 1e-14]))


def test_shape_errors_name_primitive():
    with pytest.raises(gc.ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 2\\)"):
        gc.matmul(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(gc.ShapeError, match="add"):
        gc.add(np.ones(3), np.ones(4))


def test_non_finite_output_raises():
    with pytest.raises(gc.NonFiniteError):
        gc.log(Tensor([0.0]))
    with pytest.raises(gc.NonFiniteError):
        gc.exp(Tensor([1000.0]))


def test_sign_zero_and_clamp_convention():
    x = leaf([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(gc.sign(x).data, [-1.0, 0.0, 1.0])
    y = leaf([-1.0, 0.0, 0.5, 1.0, 2.0])
    (g,) = gc.grad(gc.sum_(gc.clamp(y, 0.0, 1.0)), [y])
    np.testing.assert_array_equal(g, [0.0, 1.0, 1.0, 1.0, 0.0])


@given(arrays(np.float64, 6, elements=finite), finite)
def test_softmax_shift_invariant(s, c):
    a = gc.softmax(Tensor(s)).data
    b = gc.softmax(Tensor(s + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


# --- backward examples -----------------------------------------------------


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    gc.backward(gc.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_constant_gives_zero():
    x = leaf([1.0, 2.0])
    loss = gc.sum_(Tensor([3.0, 4.0]))
    gc.backward(loss, leaves=[x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    assert gc.grad(loss, [x])[0].tolist() == [0.0, 0.0]


def test_backward_non_scalar_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(gc.GradError, match="scalar"):
        gc.backward(x * 2.0)


def test_double_backward_rejected():
    x = leaf([1.0, 2.0])
    loss = gc.sum_(x * x)
    gc.backward(loss)
    with pytest.raises(gc.GradError):
        gc.backward(loss)
    with pytest.raises(gc.GradError):
        gc.sum_(loss * 2.0)


def test_backward_order_is_reverse_recording_order():
    x = leaf([1.0, -2.0])
    h = gc.relu(x * 3.0)
    loss = gc.sum_(gc.exp(h * 0.1) + h)
    graph = gc.trace(loss)
    seqs = [n.seq for n in graph.nodes]
    assert seqs == sorted(seqs)
    assert graph.ops == ["mul", "relu", "mul", "exp", "add", "sum"]


def test_no_grad_does_not_record():
    x = leaf([1.0])
    with gc.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_random_three_layer_composition_matches_fd(rng):
    for _ in range(20):
        x = leaf(rng.uniform(0, 1, size=(4, 5)))
        w1, w2, w3 = (leaf(rng.normal(size=s)) for s in ((6, 5), (6, 6), (3, 6)))
        b = leaf(rng.normal(size=6))

        def fn():
            h = gc.relu(gc.linear(x, w1, b))
            h = gc.relu(gc.linear(h, w2))
            return gc.mean(gc.log_softmax(gc.linear(h, w3), axis=-1))

        assert gc.grad_check(fn, [x, w1, w2, w3, b]) <= 1e-4


PRIMITIVE_CASES = {
    "add": lambda a, b: gc.sum_(gc.add(a, b) * b),
    "mul": lambda a, b: gc.sum_(gc.mul(a, b) * a),
    "matmul": lambda a, b: gc.sum_(gc.matmul(a, gc.transpose(b))),
    "exp": lambda a, b: gc.sum_(gc.exp(a * 0.3)),
    "log": lambda a, b: gc.sum_(gc.log(a * a + 1.0)),
    "mean": lambda a, b: gc.mean(a * b, axis=0).sum(),
    "softmax": lambda a, b: gc.sum_(gc.softmax(a, axis=1) * b),
    "log_softmax": lambda a, b: gc.sum_(gc.log_softmax(a, axis=0) * b),
    "l2_norm": lambda a, b: gc.sum_(gc.l2_norm(a, axis=1)),
    "abs": lambda a, b: gc.sum_(gc.abs_(a) * b),
    "power": lambda a, b: gc.sum_(gc.power(a * a + 1.0, 1.5)),
    "concat": lambda a, b: gc.sum_(gc.concat([a, b], axis=1) ** 2),
    "slice": lambda a, b: gc.sum_(gc.slice_(a, (slice(None), slice(1, 3))) * 2.0),
    "relu": lambda a, b: gc.sum_(gc.relu(a) * b),
    "clamp": lambda a, b: gc.sum_(gc.clamp(a, -0.5, 0.5) * b),
    "reshape": lambda a, b: gc.sum_(gc.reshape(a, (-1,)) * gc.reshape(b, (-1,))),
    "l2_normalize": lambda a, b: gc.sum_(gc.l2_normalize(a) * b),
    "maximum": lambda a, b: gc.sum_(gc.maximum(a, b)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_fd_20_seeds(name):
    fn = PRIMITIVE_CASES[name]
    for seed in range(20):
        r = np.random.default_rng(seed)
        a, b = leaf(r.normal(size=(3, 4))), leaf(r.normal(size=(3, 4)))
        gc.grad_check(lambda: fn(a, b), [a, b])


def test_grad_check_flags_wrong_gradient():
    x = leaf([1.0, 2.0])

    def wrong():
        # forward doubles, backward claims triple
        return gc.sum_(gc._make("bad", x.data * 2.0, (x,), lambda g: (g * 3.0,)))

    with pytest.raises(AssertionError, match="gradient mismatch"):
        gc.grad_check(wrong, [x])


def test_determinism(rng):
    x0 = rng.normal(size=(3, 4))

    def run():
        x = leaf(x0)
        loss = gc.sum_(gc.softmax(x * 2.0) * gc.exp(x * 0.1))
        return loss.item(), gc.grad(loss, [x])[0]

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2 and np.array_equal(g1, g2)


def test_independent_graphs_across_threads():
    results = {}

    def work(k):
        x = leaf(np.arange(5.0) * (k + 1))
        results[k] = gc.grad(gc.sum_(x * x), [x])[0]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, g in results.items():
        np.testing.assert_array_equal(g, 2 * np.arange(5.0) * (k + 1))
