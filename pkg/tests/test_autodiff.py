import numpy as np
import pytest

from treelm.autodiff import (NonFiniteValue, ParameterStore, ShapeMismatch,
                             Tape, finite_diff_check, sample_dropout_mask)


def test_matvec_identity():
    tape = Tape()
    eye = tape.constant(np.eye(3))
    x = tape.constant([1.0, 2.0, 3.0])
    assert np.array_equal(tape.matvec(eye, x).value, [1.0, 2.0, 3.0])


def test_log_softmax_symmetry():
    tape = Tape()
    out = tape.log_softmax(tape.constant([0.0, 0.0, 0.0]))
    assert np.allclose(out.value, -np.log(3.0))


def test_affine_hand_arithmetic():
    tape = Tape()
    w = tape.constant([[1.0, 2.0], [3.0, 4.0]])
    h = tape.constant([1.0, 1.0])
    b = tape.constant([0.5, -0.5])
    out = tape.add(tape.matvec(w, h), b)
    assert np.array_equal(out.value, [3.5, 6.5])


def test_shape_mismatch_names_both_shapes():
    tape = Tape()
    a = tape.constant([1.0, 2.0])
    b = tape.constant([1.0, 2.0, 3.0])
    with pytest.raises(ShapeMismatch, match=r"\(2,\).*\(3,\)"):
        tape.add(a, b)


def test_non_finite_output_names_op():
    tape = Tape()
    x = tape.constant([1e308, 1e308])
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteValue, match="add"):
            tape.add(x, x)


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.constant([1.0, -2.0, 3.0])
    tape.backward(tape.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_log_softmax_pick_identity():
    # grad of log_softmax(v)[j] wrt v is onehot(j) - softmax(v)
    tape = Tape()
    v = tape.constant([0.3, -1.2, 2.0, 0.0])
    loss = tape.pick(tape.log_softmax(v), 2)
    tape.backward(loss)
    p = np.exp(v.value) / np.exp(v.value).sum()
    expected = np.eye(4)[2] - p
    assert np.allclose(v.grad, expected, atol=1e-12)


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.constant([1.0, 2.0])
    with pytest.raises(ShapeMismatch):
        tape.backward(x)


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(0)
    store = ParameterStore()
    store.add("w", (4, 4), rng)
    store.add("x", (4,), rng)

    def run():
        store.zero_grads()
        tape = Tape()
        w = tape.param(store, "w")
        x = tape.param(store, "x")
        loss = tape.sum(tape.tanh(tape.matvec(w, x)))
        tape.backward(loss)
        return {k: v.copy() for k, v in store.grads.items()}

    first, second = run(), run()
    for key in first:
        assert np.array_equal(first[key], second[key])


def test_masked_log_softmax_renormalises_exactly():
    tape = Tape()
    x = tape.constant([1.0, 5.0, -2.0])
    out = tape.masked_log_softmax(x, np.array([True, False, True]))
    total = np.exp(out.value[0]) + np.exp(out.value[2])
    assert abs(total - 1.0) < 1e-12


def test_log_softmax_normalisation_property():
    rng = np.random.default_rng(1)
    for _ in range(100):
        tape = Tape()
        v = tape.constant(rng.normal(size=7) * 10)
        out = tape.log_softmax(v)
        lse = np.log(np.exp(out.value).sum())
        assert abs(lse) < 1e-10


def test_quadratic_finite_diff_tight():
    rng = np.random.default_rng(2)
    store = ParameterStore()
    store.add("theta", (5,), rng)

    def loss_fn():
        tape = Tape()
        theta = tape.param(store, "theta")
        return tape, tape.scale(tape.sum(tape.mul(theta, theta)), 0.5)

    assert finite_diff_check(loss_fn, store, eps=1e-5) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_all_ops_finite_diff(seed):
    # randomized 5-dimensional composite touching every differentiable op
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("w", (5, 5), rng)
    store.add("a", (5,), rng)
    store.add("b", (5,), rng)
    mask = sample_dropout_mask(np.random.default_rng(seed + 100), (5,), 0.4)
    weights = np.random.default_rng(seed + 200).random(10)

    def loss_fn():
        tape = Tape()
        w = tape.param(store, "w")
        a = tape.param(store, "a")
        b = tape.param(store, "b")
        h = tape.tanh(tape.matvec(w, a))
        g = tape.sigmoid(tape.add(h, b))
        m = tape.apply_mask(tape.mul(g, a), mask)
        cat = tape.concat([m, tape.narrow(tape.row(w, 2), 0, 5)])
        ws = tape.weighted_sum(cat, weights)
        lp = tape.masked_log_softmax(tape.matvec(w, g),
                                     np.array([True, True, False, True, True]))
        return tape, tape.add(ws, tape.add(tape.pick(lp, 3),
                                           tape.pick(tape.log_softmax(b), 1)))

    assert finite_diff_check(loss_fn, store, eps=1e-5) < 1e-4


def test_finite_diff_rejects_nondeterminism():
    rng = np.random.default_rng(3)
    store = ParameterStore()
    store.add("theta", (3,), rng)
    noise = iter(np.random.default_rng(4).normal(size=1000))

    def loss_fn():
        tape = Tape()
        theta = tape.param(store, "theta")
        return tape, tape.weighted_sum(theta, [next(noise)] * 3)

    with pytest.raises(RuntimeError, match="non-deterministic"):
        finite_diff_check(loss_fn, store, eps=1e-5)


def test_clip_and_sgd_step():
    store = ParameterStore()
    store.add("p", (2,))
    store.grads["p"][:] = [30.0, 40.0]
    norm = store.clip_grads(5.0)
    assert norm == pytest.approx(50.0)
    assert np.allclose(store.grads["p"], [3.0, 4.0])
    store.sgd_step(0.1)
    assert np.allclose(store.params["p"], [-0.3, -0.4])
    assert store.step == 1


def test_dropout_mask_scaling():
    rng = np.random.default_rng(5)
    mask = sample_dropout_mask(rng, (10_000,), 0.25)
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}
    assert abs(mask.mean() - 1.0) < 0.05
