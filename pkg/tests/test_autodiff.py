"""Gradient and replay checks for the tape engine.

Every primitive is validated against central finite differences through a
scalar reduction; compositions and the softmax cross entropy get their own
oracles. The floor inside relative_error keeps near-zero finite-difference
noise from dominating the comparison.
"""

import numpy as np
import pytest

import moax.autodiff as ad
from moax.autodiff import Tape
from moax.errors import ContractError, ShapeError

TOL = 1e-4


def check_grads(build, arrays, tol=TOL):
    """build(tape) -> scalar loss tensor reading from `arrays` in place."""
    tape = Tape()
    loss = build(tape)
    ad.backward(tape, loss)
    analytic = [n.grad for n in tape.nodes if n.op is None and n.requires_grad]
    assert all(g is not None for g in analytic)

    def loss_value():
        return float(build(Tape()).value[0, 0])

    numeric = ad.numeric_gradient(loss_value, arrays)
    assert len(analytic) == len(numeric)
    for got, want in zip(analytic, numeric):
        assert ad.relative_error(got, want) < tol


def test_matmul_gradients():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))

    def build(tape):
        ta = tape.param(a, name="a")
        tb = tape.param(b, name="b")
        return ad.sum_all(ad.matmul(ta, tb))

    check_grads(build, [a, b])


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_elementwise_binary_gradients(op):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))

    def build(tape):
        return ad.sum_all(op(tape.param(a), tape.param(b)))

    check_grads(build, [a, b])


@pytest.mark.parametrize("unary", [
    lambda t: ad.scale(t, -1.7),
    ad.transpose,
    ad.tanh,
    ad.softmax_rows,
    ad.layer_norm_rows,
    lambda t: ad.slice_cols(t, 1, 3),
    ad.reciprocal,
    ad.row_sum,
    ad.sum_all,
    ad.mean_all,
])
def test_unary_gradients(unary):
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 5)) + 2.0  # shifted away from 0 for reciprocal

    def build(tape):
        return ad.sum_all(unary(tape.param(a)))

    check_grads(build, [a])


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    a[np.abs(a) < 1e-2] = 0.5  # central differences straddle the kink otherwise

    def build(tape):
        return ad.sum_all(ad.relu(tape.param(a)))

    check_grads(build, [a])


def test_gather_rows_and_embedding_gradients():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(6, 3))
    ids = [0, 2, 2, 5]

    def build(tape):
        emb = ad.embedding(tape.param(table), ids)
        return ad.sum_all(ad.tanh(emb))

    check_grads(build, [table])


def test_concat_and_scale_rows_gradients():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(3, 4))
    s = rng.normal(size=(3, 1))

    def build(tape):
        cat = ad.concat_cols([tape.param(a), tape.param(b)])
        return ad.sum_all(ad.scale_rows(cat, tape.param(s)))

    check_grads(build, [a, b, s])


def test_cross_entropy_matches_manual_log_softmax():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, 7)) * 3.0
    targets = [0, 3, 6, 2, 2]
    tape = Tape()
    loss = ad.cross_entropy_mean(tape.param(logits), targets)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    want = -np.mean([logp[i, t] for i, t in enumerate(targets)])
    assert abs(float(loss.value[0, 0]) - want) < 1e-12


def test_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(4, 5))
    targets = [1, 0, 4, 3]

    def build(tape):
        return ad.cross_entropy_mean(tape.param(logits), targets)

    check_grads(build, [logits])


def test_two_matmul_chain_gradient():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3))
    w1 = rng.normal(size=(4, 3))
    w2 = rng.normal(size=(2, 4))

    def build(tape):
        h = ad.tanh(ad.matmul(tape.const(x), ad.transpose(tape.param(w1))))
        out = ad.matmul(h, ad.transpose(tape.param(w2)))
        return ad.mean_all(ad.mul(out, out))

    check_grads(build, [w1, w2])


def test_gradient_accumulates_over_reuse():
    a = np.array([[2.0, -1.0]])
    tape = Tape()
    ta = tape.param(a)
    loss = ad.sum_all(ad.add(ta, ta))
    ad.backward(tape, loss)
    assert np.array_equal(ta.grad, np.full((1, 2), 2.0))


def test_backward_requires_scalar_loss():
    tape = Tape()
    t = tape.param(np.ones((2, 2)))
    with pytest.raises(ContractError):
        ad.backward(tape, t)


def test_backward_clears_previous_grads():
    a = np.array([[1.0, 2.0]])
    tape = Tape()
    ta = tape.param(a)
    loss = ad.sum_all(ta)
    ad.backward(tape, loss)
    ad.backward(tape, loss)
    assert np.array_equal(ta.grad, np.ones((1, 2)))  # not doubled


def test_replay_matches_recorded_forward():
    rng = np.random.default_rng(9)
    tape = Tape()
    x = tape.param(rng.normal(size=(3, 4)))
    y = ad.softmax_rows(ad.matmul(x, tape.const(rng.normal(size=(4, 4)))))
    loss = ad.mean_all(ad.layer_norm_rows(y))
    assert tape.replay_matches()
    ad.backward(tape, loss)
    assert tape.replay_matches()  # backward must not disturb stored values


def test_replay_detects_tampering():
    tape = Tape()
    x = tape.param(np.ones((2, 2)))
    y = ad.scale(x, 3.0)
    y.value[0, 0] = 99.0
    assert not tape.replay_matches()


def test_shape_mismatch_raises():
    tape = Tape()
    a = tape.param(np.ones((2, 3)))
    b = tape.param(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.matmul(a, b)


def test_as_matrix_promotes_vectors():
    m = ad.as_matrix([1.0, 2.0, 3.0])
    assert m.shape == (1, 3)
    with pytest.raises(ShapeError):
        ad.as_matrix(np.zeros((2, 2, 2)))
