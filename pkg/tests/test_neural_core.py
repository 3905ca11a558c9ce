import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdnn.neural_core import (
    AdamState,
    MlpParams,
    NumericError,
    ShapeError,
    adam_step,
    backward_gradients,
    dropout_mask,
    finite_diff_check,
    forward_mlp,
    init_mlp,
    load_checkpoint,
    loss_cross_entropy,
    loss_reconstruction,
    save_checkpoint,
    softmax,
)


def params_of(*layers, dtype=np.float64):
    return MlpParams([np.array(w, dtype=dtype) for w, _ in layers], [np.array(b, dtype=dtype) for _, b in layers])


# forward ------------------------------------------------------------------


def test_zero_network_zero_logits(rng):
    p = init_mlp([5, 7, 3, 2], rng)
    for t in p.tensors():
        t[...] = 0
    logits, _ = forward_mlp(p, rng.normal(size=(4, 5)).astype(np.float32))
    assert np.all(logits == 0)


def test_single_affine_layer():
    logits, _ = forward_mlp(params_of(([[2.0]], [-1.0])), np.array([[2.0]]))
    assert logits.tolist() == [[3.0]]


def test_relu_kills_negative():
    p = params_of(([[1.0]], [0.0]), ([[1.0]], [0.0]))
    logits, _ = forward_mlp(p, np.array([[-5.0]]))
    assert logits.tolist() == [[0.0]]


def test_shape_error(rng):
    p = init_mlp([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        forward_mlp(p, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        MlpParams([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])


def test_non_finite_output():
    p = params_of(([[1e308]], [0.0]), ([[1e308]], [0.0]))
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        forward_mlp(p, np.array([[10.0]]))


def test_rate_zero_dropout_is_bit_identical(rng):
    p = init_mlp([6, 9, 4, 2], rng)
    x = rng.normal(size=(5, 6)).astype(np.float32)
    masks = [dropout_mask((5, 9), 0.0, rng), dropout_mask((5, 4), 0.0, rng)]
    a, _ = forward_mlp(p, x)
    b, _ = forward_mlp(p, x, masks)
    assert a.tobytes() == b.tobytes()


# losses -------------------------------------------------------------------


def test_uniform_logits_ln2():
    loss, _ = loss_cross_entropy(np.zeros((3, 2)), np.array([0, 1, 1]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_saturated_logits():
    loss, _ = loss_cross_entropy(np.array([[20.0, 0.0]]), np.array([0]))
    assert loss < 1e-8


def test_closed_form_cross_entropy():
    mpmath.mp.dps = 40
    expected = float(mpmath.log(1 + mpmath.e**2))
    loss, dlog = loss_cross_entropy(np.array([[1.0, -1.0]]), np.array([1]))
    assert loss == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(2.1269, abs=1e-4)
    p1 = 1 / (1 + math.e**2)
    assert dlog.tolist()[0] == pytest.approx([1 - p1, p1 - 1])


def test_cross_entropy_matches_definition(rng):
    logits = rng.normal(scale=3, size=(7, 2))
    labels = rng.integers(0, 2, 7)
    probs = softmax(logits)
    manual = -np.mean([math.log(probs[i, labels[i]]) for i in range(7)])
    assert loss_cross_entropy(logits, labels)[0] == pytest.approx(manual, rel=1e-12)


def test_huge_logits_stay_finite():
    loss, d = loss_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]))
    assert loss == pytest.approx(2000.0)
    assert np.all(np.isfinite(d))


def test_cross_entropy_rejects_nan():
    with pytest.raises(NumericError):
        loss_cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))


@pytest.mark.parametrize("x,z,expected", [
    ([[1.0, 2.0]], [[1.0, 2.0]], 0.0),
    ([[1.0, 0.0]], [[0.0, 0.0]], 0.5),
    ([[3.0, 4.0]], [[0.0, 0.0]], 12.5),
])
def test_reconstruction(x, z, expected):
    loss, dz = loss_reconstruction(np.array(x), np.array(z))
    assert loss == pytest.approx(expected)
    assert np.allclose(dz, np.array(z) - np.array(x))


def test_reconstruction_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_reconstruction(np.zeros((2, 3)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(row, shift):
    logits = np.array([row])
    p = softmax(logits)
    assert np.all(p > 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(softmax(logits + shift), p, atol=1e-9)
    assert np.argmax(softmax(logits + shift)) == np.argmax(p)


# backward -----------------------------------------------------------------


def test_zero_upstream_gradient(rng):
    p = init_mlp([4, 6, 2], rng, np.float64)
    _, cache = forward_mlp(p, rng.normal(size=(3, 4)))
    grads, _ = backward_gradients(p, cache, np.zeros((3, 2)))
    assert all(np.all(g == 0) for pair in grads for g in pair)


def test_linear_quadratic_hand_case():
    p = params_of(([[1.0, 2.0], [3.0, 4.0]], [0.0, 0.0]))
    x = np.array([[1.0, -1.0]])
    t = np.array([[0.0, 1.0]])
    out, cache = forward_mlp(p, x)
    assert out.tolist() == [[-1.0, -1.0]]
    (dW, db), = backward_gradients(p, cache, out - t)[0]
    assert dW.tolist() == [[-1.0, 1.0], [-2.0, 2.0]]
    assert db.tolist() == [-1.0, -2.0]


def quadratic_loss(target):
    def fn(out, _labels):
        diff = out - target
        return 0.5 * float(np.sum(diff**2)) / len(out), diff / len(out)
    return fn


def test_fd_linear_quadratic_exact(rng):
    p = init_mlp([5, 2], rng, np.float64)
    x = rng.normal(size=(6, 5))
    target = rng.normal(size=(6, 2))
    err = finite_diff_check(p, x, None, 1e-4, n_coords=12, rng=rng, loss_fn=quadratic_loss(target))
    assert err < 1e-8


def seeded_net(seed, depth=3):
    r = np.random.default_rng(seed)
    d = int(r.integers(2, 21))
    dims = [d] + [int(r.integers(2, 21)) for _ in range(depth - 1)] + [2]
    p = init_mlp(dims, r, np.float64)
    for b in p.biases:
        b[:] = r.normal(0, 0.1, b.shape)
    x = r.normal(size=(int(r.integers(1, 9)), d))
    y = r.integers(0, 2, len(x))
    return p, x, y, r


@pytest.mark.parametrize("seed", range(5))
def test_fd_three_layer_relu(seed):
    p, x, y, r = seeded_net(seed)
    assert finite_diff_check(p, x, y, 1e-4, n_coords=300, rng=r) < 1e-4


def test_fd_skips_kinks():
    # pre-activation exactly 0: perturbing the first-layer bias crosses the kink
    p = params_of(([[1.0]], [0.0]), ([[1.0], [-1.0]], [0.0, 0.0]))
    err = finite_diff_check(p, np.array([[0.0]]), np.array([0]), 1e-4, n_coords=10)
    assert err < 1e-6


def test_fd_epsilon_range(rng):
    p = init_mlp([2, 2], rng, np.float64)
    with pytest.raises(ValueError):
        finite_diff_check(p, np.zeros((1, 2)), np.array([0]), epsilon=1e-2)


# adam -----------------------------------------------------------------------


def test_adam_zero_gradient_fixed_point(rng):
    p = init_mlp([3, 4, 2], rng, np.float64)
    before = [t.copy() for t in p.tensors()]
    state = AdamState.for_params(p)
    zero = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(p.weights, p.biases)]
    for _ in range(3):
        adam_step(p, zero, state)
    assert all(np.array_equal(a, b) for a, b in zip(before, p.tensors()))
    assert state.step_count == 3


def test_adam_first_step_is_sign(rng):
    p = init_mlp([3, 2], rng, np.float64)
    before = [t.copy() for t in p.tensors()]
    g = [(rng.normal(size=p.weights[0].shape), rng.normal(size=p.biases[0].shape))]
    state = AdamState.for_params(p, learning_rate=0.01)
    adam_step(p, g, state)
    for b, a, gg in zip(before, p.tensors(), g[0]):
        assert np.allclose(a - b, -0.01 * np.sign(gg), rtol=1e-5)


def test_adam_two_steps_hand_unrolled():
    lr, b1, b2, eps, g = 0.1, 0.9, 0.999, 1e-8, 0.5
    theta, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    p = params_of(([[1.0]], [0.0]))
    state = AdamState.for_params(p, learning_rate=lr)
    for _ in range(2):
        adam_step(p, [(np.array([[g]]), np.array([0.0]))], state)
    assert p.weights[0][0, 0] == pytest.approx(theta, rel=1e-12)
    assert theta == pytest.approx(0.8, rel=1e-6)


def test_adam_shape_mismatch(rng):
    p = init_mlp([3, 2], rng)
    with pytest.raises(ShapeError):
        adam_step(p, [(np.zeros((3, 3)), np.zeros(2))], AdamState.for_params(p))


# dropout ------------------------------------------------------------------


def test_dropout_rate_zero(rng):
    assert np.all(dropout_mask((4, 5), 0.0, rng) == 1)


def test_dropout_keep_fraction(rng):
    mask = dropout_mask((100_000,), 0.5, rng)
    assert abs(np.mean(mask > 0) - 0.5) < 0.01
    assert set(np.unique(mask).tolist()) == {0.0, 2.0}


def test_dropout_preserves_expectation(rng):
    h = rng.uniform(0, 3, size=8)
    draws = np.stack([dropout_mask(h.shape, 0.5, rng) * h for _ in range(20_000)])
    assert np.allclose(draws.mean(axis=0), h, rtol=0.05)


def test_dropout_matches_test_time_scaling(rng):
    """Inverted dropout at train time equals keep-all with halved outgoing weights at test time, in expectation."""
    p = init_mlp([4, 6, 2], rng, np.float64)
    x = rng.normal(size=(1, 4))
    outs = [forward_mlp(p, x, [dropout_mask((1, 6), 0.5, rng, np.float64)])[0] for _ in range(20_000)]
    half = p.copy()
    half.weights[1] = half.weights[1] * 2 * 0.5
    ref, _ = forward_mlp(half, x)
    assert np.allclose(np.mean(outs, axis=0), ref, atol=0.05)


def test_dropout_rate_validation(rng):
    with pytest.raises(ValueError):
        dropout_mask((2,), 1.0, rng)


def test_dropout_deterministic():
    a = dropout_mask((10, 10), 0.5, np.random.default_rng(3))
    b = dropout_mask((10, 10), 0.5, np.random.default_rng(3))
    assert np.array_equal(a, b)


# checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    p = init_mlp([5, 7, 2], rng)
    state = AdamState.for_params(p, learning_rate=0.003)
    adam_step(p, [(rng.normal(size=w.shape).astype(np.float32), rng.normal(size=b.shape).astype(np.float32))
                  for w, b in zip(p.weights, p.biases)], state)
    save_checkpoint(tmp_path / "net", p, state, meta={"stage": "x"})
    p2, s2, meta = load_checkpoint(tmp_path / "net")
    assert meta == {"stage": "x"}
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.tensors(), p2.tensors()))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(state.m + state.v, s2.m + s2.v))
    assert s2.step_count == 1 and s2.learning_rate == 0.003
