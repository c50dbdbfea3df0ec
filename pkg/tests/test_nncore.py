import numpy as np
import pytest

from treelm.errors import NumericFault
from treelm.nncore import (
    Adagrad,
    LayerState,
    LstmLayer,
    LstmStack,
    RectifierClassifier,
    clip_gradients,
    deep_forward,
    dropout_mask,
    grad_check,
    global_norm,
    lstm_cell_forward,
    sgd_step,
    sigmoid,
    softmax_log_prob,
)


def zero_layer(in_dim, d):
    layer = LstmLayer(in_dim, d, np.random.default_rng(0), init_scale=0.0,
                      forget_bias=0.0)
    return layer


# -- cell semantics ------------------------------------------------------------

def test_cell_zero_weights_closed_form():
    d = 5
    layer = zero_layer(3, d)
    rng = np.random.default_rng(1)
    x, h_prev, c_prev = rng.normal(size=3), rng.normal(size=d), rng.normal(size=d)
    h, c = lstm_cell_forward(layer, x, h_prev, c_prev)
    # all gate pre-activations are zero: u = 0, i = f = o = 0.5
    np.testing.assert_allclose(c, 0.5 * c_prev, atol=1e-15)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev), atol=1e-15)


def test_cell_all_zero_inputs():
    layer = zero_layer(3, 4)
    h, c = lstm_cell_forward(layer, np.zeros(3), np.zeros(4), np.zeros(4))
    assert not h.any() and not c.any()


def test_cell_matches_scalar_loop_oracle():
    d, s = 3, 3
    rng = np.random.default_rng(9)
    layer = LstmLayer(s, d, rng, init_scale=0.7, forget_bias=0.3)
    x, h_prev, c_prev = rng.normal(size=s), rng.normal(size=d), rng.normal(size=d)
    h, c = lstm_cell_forward(layer, x, h_prev, c_prev)

    def dot(W, row, v):
        return sum(W[row, k] * v[k] for k in range(len(v)))

    for j in range(d):
        u = np.tanh(dot(layer.Wx, j, x) + dot(layer.Wh, j, h_prev) + layer.b[j])
        i = sigmoid(dot(layer.Wx, d + j, x) + dot(layer.Wh, d + j, h_prev) + layer.b[d + j])
        f = sigmoid(dot(layer.Wx, 2 * d + j, x) + dot(layer.Wh, 2 * d + j, h_prev) + layer.b[2 * d + j])
        o = sigmoid(dot(layer.Wx, 3 * d + j, x) + dot(layer.Wh, 3 * d + j, h_prev) + layer.b[3 * d + j])
        cj = f * c_prev[j] + i * u
        assert abs(c[j] - cj) < 1e-12
        assert abs(h[j] - o * np.tanh(cj)) < 1e-12


def test_gates_bounded():
    rng = np.random.default_rng(2)
    layer = LstmLayer(4, 6, rng, init_scale=2.0)
    for _ in range(20):
        h, c = lstm_cell_forward(
            layer, rng.normal(size=4), rng.normal(size=6), rng.normal(size=6)
        )
        assert (np.abs(h) < 1.0).all()  # |h| = |o * tanh(c)| < 1


def test_cell_nonfinite_raises():
    layer = zero_layer(2, 2)
    with pytest.raises(NumericFault):
        lstm_cell_forward(layer, np.zeros(2), np.zeros(2), np.full(2, np.inf))


# -- deep stack -----------------------------------------------------------------

def test_deep_forward_single_layer_equals_cell():
    rng = np.random.default_rng(5)
    stack = LstmStack(3, 4, 1, rng)
    x = rng.normal(size=3)
    prev = [LayerState(rng.normal(size=4), rng.normal(size=4))]
    h_stack, states = deep_forward(stack, x, prev)
    h_cell, c_cell = lstm_cell_forward(stack.layers[0], x, prev[0].h, prev[0].c)
    np.testing.assert_array_equal(h_stack, h_cell)
    np.testing.assert_array_equal(states[0].c, c_cell)


def test_deep_forward_two_layer_zero_weight_oracle():
    d = 4
    stack = LstmStack(d, d, 2, np.random.default_rng(0), init_scale=0.0,
                      forget_bias=0.0)
    rng = np.random.default_rng(1)
    prev = [LayerState(rng.normal(size=d), rng.normal(size=d)) for _ in range(2)]
    h, states = deep_forward(stack, rng.normal(size=d), prev)
    # layer l: c_l = 0.5 c_prev_l, h_l = 0.5 tanh(c_l), independent of inputs
    for l in range(2):
        np.testing.assert_allclose(states[l].c, 0.5 * prev[l].c, atol=1e-15)
        np.testing.assert_allclose(
            states[l].h, 0.5 * np.tanh(0.5 * prev[l].c), atol=1e-15
        )


def test_deep_forward_deterministic_without_dropout():
    rng = np.random.default_rng(8)
    stack = LstmStack(3, 5, 2, rng)
    x = rng.normal(size=3)
    prev = [LayerState(rng.normal(size=5), rng.normal(size=5)) for _ in range(2)]
    h1, _ = deep_forward(stack, x, prev)
    h2, _ = deep_forward(stack, x, prev)
    np.testing.assert_array_equal(h1, h2)


# -- softmax ---------------------------------------------------------------------

def test_softmax_uniform():
    logp = softmax_log_prob(np.zeros(5))
    np.testing.assert_allclose(logp, np.log(1 / 5) * np.ones(5), atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=11)
    np.testing.assert_allclose(
        softmax_log_prob(logits), softmax_log_prob(logits + 123.4), atol=1e-12
    )


def test_softmax_matches_direct_sum():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=10) * 3
    direct = np.log(np.exp(logits) / np.exp(logits).sum())
    np.testing.assert_allclose(softmax_log_prob(logits), direct, atol=1e-12)
    assert abs(np.exp(softmax_log_prob(logits)).sum() - 1.0) < 1e-12


def test_softmax_rows():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 7))
    logp = softmax_log_prob(logits)
    np.testing.assert_allclose(np.exp(logp).sum(axis=1), np.ones(4), atol=1e-12)


# -- clipping and optimizers -------------------------------------------------------

def _grads(rng, scale):
    return {
        "a": rng.normal(size=(3, 4)) * scale,
        "b": rng.normal(size=7) * scale,
    }


def test_clip_rescales_to_threshold():
    rng = np.random.default_rng(0)
    grads = _grads(rng, 1.0)
    norm = global_norm(grads)
    scale = 10.0 / norm
    for g in grads.values():
        g *= scale  # now the norm is 10 exactly
    direction = {k: v / 10.0 for k, v in grads.items()}
    pre = clip_gradients(grads, 5.0)
    assert pre == pytest.approx(10.0)
    assert global_norm(grads) == pytest.approx(5.0)
    for k in grads:
        np.testing.assert_allclose(grads[k], 5.0 * direction[k], atol=1e-12)


def test_clip_leaves_small_gradients():
    rng = np.random.default_rng(1)
    grads = _grads(rng, 1e-3)
    before = {k: v.copy() for k, v in grads.items()}
    clip_gradients(grads, 5.0)
    for k in grads:
        np.testing.assert_array_equal(grads[k], before[k])


def test_clip_norm_property_and_idempotence():
    rng = np.random.default_rng(2)
    for _ in range(20):
        grads = _grads(rng, float(rng.uniform(0.1, 30)))
        norm = global_norm(grads)
        clip_gradients(grads, 5.0)
        assert global_norm(grads) <= min(norm, 5.0) + 1e-10
        snap = {k: v.copy() for k, v in grads.items()}
        clip_gradients(grads, 5.0)
        for k in grads:
            np.testing.assert_allclose(grads[k], snap[k], atol=1e-12)


def test_sgd_step():
    params = {"p": np.zeros(3)}
    sgd_step(params, {"p": np.full(3, 0.5)}, lr=1.0)
    np.testing.assert_allclose(params["p"], -0.5)


def test_adagrad_first_step_and_decay():
    params = {"p": np.zeros(3)}
    opt = Adagrad(params, lr=0.01)
    g = np.array([0.5, -2.0, 0.1])
    opt.step({"p": g.copy()})
    first = params["p"].copy()
    np.testing.assert_allclose(first, -0.01 * np.sign(g), rtol=1e-6)
    opt.step({"p": g.copy()})
    second = params["p"] - first
    assert (np.abs(second) < np.abs(first)).all()


# -- dropout -----------------------------------------------------------------------

def test_dropout_rate_zero_is_identity():
    mask = dropout_mask(np.random.default_rng(0), 100, 0.0)
    np.testing.assert_array_equal(mask, np.ones(100))


def test_dropout_keep_fraction():
    rng = np.random.default_rng(0)
    mask = dropout_mask(rng, 100_000, 0.5)
    kept = (mask > 0).mean()
    assert abs(kept - 0.5) < 0.01
    # inverted scaling keeps the expectation unchanged
    assert abs(mask.mean() - 1.0) < 0.02


# -- classifier and grad_check -------------------------------------------------------

def test_grad_check_quadratic_exact():
    p = {"x": np.array([1.0, -2.0, 3.0])}

    def loss_fn():
        return 0.5 * float(p["x"] @ p["x"]), {"x": p["x"].copy()}

    assert grad_check(loss_fn, p) < 1e-9


def test_grad_check_catches_corruption():
    rng = np.random.default_rng(4)
    layer = LstmLayer(3, 3, rng, init_scale=0.5)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    w = rng.normal(size=3)
    params = layer.params("l")

    def loss_fn(corrupt=False):
        from treelm.nncore import _cell_forward, _cell_backward

        h, c, cache = _cell_forward(layer, x, h0, c0)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        _cell_backward(layer, cache, w, np.zeros(3), grads, "l")
        if corrupt:
            grads["l.Wx"] *= 2.0
        return float(w @ h), grads

    assert grad_check(loss_fn, params, max_coords=40) < 1e-6
    assert grad_check(lambda: loss_fn(corrupt=True), params, max_coords=40) > 1e-2


def test_classifier_output_range_and_gradients():
    rng = np.random.default_rng(6)
    clf = RectifierClassifier(8, rng, hidden=16, init_scale=0.5)
    X = rng.normal(size=(12, 8))
    y = (rng.random(12) > 0.5).astype(float)
    p = clf.predict_proba(X)
    assert ((p > 0) & (p < 1)).all()

    params = clf.params()
    err = grad_check(lambda: clf.loss_and_grads(X, y), params, epsilon=1e-6,
                     max_coords=30)
    assert err < 1e-4


def test_classifier_learns_separable_toy():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 4))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    clf = RectifierClassifier(4, rng, hidden=32)
    opt = Adagrad(clf.params(), lr=0.05)
    for _ in range(300):
        _, grads = clf.loss_and_grads(X, y)
        opt.step(grads)
    assert clf.accuracy(X, y) == 1.0
