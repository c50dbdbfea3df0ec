"""Dense numeric layer: LSTM cells and stacks with hand-derived backward
passes, softmax, dropout, gradient clipping, optimizers, a small rectifier
classifier, and a finite-difference gradient checker.

Everything runs in 64-bit floats. Parameters live in flat ``{name: ndarray}``
dicts so that clipping, updates, and checkpointing can treat models
uniformly; gradients are accumulated into a dict of the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericFault


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax_log_prob(logits):
    """Log-softmax with max-shift stabilization; works on 1-D or row-wise 2-D."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_sigmoid(x):
    # -softplus(-x), stable on both tails
    return -np.logaddexp(0.0, -x)


def uniform_init(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


@dataclass
class LayerState:
    """Hidden and cell vector of one LSTM layer at one node."""

    h: np.ndarray
    c: np.ndarray


class LstmLayer:
    """One LSTM layer with packed gate weights, gate order (u, i, f, o).

    u is the tanh input signal; i, f, o are the sigmoid input, forget, and
    output gates. Biases are zero-initialized except the forget gate.
    """

    def __init__(self, in_dim, hidden_dim, rng, init_scale=0.1, forget_bias=1.0):
        self.in_dim = in_dim
        self.d = hidden_dim
        self.Wx = uniform_init(rng, (4 * hidden_dim, in_dim), init_scale)
        self.Wh = uniform_init(rng, (4 * hidden_dim, hidden_dim), init_scale)
        self.b = np.zeros(4 * hidden_dim)
        self.b[2 * hidden_dim : 3 * hidden_dim] = forget_bias

    def params(self, prefix):
        return {f"{prefix}.Wx": self.Wx, f"{prefix}.Wh": self.Wh, f"{prefix}.b": self.b}


def _cell_forward(layer, x, h_prev, c_prev):
    d = layer.d
    a = layer.Wx @ x + layer.Wh @ h_prev + layer.b
    u = np.tanh(a[:d])
    i = sigmoid(a[d : 2 * d])
    f = sigmoid(a[2 * d : 3 * d])
    o = sigmoid(a[3 * d :])
    c = f * c_prev + i * u
    tc = np.tanh(c)
    h = o * tc
    if not (np.isfinite(h).all() and np.isfinite(c).all()):
        raise NumericFault(
            "non-finite LSTM cell output; gate ranges "
            f"u=[{u.min():.3g},{u.max():.3g}] i=[{i.min():.3g},{i.max():.3g}] "
            f"f=[{f.min():.3g},{f.max():.3g}] o=[{o.min():.3g},{o.max():.3g}]"
        )
    return h, c, (x, h_prev, c_prev, u, i, f, o, tc)


def lstm_cell_forward(layer, x, h_prev, c_prev):
    """Single cell step -> (h, c)."""
    h, c, _ = _cell_forward(layer, x, h_prev, c_prev)
    return h, c


def _cell_backward(layer, cache, dh, dc, grads, prefix):
    x, h_prev, c_prev, u, i, f, o, tc = cache
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate(
        [
            (dct * i) * (1.0 - u * u),        # u pre-activation
            (dct * u) * i * (1.0 - i),        # i
            (dct * c_prev) * f * (1.0 - f),   # f
            do * o * (1.0 - o),               # o
        ]
    )
    grads[f"{prefix}.Wx"] += np.outer(da, x)
    grads[f"{prefix}.Wh"] += np.outer(da, h_prev)
    grads[f"{prefix}.b"] += da
    dx = layer.Wx.T @ da
    dh_prev = layer.Wh.T @ da
    dc_prev = dct * f
    return dx, dh_prev, dc_prev


class LstmStack:
    """Deep LSTM: layer l consumes the layer below at the current step and its
    own (h, c) from the predecessor step. Dropout, when enabled, hits only the
    vertical inputs between layers, never the recurrent path."""

    def __init__(self, in_dim, hidden_dim, n_layers, rng, init_scale=0.1, forget_bias=1.0):
        if n_layers < 1:
            raise ValueError("a stack needs at least one layer")
        self.in_dim = in_dim
        self.d = hidden_dim
        self.layers = [
            LstmLayer(in_dim if l == 0 else hidden_dim, hidden_dim, rng,
                      init_scale, forget_bias)
            for l in range(n_layers)
        ]

    @property
    def n_layers(self):
        return len(self.layers)

    def params(self, prefix):
        out = {}
        for l, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{l}"))
        return out

    def forward(self, x, prev, masks=None):
        """One step -> (new per-layer states, caches). ``prev`` holds the
        predecessor's per-layer states; ``masks`` the inter-layer dropout
        masks (length n_layers - 1) or None."""
        states, caches = [], []
        inp = x
        for l, layer in enumerate(self.layers):
            if l > 0 and masks is not None:
                inp = inp * masks[l - 1]
            h, c, cache = _cell_forward(layer, inp, prev[l].h, prev[l].c)
            states.append(LayerState(h, c))
            caches.append(cache)
            inp = h
        return states, caches

    def backward(self, caches, d_states, grads, prefix, masks=None):
        """Backward through one step. ``d_states`` carries (dh, dc) pairs for
        this step's per-layer outputs; returns (dx, per-layer (dh, dc) for the
        predecessor)."""
        d_prev = [None] * self.n_layers
        dx_up = None
        for l in reversed(range(self.n_layers)):
            dh, dc = d_states[l]
            if dx_up is not None:
                dh = dh + dx_up
            dx, dh_prev, dc_prev = _cell_backward(
                self.layers[l], caches[l], dh, dc, grads, f"{prefix}.{l}"
            )
            if l > 0 and masks is not None:
                dx = dx * masks[l - 1]
            d_prev[l] = (dh_prev, dc_prev)
            dx_up = dx
        return dx_up, d_prev


def deep_forward(stack, x, prev):
    """Evaluation-mode stack step -> (top hidden vector, new per-layer states)."""
    states, _ = stack.forward(x, prev)
    return states[-1].h, states


def dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: kept units scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape)
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, threshold=5.0):
    """Rescale the whole gradient set to global norm <= threshold (in place).
    Returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return norm


def sgd_step(params, grads, lr):
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {name}")
        p -= lr * g


class Adagrad:
    """Per-coordinate adaptive SGD used for the add-edge classifiers."""

    def __init__(self, params, lr=0.01, eps=1e-8):
        self.params = params
        self.lr = lr
        self.eps = eps
        self.acc = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        for name, p in self.params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"non-finite gradient for {name}")
            self.acc[name] += g * g
            p -= self.lr * g / (np.sqrt(self.acc[name]) + self.eps)


class RectifierClassifier:
    """Two-layer rectifier network with a logistic output unit."""

    def __init__(self, in_dim, rng, hidden=300, init_scale=0.1):
        self.W1 = uniform_init(rng, (hidden, in_dim), init_scale)
        self.b1 = np.zeros(hidden)
        self.w2 = uniform_init(rng, (hidden,), init_scale)
        self.b2 = np.zeros(1)

    def params(self, prefix=""):
        p = prefix + "." if prefix else ""
        return {f"{p}W1": self.W1, f"{p}b1": self.b1, f"{p}w2": self.w2, f"{p}b2": self.b2}

    def _score(self, X):
        hidden = np.maximum(0.0, X @ self.W1.T + self.b1)
        return hidden @ self.w2 + self.b2[0], hidden

    def predict_proba(self, X):
        X = np.atleast_2d(X)
        z, _ = self._score(X)
        return sigmoid(z)

    def decide(self, x, threshold=0.5):
        return bool(self.predict_proba(x)[0] > threshold)

    def loss_and_grads(self, X, y):
        """Mean binary cross-entropy over the batch plus its gradients."""
        X = np.atleast_2d(X)
        y = np.asarray(y, dtype=np.float64)
        z, hidden = self._score(X)
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (sigmoid(z) - y) / len(y)
        dhidden = np.outer(dz, self.w2) * (hidden > 0)
        grads = {
            "W1": dhidden.T @ X,
            "b1": dhidden.sum(axis=0),
            "w2": hidden.T @ dz,
            "b2": np.array([dz.sum()]),
        }
        return loss, grads

    def accuracy(self, X, y, threshold=0.5):
        return float(np.mean((self.predict_proba(X) > threshold) == (np.asarray(y) > 0.5)))


def grad_check(loss_fn, params, epsilon=1e-5, rng=None, max_coords=16):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must return ``(loss, grads)`` evaluated at the current
    parameter values. Up to ``max_coords`` coordinates per tensor are
    perturbed. Returns the largest relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = loss_fn()
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        n = flat.size
        coords = (
            np.arange(n)
            if n <= max_coords
            else rng.choice(n, size=max_coords, replace=False)
        )
        for j in coords:
            orig = flat[j]
            flat[j] = orig + epsilon
            up, _ = loss_fn()
            flat[j] = orig - epsilon
            down, _ = loss_fn()
            flat[j] = orig
            numeric = (up - down) / (2.0 * epsilon)
            analytic = float(grads[name].reshape(-1)[j])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
