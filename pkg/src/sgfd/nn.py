"""Dense feedforward networks with hand-written reverse-mode gradients.

The networks here back the environment classifier, the policy and the
twin critics. Everything is batched: inputs are ``(n, d)`` arrays and a
1-d input is treated as a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sgfd._errors import DivergenceError, InvalidArgument

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")
LOG_EPS = 1e-12
CHECKPOINT_VERSION = 1


def _activate(tag, z):
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(tag, z, h, upstream):
    # h is the activation output for z
    if tag == "relu":
        return upstream * (z > 0.0)
    if tag == "tanh":
        return upstream * (1.0 - h * h)
    return upstream


class Mlp:
    """Fully connected network ``x -> act(W_L ... act(W_1 x + b_1) ... + b_L)``.

    Parameters
    ----------
    layer_sizes : sequence of int
        Widths from input to output, at least two entries.
    hidden_activation : {"relu", "tanh"}
    output_activation : {"identity", "tanh"}
    seed : int or numpy.random.Generator, optional
        Source for the Glorot-uniform initialisation. Biases start at zero.

    Notes
    -----
    Weight matrices are stored ``(fan_out, fan_in)`` so a layer computes
    ``h @ W.T + b`` on a batch.
    """

    def __init__(self, layer_sizes, hidden_activation="relu",
                 output_activation="identity", seed=0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise InvalidArgument(
                f"layer_sizes needs >= 2 positive entries, got {list(layer_sizes)}")
        if hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InvalidArgument(f"unknown hidden activation {hidden_activation!r}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidArgument(f"unknown output activation {output_activation!r}")
        self.layer_sizes = sizes
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def params(self):
        """Parameter arrays in ``[W_1, b_1, W_2, b_2, ...]`` order (live views)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def set_params(self, params):
        params = list(params)
        if len(params) != 2 * self.n_layers:
            raise InvalidArgument("parameter list length does not match architecture")
        for layer in range(self.n_layers):
            W, b = params[2 * layer], params[2 * layer + 1]
            if W.shape != self.weights[layer].shape or b.shape != self.biases[layer].shape:
                raise InvalidArgument(f"shape mismatch in layer {layer}")
            self.weights[layer] = np.array(W, dtype=float)
            self.biases[layer] = np.array(b, dtype=float)

    def copy(self):
        clone = Mlp.__new__(Mlp)
        clone.layer_sizes = list(self.layer_sizes)
        clone.hidden_activation = self.hidden_activation
        clone.output_activation = self.output_activation
        clone.weights = [W.copy() for W in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.layer_sizes[0]:
            raise InvalidArgument(
                f"expected input width {self.layer_sizes[0]}, got shape {x.shape}")
        return X, single

    def _act(self, layer):
        last = layer == self.n_layers - 1
        return self.output_activation if last else self.hidden_activation

    def forward_cache(self, x):
        """Forward pass keeping pre-activations and activations for backward."""
        X, single = self._check_input(x)
        pre, post = [], [X]
        h = X
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            h = _activate(self._act(layer), z)
            pre.append(z)
            post.append(h)
        return h, (pre, post, single)

    def forward(self, x):
        out, (_, _, single) = self.forward_cache(x)
        return out[0] if single else out

    __call__ = forward

    def backward_cache(self, cache, upstream):
        """Reverse pass for ``sum(upstream * output)``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` in
        :attr:`params` order. Gradients are summed over the batch.
        """
        pre, post, single = cache
        G = np.asarray(upstream, dtype=float)
        if single and G.ndim == 1:
            G = G[None, :]
        if G.shape != post[-1].shape:
            raise InvalidArgument(
                f"upstream shape {np.shape(upstream)} does not match output {post[-1].shape}")
        grads = [None] * (2 * self.n_layers)
        for layer in range(self.n_layers - 1, -1, -1):
            G = _activation_grad(self._act(layer), pre[layer], post[layer + 1], G)
            grads[2 * layer] = G.T @ post[layer]
            grads[2 * layer + 1] = G.sum(axis=0)
            G = G @ self.weights[layer]
        return grads, (G[0] if single else G)

    def backward(self, x, upstream):
        """Gradients of ``<upstream, net(x)>`` w.r.t. parameters and input."""
        _, cache = self.forward_cache(x)
        return self.backward_cache(cache, upstream)

    # --- checkpoint text format -------------------------------------------

    def to_text(self):
        lines = [
            f"sgfd-mlp {CHECKPOINT_VERSION}",
            "layer_sizes " + " ".join(str(s) for s in self.layer_sizes),
            f"activations {self.hidden_activation} {self.output_activation}",
        ]
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            lines.append(f"W{layer} " + " ".join(f"{v:.17g}" for v in W.ravel()))
            lines.append(f"b{layer} " + " ".join(f"{v:.17g}" for v in b.ravel()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rows = [line.split() for line in text.strip().splitlines()]
        if not rows or rows[0][0] != "sgfd-mlp":
            raise InvalidArgument("not an sgfd-mlp checkpoint")
        if int(rows[0][1]) != CHECKPOINT_VERSION:
            raise InvalidArgument(f"unsupported checkpoint version {rows[0][1]}")
        sizes = [int(s) for s in rows[1][1:]]
        net = cls(sizes, rows[2][1], rows[2][2], seed=0)
        for layer in range(net.n_layers):
            W = np.array([float(v) for v in rows[3 + 2 * layer][1:]])
            b = np.array([float(v) for v in rows[4 + 2 * layer][1:]])
            net.weights[layer] = W.reshape(net.weights[layer].shape)
            net.biases[layer] = b.reshape(net.biases[layer].shape)
        return net

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


def softmax(v, axis=-1):
    """Max-shifted softmax along ``axis``."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InvalidArgument("softmax input must be finite")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=float)
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(probs, label, eps=LOG_EPS):
    """Mean ``-log p[true class]`` over a batch of one-hot labels.

    The true-class probability is clamped at ``eps`` so a confident wrong
    prediction yields a large finite loss instead of infinity.
    """
    probs = np.asarray(probs, dtype=float)
    label = np.asarray(label, dtype=float)
    if probs.shape != label.shape:
        raise InvalidArgument("probs and label shapes differ")
    p_true = np.sum(probs * label, axis=-1)
    return float(np.mean(-np.log(np.maximum(p_true, eps))))


def _check_grads(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in optimizer step")


@dataclass
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``buf <- momentum * buf + grad + weight_decay * param``;
    ``param <- param - lr * buf``.
    """

    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: list | None = field(default=None, repr=False)

    kind = "sgd_momentum"

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidArgument("invalid SGD hyperparameters")

    def step(self, params, grads):
        """Update ``params`` in place and return them."""
        _check_grads(grads)
        if self.buffers is None:
            self.buffers = [np.zeros_like(p) for p in params]
        for p, g, buf in zip(params, grads, self.buffers):
            buf *= self.momentum
            buf += g
            if self.weight_decay:
                buf += self.weight_decay * p
            p -= self.lr * buf
        return params


@dataclass
class Adam:
    """Adam with bias-corrected moment estimates."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list | None = field(default=None, repr=False)
    v: list | None = field(default=None, repr=False)

    kind = "adam"

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise InvalidArgument("invalid Adam hyperparameters")

    def step(self, params, grads):
        _check_grads(grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params
