"""A small fully-connected network engine in numpy.

Inputs are rows: a single sample has shape ``(d,)`` and a batch ``(B, d)``.
Parameter gradients from :func:`backward` are summed over the batch. Hidden
layers use leaky-ReLU (slope 0.01) unless the net is built with the
``"identity"`` activation; the output layer is always linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteGradient

LEAK = 0.01
ACTIVATIONS = ("leaky_relu", "identity")


@dataclass(eq=False)
class MLP:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0]:
                raise DimensionMismatch(f"layer {k}: weight {W.shape} vs bias {b.shape}")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise DimensionMismatch(f"layer {k} input {W.shape[0]} != previous output")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter arrays in (W0, b0, W1, b1, ...) order; views, not copies."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLP":
        return MLP([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for p in self.params:
            p[...] = theta[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != theta.size:
            raise DimensionMismatch(f"expected {pos} parameters, got {theta.size}")

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)

    def to_dict(self) -> dict:
        return {
            "format": "lcom-mlp",
            "version": 1,
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "weights": [W for W in self.weights],
            "biases": [b for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        if d.get("format") != "lcom-mlp" or d.get("version") != 1:
            raise ValueError("not an lcom-mlp v1 checkpoint")
        weights = [np.array(W, dtype=float).reshape(a, b) for W, a, b in zip(d["weights"], d["layer_sizes"], d["layer_sizes"][1:])]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(weights, biases, d["activation"])


def init(layer_sizes, activation: str = "leaky_relu", seed: int = 0) -> MLP:
    """He-uniform weights, zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases, activation)


def zeros(layer_sizes, activation: str = "leaky_relu") -> MLP:
    return MLP(
        [np.zeros((a, b)) for a, b in zip(layer_sizes, layer_sizes[1:])],
        [np.zeros(b) for b in layer_sizes[1:]],
        activation,
    )


def _check_input(net: MLP, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.weights[0].shape[0] or x.ndim not in (1, 2):
        raise DimensionMismatch(f"input shape {x.shape} does not fit layer sizes {net.layer_sizes}")
    return x


def forward_cached(net: MLP, x):
    """Forward pass keeping the pre-activations needed by :func:`backward_cached`."""
    h = _check_input(net, x)
    acts = [h]
    pre = []
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W + b
        pre.append(a)
        if k < last and net.activation == "leaky_relu":
            h = np.where(a > 0, a, LEAK * a)
        else:
            h = a
        acts.append(h)
    return h, (acts, pre)


def forward(net: MLP, x) -> np.ndarray:
    return forward_cached(net, x)[0]


def backward_cached(net: MLP, cache, upstream):
    acts, pre = cache
    g = np.asarray(upstream, dtype=float)
    if g.shape != acts[-1].shape:
        raise DimensionMismatch(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    grads: list[np.ndarray] = []
    last = len(net.weights) - 1
    for k in range(last, -1, -1):
        if k < last and net.activation == "leaky_relu":
            g = g * np.where(pre[k] > 0, 1.0, LEAK)
        h = acts[k]
        if g.ndim == 1:
            dW = np.outer(h, g)
            db = g.copy()
        else:
            dW = h.T @ g
            db = g.sum(axis=0)
        grads = [dW, db] + grads
        g = g @ net.weights[k].T
    return grads, g


def input_grad(net: MLP, x, upstream=None):
    """Output and gradient of ``sum(upstream * forward(net, x))`` with respect to ``x`` only.

    Skips the parameter gradients; ``upstream`` defaults to ones. This is the
    inner loop of latent descent and adversarial mining.
    """
    h = _check_input(net, x)
    masks = []
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if k < last and net.activation == "leaky_relu":
            m = np.where(h > 0, 1.0, LEAK)
            h = h * m
            masks.append(m)
    g = np.ones_like(h) if upstream is None else np.asarray(upstream, dtype=float)
    if g.shape != h.shape:
        raise DimensionMismatch(f"upstream shape {g.shape} != output shape {h.shape}")
    for k in range(last, -1, -1):
        if k < last and masks:
            g = g * masks[k]
        g = g @ net.weights[k].T
    return h, g


def backward(net: MLP, x, upstream):
    """Gradients of ``sum(upstream * forward(net, x))``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` follows
    :attr:`MLP.params` order.
    """
    out, cache = forward_cached(net, x)
    return backward_cached(net, cache, upstream)


@dataclass
class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise DimensionMismatch("params and grads differ in length")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("gradient contains NaN or inf")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train_step(net: MLP, state: Adam, grads) -> tuple[MLP, Adam]:
    state.step(net.params, grads)
    return net, state
