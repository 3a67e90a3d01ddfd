"""Bias-free feed-forward tanh controllers and their block-matrix form.

The controller ``u = pi(x)`` is rewritten as

    [u; nu] = N [x; omega],   omega = tanh(nu)

with ``nu``/``omega`` the stacked pre-/post-activations of all hidden layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidDimensions, MalformedN, NumericalFailure

STRUCTURE_TOL = 1e-12


@dataclass(frozen=True)
class NnController:
    weights: tuple

    def __post_init__(self):
        ws = tuple(np.atleast_2d(np.asarray(W, dtype=float)) for W in self.weights)
        if len(ws) < 2:
            raise InvalidDimensions("at least one hidden layer is required")
        for prev, cur in zip(ws[:-1], ws[1:]):
            if cur.shape[1] != prev.shape[0]:
                raise InvalidDimensions(f"weight shapes {prev.shape} -> {cur.shape} do not chain")
        object.__setattr__(self, "weights", ws)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def hidden_sizes(self):
        return self.layer_sizes[1:-1]

    @property
    def n_x(self):
        return self.layer_sizes[0]

    @property
    def n_pi(self):
        return self.layer_sizes[-1]

    @property
    def n_phi(self):
        return sum(self.hidden_sizes)

    @property
    def activation(self):
        return "tanh"

    def __call__(self, x):
        return forward(self, x)[0]

    def scaled_output(self, factor):
        return NnController(self.weights[:-1] + (factor * self.weights[-1],))

    def flat(self):
        return np.concatenate([W.ravel() for W in self.weights])

    def with_flat(self, theta):
        out, i = [], 0
        for W in self.weights:
            out.append(np.asarray(theta[i:i + W.size]).reshape(W.shape))
            i += W.size
        return NnController(tuple(out))

    def to_dict(self):
        return {"layer_sizes": self.layer_sizes, "activation": "tanh",
                "weights": [W.tolist() for W in self.weights]}

    @classmethod
    def from_dict(cls, d):
        if d.get("activation", "tanh") != "tanh":
            raise ValueError(f"unsupported activation {d['activation']!r}")
        nn = cls(tuple(np.asarray(W, dtype=float) for W in d["weights"]))
        if "layer_sizes" in d and list(d["layer_sizes"]) != nn.layer_sizes:
            raise InvalidDimensions("layer_sizes do not match the stored weights")
        return nn

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_controller(layer_sizes, seed=0, rng=None):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return NnController(tuple(weights))


def _layer_slices(hidden_sizes):
    edges = np.concatenate([[0], np.cumsum(hidden_sizes)]).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def forward(nn: NnController, x):
    """Evaluate the controller on one state (1-D) or a batch (rows).

    Returns ``(u, nu, omega)``; ``nu`` and ``omega`` stack every hidden layer.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != nn.n_x:
        raise InvalidDimensions(f"state has dimension {X.shape[1]}, controller expects {nn.n_x}")
    omega = X
    nus, omegas = [], []
    for W in nn.weights[:-1]:
        nu = omega @ W.T
        omega = np.tanh(nu)
        nus.append(nu)
        omegas.append(omega)
    u = omega @ nn.weights[-1].T
    nu, om = np.hstack(nus), np.hstack(omegas)
    if single:
        return u[0], nu[0], om[0]
    return u, nu, om


@dataclass(frozen=True)
class BlockMatrixN:
    N_pix: np.ndarray
    N_piw: np.ndarray
    N_nux: np.ndarray
    N_nuw: np.ndarray

    @property
    def n_x(self):
        return self.N_pix.shape[1]

    @property
    def n_pi(self):
        return self.N_pix.shape[0]

    @property
    def n_phi(self):
        return self.N_nuw.shape[0]

    @property
    def full(self):
        return np.block([[self.N_pix, self.N_piw], [self.N_nux, self.N_nuw]])

    @classmethod
    def from_full(cls, M, n_x, n_pi):
        M = np.asarray(M, dtype=float)
        return cls(M[:n_pi, :n_x], M[:n_pi, n_x:], M[n_pi:, :n_x], M[n_pi:, n_x:])

    def __add__(self, other):
        return BlockMatrixN(self.N_pix + other.N_pix, self.N_piw + other.N_piw,
                            self.N_nux + other.N_nux, self.N_nuw + other.N_nuw)


def assemble_N(nn: NnController) -> BlockMatrixN:
    hidden = nn.hidden_sizes
    sl = _layer_slices(hidden)
    n_phi, n_x, n_pi = nn.n_phi, nn.n_x, nn.n_pi
    N_nux = np.zeros((n_phi, n_x))
    N_nux[sl[0]] = nn.weights[0]
    N_nuw = np.zeros((n_phi, n_phi))
    for i in range(1, len(hidden)):
        N_nuw[sl[i], sl[i - 1]] = nn.weights[i]
    N_piw = np.zeros((n_pi, n_phi))
    N_piw[:, sl[-1]] = nn.weights[-1]
    return BlockMatrixN(np.zeros((n_pi, n_x)), N_piw, N_nux, N_nuw)


def structure_mask(layer_sizes):
    """Boolean BlockMatrixN marking the entries that hold weights."""
    ones = NnController(tuple(np.ones((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])))
    N = assemble_N(ones)
    return BlockMatrixN(*(b.astype(bool) for b in (N.N_pix, N.N_piw, N.N_nux, N.N_nuw)))


def project_structure(N: BlockMatrixN, layer_sizes) -> BlockMatrixN:
    mask = structure_mask(layer_sizes)
    return BlockMatrixN(*(np.where(m, b, 0.0) for m, b in
                          zip((mask.N_pix, mask.N_piw, mask.N_nux, mask.N_nuw),
                              (N.N_pix, N.N_piw, N.N_nux, N.N_nuw))))


def _extract_weights(N: BlockMatrixN, layer_sizes):
    hidden = list(layer_sizes[1:-1])
    sl = _layer_slices(hidden)
    weights = [N.N_nux[sl[0]]]
    for i in range(1, len(hidden)):
        weights.append(N.N_nuw[sl[i], sl[i - 1]])
    weights.append(N.N_piw[:, sl[-1]])
    return tuple(np.array(W) for W in weights)


def disassemble_N(N: BlockMatrixN, layer_sizes) -> NnController:
    layer_sizes = list(layer_sizes)
    hidden = layer_sizes[1:-1]
    expected = (layer_sizes[-1] + sum(hidden), layer_sizes[0] + sum(hidden))
    if len(hidden) < 1 or N.full.shape != expected:
        raise MalformedN(f"N has shape {N.full.shape}, expected {expected}")
    illegal = N.full - project_structure(N, layer_sizes).full
    if np.max(np.abs(illegal), initial=0.0) > STRUCTURE_TOL:
        raise MalformedN("N has nonzero entries outside the feed-forward pattern")
    return NnController(_extract_weights(N, layer_sizes))


def weight_grads_from_N(grad_N: BlockMatrixN, layer_sizes):
    """Chain rule through ``assemble_N``: pick the weight blocks out of dJ/dN."""
    return _extract_weights(grad_N, layer_sizes)


class ImitationLoss:
    """Mean over samples of ``||pi(x_j) - u_j||^2``."""

    def __init__(self, states, actions):
        self.states = np.atleast_2d(np.asarray(states, dtype=float))
        self.actions = np.asarray(actions, dtype=float).reshape(self.states.shape[0], -1)

    def value(self, nn):
        u = forward(nn, self.states)[0]
        return float(np.mean(np.sum((u - self.actions) ** 2, axis=1)))

    def __call__(self, nn):
        m = self.states.shape[0]
        acts = [self.states]
        omega = self.states
        for W in nn.weights[:-1]:
            omega = np.tanh(omega @ W.T)
            acts.append(omega)
        u = omega @ nn.weights[-1].T
        err = u - self.actions
        value = float(np.sum(err**2) / m)
        delta = 2.0 * err / m
        grads = [None] * len(nn.weights)
        grads[-1] = delta.T @ acts[-1]
        back = delta @ nn.weights[-1]
        for i in range(len(nn.weights) - 2, -1, -1):
            dnu = back * (1.0 - acts[i + 1] ** 2)
            grads[i] = dnu.T @ acts[i]
            back = dnu @ nn.weights[i]
        return value, tuple(grads)


class WeightedSum:
    """Nonnegative combination of objectives sharing the ``(value, grads)`` protocol."""

    def __init__(self, *terms):
        self.terms = [(float(w), obj) for w, obj in terms]

    def value(self, nn):
        return sum(w * obj.value(nn) for w, obj in self.terms if w != 0.0)

    def __call__(self, nn):
        total = 0.0
        grads = [np.zeros_like(W) for W in nn.weights]
        for w, obj in self.terms:
            if w == 0.0:
                continue
            v, g = obj(nn)
            total += w * v
            for acc, gi in zip(grads, g):
                acc += w * gi
        return total, tuple(grads)


def gradient(nn: NnController, objective):
    """Gradient of ``objective`` w.r.t. every weight matrix, shaped like ``nn.weights``."""
    value, grads = objective(nn)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalFailure("non-finite objective or gradient")
    return grads


class Adam:
    """Full-batch Adam over a tuple of arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1**self.t)
            v_hat = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return tuple(out)
