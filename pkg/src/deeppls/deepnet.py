"""Feedforward networks with smooth activations.

Rows are observations: a layer maps ``A -> sigma(A W^T + b)``.  The output
layer is always linear.  Gradients for training, and the input Jacobian and
Hessian, are computed analytically from the cached forward pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    InvalidConfig,
    NonConvergent,
    NonFiniteActivation,
    NonFiniteLoss,
)

SCHEMA_VERSION = "1.0"
ACTIVATIONS = ("softplus", "tanh", "linear")
INITS = ("uniform_glorot", "pls_warm_start")


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "tanh":
        return np.tanh(x)
    if name == "linear":
        return x
    raise InvalidConfig(f"unknown activation {name!r}")


def activation_derivatives(name: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivatives of the activation at ``x``."""
    if name == "softplus":
        s = expit(x)
        return s, s * (1.0 - s)
    if name == "tanh":
        t = np.tanh(x)
        d1 = 1.0 - t * t
        return d1, -2.0 * t * d1
    if name == "linear":
        return np.ones_like(x), np.zeros_like(x)
    raise InvalidConfig(f"unknown activation {name!r}")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: str = "linear"

    def __post_init__(self):
        W = np.array(self.weight, dtype=float, ndmin=2)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if W.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"weight {W.shape} and bias {b.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", W)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class Network:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidConfig("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise DimensionMismatch(
                    f"layer output {prev.weight.shape[0]} does not feed input {nxt.weight.shape[1]}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dims": self.dims,
            "activations": [layer.activation for layer in self.layers],
            "weights": [layer.weight.ravel().tolist() for layer in self.layers],
            "biases": [layer.bias.tolist() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Network":
        dims = [int(v) for v in d["dims"]]
        layers = []
        for i, act in enumerate(d["activations"]):
            W = np.asarray(d["weights"][i], dtype=float).reshape(dims[i + 1], dims[i])
            layers.append(Layer(W, np.asarray(d["biases"][i], dtype=float), act))
        return cls(tuple(layers))


def count_parameters(net: Network) -> int:
    return int(sum(layer.weight.size + layer.bias.size for layer in net.layers))


def count_parameters_for(input_dim: int, widths: Sequence[int]) -> int:
    """Parameter count of a dense net with the given layer widths (output last)."""
    dims = [int(input_dim)] + [int(w) for w in widths]
    return sum(a * b + b for a, b in zip(dims, dims[1:]))


def init_network(
    input_dim: int,
    widths: Sequence[int],
    activation: str = "softplus",
    seed: int = 0,
    warm_start: np.ndarray | None = None,
) -> Network:
    """Glorot-uniform weights, zero biases, linear output layer.

    ``widths`` lists every layer width including the output.  ``warm_start``
    (length ``<= input_dim``) overwrites the leading rows of the first weight
    matrix with ``diag(warm_start)``.
    """
    if activation not in ACTIVATIONS:
        raise InvalidConfig(f"unknown activation {activation!r}")
    widths = [int(w) for w in widths]
    if not widths or min(widths) < 1 or input_dim < 1:
        raise InvalidConfig(f"invalid widths {widths}")
    rng = np.random.default_rng([int(seed), 0x1A17])
    dims = [int(input_dim)] + widths
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if i == 0 and warm_start is not None:
            d = np.asarray(warm_start, dtype=float).ravel()
            k = min(d.shape[0], fan_out, fan_in)
            W[:k] = 0.0
            W[np.arange(k), np.arange(k)] = d[:k]
        act = "linear" if i == len(widths) - 1 else activation
        layers.append(Layer(W, np.zeros(fan_out), act))
    return Network(tuple(layers))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _as_rows(net: Network, V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[None, :] if net.input_dim != 1 or V.shape[0] == 1 else V[:, None]
    if V.ndim != 2 or V.shape[1] != net.input_dim:
        raise DimensionMismatch(f"input has shape {V.shape}, network expects {net.input_dim} columns")
    if not np.all(np.isfinite(V)):
        raise ValueError("network input must be finite")
    return V


def _forward_cache(net: Network, A: np.ndarray):
    pre, post = [], [A]
    for layer in net.layers:
        Z = A @ layer.weight.T + layer.bias
        A = activate(layer.activation, Z)
        pre.append(Z)
        post.append(A)
    return pre, post


def forward(net: Network, V) -> np.ndarray:
    """Evaluate the network on the rows of ``V`` (M x input_dim)."""
    A = _as_rows(net, V)
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in net.layers:
            A = activate(layer.activation, A @ layer.weight.T + layer.bias)
    if not np.all(np.isfinite(A)):
        raise NonFiniteActivation("forward pass produced non-finite values")
    return A


def collapse_linear(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """``(M, c)`` with ``forward(net, V) == V @ M.T + c`` for an all-linear net."""
    if any(layer.activation != "linear" for layer in net.layers):
        raise InvalidConfig("only all-linear networks collapse to an affine map")
    M = np.eye(net.input_dim)
    c = np.zeros(net.input_dim)
    for layer in net.layers:
        M = layer.weight @ M
        c = layer.weight @ c + layer.bias
    return M, c


# ---------------------------------------------------------------------------
# input derivatives
# ---------------------------------------------------------------------------


def _point(net: Network, v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != net.input_dim:
        raise DimensionMismatch(f"point has {v.shape[0]} entries, network expects {net.input_dim}")
    return v


def jacobian(net: Network, v) -> np.ndarray:
    """``dG/dv`` at ``v``: ``W_L D_(L-1) W_(L-1) ... D_1 W_1`` (output_dim x input_dim)."""
    return jacobian_batch(net, _point(net, v)[None, :])[0]


def jacobian_batch(net: Network, V) -> np.ndarray:
    """Jacobians at every row of ``V``: array (M, output_dim, input_dim)."""
    A = _as_rows(net, V)
    J = np.broadcast_to(np.eye(net.input_dim), (A.shape[0], net.input_dim, net.input_dim))
    for layer in net.layers:
        Z = A @ layer.weight.T + layer.bias
        d1, _ = activation_derivatives(layer.activation, Z)
        J = d1[:, :, None] * np.einsum("oi,mij->moj", layer.weight, J)
        A = activate(layer.activation, Z)
    return J


def hessian_all(net: Network, v, symmetrize: bool = True) -> np.ndarray:
    """Input Hessians of every output at ``v``: array (output_dim, input_dim, input_dim).

    Uses the layer sum ``sum_l Z_l^T diag(g_l * sigma''(z_l)) Z_l`` where ``Z_l`` is
    the input Jacobian of layer ``l``'s pre-activations and ``g_l`` the derivative
    of the output with respect to that layer's activations.
    """
    a = _point(net, v)
    A = np.eye(net.input_dim)  # d a_l / d v
    Zs, d1s, d2s = [], [], []
    for layer in net.layers:
        z = layer.weight @ a + layer.bias
        d1, d2 = activation_derivatives(layer.activation, z)
        Zl = layer.weight @ A
        Zs.append(Zl)
        d1s.append(d1)
        d2s.append(d2)
        A = d1[:, None] * Zl
        a = activate(layer.activation, z)

    H = np.zeros((net.output_dim, net.input_dim, net.input_dim))
    G = np.eye(net.output_dim)  # d y / d a_l, rows per output
    for idx in range(len(net.layers) - 1, -1, -1):
        coeff = G * d2s[idx][None, :]
        if np.any(coeff):
            H += np.einsum("ki,ia,ib->kab", coeff, Zs[idx], Zs[idx])
        G = (G * d1s[idx][None, :]) @ net.layers[idx].weight
    if symmetrize:
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
    return H


def hessian(net: Network, v, output_index: int = 0, symmetrize: bool = True) -> np.ndarray:
    k = int(output_index)
    if not 0 <= k < net.output_dim:
        raise DimensionMismatch(f"output index {k} outside [0, {net.output_dim})")
    return hessian_all(net, v, symmetrize=symmetrize)[k]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l1_penalty: float = 0.0
    seed: int = 0
    init: str = "uniform_glorot"

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise InvalidConfig("epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise InvalidConfig("epsilon must be positive")
        if not self.l1_penalty >= 0:
            raise InvalidConfig("l1_penalty must be >= 0")
        if self.init not in INITS:
            raise InvalidConfig(f"unknown init {self.init!r}")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class TrainResult:
    net: Network
    loss_curve: tuple  # full-data MSE after each epoch
    initial_mse: float
    non_convergent: bool


def _mse(net_params, acts, V, U) -> float:
    A = V
    for (W, b), act in zip(net_params, acts):
        A = activate(act, A @ W.T + b)
    return float(np.mean((A - U) ** 2))


def _build(params, acts) -> Network:
    return Network(tuple(Layer(W.copy(), b.copy(), a) for (W, b), a in zip(params, acts)))


def train_adam(net: Network, V, U, cfg: TrainConfig) -> TrainResult:
    """Minimise ``mean((G(V) - U)^2) + l1 * sum|W|`` by mini-batch Adam.

    Batch order for epoch ``e`` is a permutation drawn from
    ``default_rng([cfg.seed, e])``, so runs are reproducible and independent
    of any other random state.  Biases are not penalised.
    """
    V = _as_rows(net, V)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape != (V.shape[0], net.output_dim):
        raise DimensionMismatch(f"targets {U.shape} do not match {(V.shape[0], net.output_dim)}")

    acts = [layer.activation for layer in net.layers]
    params = [(layer.weight.copy(), layer.bias.copy()) for layer in net.layers]
    m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    s = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    n, out = U.shape
    bs = min(int(cfg.batch_size), n)
    lam = float(cfg.l1_penalty)
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon
    step = 0

    initial = _mse(params, acts, V, U)
    curve: list[float] = []
    last_good = [(W.copy(), b.copy()) for W, b in params]
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(int(cfg.epochs)):
            order = np.random.default_rng([int(cfg.seed), epoch]).permutation(n)
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                A = V[idx]
                pre, post = [], [A]
                for (W, b), act in zip(params, acts):
                    Z = A @ W.T + b
                    A = activate(act, Z)
                    pre.append(Z)
                    post.append(A)
                delta = 2.0 * (A - U[idx]) / (idx.shape[0] * out)
                step += 1
                c1 = 1.0 - b1**step
                c2 = 1.0 - b2**step
                for li in range(len(params) - 1, -1, -1):
                    d1, _ = activation_derivatives(acts[li], pre[li])
                    delta = delta * d1
                    W, b = params[li]
                    gW = delta.T @ post[li]
                    if lam:
                        gW = gW + lam * np.sign(W)
                    gb = delta.sum(axis=0)
                    delta = delta @ W
                    for j, (p, g) in enumerate(((W, gW), (b, gb))):
                        mj, sj = m[li][j], s[li][j]
                        mj *= b1
                        mj += (1 - b1) * g
                        sj *= b2
                        sj += (1 - b2) * g * g
                        p -= lr * (mj / c1) / (np.sqrt(sj / c2) + eps)
            loss = _mse(params, acts, V, U)
            if not np.isfinite(loss) or not all(
                np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in params
            ):
                raise NonFiniteLoss(
                    f"training diverged in epoch {epoch}",
                    net=_build(last_good, acts),
                    loss_curve=tuple(curve),
                )
            curve.append(loss)
            last_good = [(W.copy(), b.copy()) for W, b in params]

    # an increase below 1e-12 of the target's mean square is rounding, not divergence
    non_convergent = curve[-1] > initial + 1e-12 * float(np.mean(U**2))
    if non_convergent:
        warnings.warn(
            f"final MSE {curve[-1]:.6g} exceeds initial {initial:.6g}", NonConvergent, stacklevel=2
        )
    return TrainResult(_build(params, acts), tuple(curve), initial, non_convergent)
