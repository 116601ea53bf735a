"""Soft-thresholding reduced-order networks.

A sub-network maps ``x -> W2 @ S_gamma(inner(x))`` where ``inner`` is an
affine map (linear process) or a small feed-forward stack whose last layer
is affine. Sub-networks are stacked, one per time step. Batches are rows:
``X`` has shape ``(batch, m)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TOL
from .numerics import load_container, save_container


class NegativeGamma(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class NotOrthogonal(ValueError):
    pass


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def soft_threshold(x, gamma: float) -> np.ndarray:
    """Entrywise shrinkage ``sign(x) * max(|x| - gamma, 0)``."""
    if gamma < 0:
        raise NegativeGamma(f"gamma must be nonnegative, got {gamma}")
    x = np.asarray(x, dtype=float)
    return np.where(x >= gamma, x - gamma, np.where(x <= -gamma, x + gamma, 0.0))


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def soft_threshold_via_relu(x, gamma: float) -> np.ndarray:
    """``ReLU(x - gamma) - ReLU(-x - gamma)``."""
    if gamma < 0:
        raise NegativeGamma(f"gamma must be nonnegative, got {gamma}")
    x = np.asarray(x, dtype=float)
    return relu(x - gamma) - relu(-x - gamma)


def soft_threshold_matrix_form(x, gamma: float) -> np.ndarray:
    """``J ReLU(J^T x - gamma 1)`` with ``J = [I, -I]``."""
    if gamma < 0:
        raise NegativeGamma(f"gamma must be nonnegative, got {gamma}")
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    J = np.hstack([np.eye(m), -np.eye(m)])
    return relu(x @ J - gamma) @ J.T


_ACT = {
    "identity": (lambda h: h, lambda h: np.ones_like(h)),
    "tanh": (np.tanh, lambda h: 1.0 - np.tanh(h) ** 2),
    "relu": (relu, lambda h: (h > 0).astype(float)),
}


def activation(name: str):
    try:
        return _ACT[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class SubNetParams:
    """Operation stack ``(W1[k], b[k])``, basis layer ``W2`` and threshold ``gamma``."""
    W1: list[np.ndarray]
    b: list[np.ndarray]
    W2: np.ndarray
    gamma: float = 0.0
    activation: str = "identity"

    def __post_init__(self):
        self.W1 = [np.asarray(w, dtype=float) for w in self.W1]
        self.b = [np.asarray(v, dtype=float) for v in self.b]
        self.W2 = np.asarray(self.W2, dtype=float)
        if self.gamma < 0:
            raise NegativeGamma(f"gamma must be nonnegative, got {self.gamma}")
        activation(self.activation)
        if len(self.W1) == 0 or len(self.W1) != len(self.b):
            raise DimMismatch("operation stack needs matching W1 and b lists")
        m = self.W2.shape[0]
        if self.W2.shape != (m, m):
            raise DimMismatch(f"W2 must be square, got {self.W2.shape}")
        width = self.W1[0].shape[1]
        if width != m:
            raise DimMismatch(f"first operation layer takes {width} inputs, expected {m}")
        for k, (w, v) in enumerate(zip(self.W1, self.b)):
            if w.shape[1] != width or v.shape != (w.shape[0],):
                raise DimMismatch(f"operation layer {k} shapes {w.shape}, {v.shape} do not chain")
            width = w.shape[0]
        if width != m:
            raise DimMismatch(f"operation stack ends with width {width}, expected {m}")

    @property
    def m(self) -> int:
        return self.W2.shape[0]

    @property
    def depth(self) -> int:
        return len(self.W1)

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: W1..., b..., W2."""
        return [*self.W1, *self.b, self.W2]

    def copy(self) -> "SubNetParams":
        return SubNetParams([w.copy() for w in self.W1], [v.copy() for v in self.b], self.W2.copy(),
                            self.gamma, self.activation)

    @classmethod
    def linear(cls, W1, b, W2, gamma=0.0) -> "SubNetParams":
        return cls([W1], [b], W2, gamma, "identity")


@dataclass
class RonetModel:
    layers: list[SubNetParams]
    eta: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise DimMismatch("a model needs at least one sub-network")
        if not self.eta:
            self.eta = [1.0] * len(self.layers)
        if len(self.eta) != len(self.layers):
            raise DimMismatch("one penalty weight per layer required")
        if len({p.m for p in self.layers}) != 1:
            raise DimMismatch("all sub-networks must share the dimension m")

    @property
    def m(self) -> int:
        return self.layers[0].m

    @property
    def T(self) -> int:
        return len(self.layers)

    def arrays(self) -> list[np.ndarray]:
        return [a for p in self.layers for a in p.arrays()]

    def copy(self) -> "RonetModel":
        return RonetModel([p.copy() for p in self.layers], list(self.eta))

    def save(self, path) -> Path:
        arrays, layers = {}, []
        for t, p in enumerate(self.layers):
            for k, (w, v) in enumerate(zip(p.W1, p.b)):
                arrays[f"l{t}_W1_{k}"] = w
                arrays[f"l{t}_b_{k}"] = v
            arrays[f"l{t}_W2"] = p.W2
            layers.append({"depth": p.depth, "gamma": p.gamma, "activation": p.activation,
                           "shapes": [list(w.shape) for w in p.W1]})
        return save_container(path, "ronet-checkpoint", arrays, {"layers": layers, "eta": list(self.eta)})

    @classmethod
    def load(cls, path) -> "RonetModel":
        arr, meta = load_container(path, "ronet-checkpoint")
        layers = []
        for t, info in enumerate(meta["layers"]):
            d = info["depth"]
            layers.append(SubNetParams([arr[f"l{t}_W1_{k}"] for k in range(d)],
                                       [arr[f"l{t}_b_{k}"] for k in range(d)],
                                       arr[f"l{t}_W2"], info["gamma"], info["activation"]))
        return cls(layers, [float(e) for e in meta["eta"]])


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    inputs: list[np.ndarray]   # input of each operation layer
    pre: list[np.ndarray]      # pre-activation of each operation layer
    z: np.ndarray              # input to the soft threshold
    s: np.ndarray              # thresholded code


def inner(p: SubNetParams, X) -> np.ndarray:
    return _inner(p, np.atleast_2d(X))[0]


def _inner(p: SubNetParams, X: np.ndarray):
    sigma, _ = activation(p.activation)
    inputs, pre = [], []
    a = X
    for k, (w, v) in enumerate(zip(p.W1, p.b)):
        inputs.append(a)
        h = a @ w.T + v
        pre.append(h)
        a = sigma(h) if k < p.depth - 1 else h
    return a, inputs, pre


def forward_sub(p: SubNetParams, x) -> tuple[np.ndarray, Tape]:
    """``y = W2 S_gamma(inner(x))`` for a vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.m:
        raise DimMismatch(f"input has length {x.shape[-1]}, sub-network expects {p.m}")
    X = np.atleast_2d(x)
    z, inputs, pre = _inner(p, X)
    s = soft_threshold(z, p.gamma)
    y = s @ p.W2.T
    tape = Tape(inputs, pre, z, s)
    return (y[0] if x.ndim == 1 else y), tape


def forward_model(model: RonetModel, x0) -> tuple[list[np.ndarray], list[Tape]]:
    """Outputs ``o^1 .. o^T`` of the stacked sub-networks."""
    outs, tapes = [], []
    o = np.asarray(x0, dtype=float)
    for p in model.layers:
        o, tape = forward_sub(p, o)
        outs.append(o)
        tapes.append(tape)
    return outs, tapes


def predict(model: RonetModel, x0) -> np.ndarray:
    """Stacked predictions with shape ``(batch, T, m)``."""
    outs, _ = forward_model(model, np.atleast_2d(x0))
    return np.stack(outs, axis=1)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def orth_residual(W2) -> float:
    """Entrywise l1 norm of ``W2^T W2 - I``."""
    W2 = np.asarray(W2)
    return float(np.abs(W2.T @ W2 - np.eye(W2.shape[1])).sum())


@dataclass
class LossReport:
    misfit: list[float]
    penalty: list[float]
    eta: list[float]

    @property
    def total(self) -> float:
        return float(sum(self.misfit) + sum(e * p for e, p in zip(self.eta, self.penalty)))


def _check_batch(model: RonetModel, traj) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    if traj.ndim == 2:
        traj = traj[None]
    if traj.shape[0] == 0:
        raise EmptyBatch("loss needs at least one trajectory")
    if traj.shape[1] != model.T + 1 or traj.shape[2] != model.m:
        raise DimMismatch(f"trajectories {traj.shape} do not fit a {model.T}-layer model with m={model.m}")
    return traj


def loss(model: RonetModel, traj) -> LossReport:
    """Misfit ``mean_i sum_t ||o^t - x^t||^2`` per layer plus orthogonality penalties.

    ``traj`` has shape ``(batch, T+1, m)``; index 0 is the network input.
    """
    traj = _check_batch(model, traj)
    outs, _ = forward_model(model, traj[:, 0])
    misfit = [float(np.mean(np.sum((o - traj[:, t + 1]) ** 2, axis=1))) for t, o in enumerate(outs)]
    penalty = [orth_residual(p.W2) for p in model.layers]
    return LossReport(misfit, penalty, list(model.eta))


# ---------------------------------------------------------------------------
# prox characterization
# ---------------------------------------------------------------------------

@dataclass
class ProxReport:
    max_violation: float
    orth_error: float
    recon_error: float   # max |W2^T y - code|, zero up to rounding for orthogonal W2


def prox_characterization_check(p: SubNetParams, x) -> ProxReport:
    """Subgradient optimality of the code behind ``y = forward_sub(x)``.

    With orthogonal ``W2`` the output minimizes
    ``1/2 ||W2^T y - c||^2 + gamma ||W2^T y||_1`` where ``c = inner(x)``.
    The code ``z = W2^T y`` must satisfy ``c - z in gamma * d|z|``; the
    condition is evaluated on the stored code and the recovery error
    ``W2^T y - z`` is reported separately.
    """
    err = float(np.max(np.abs(p.W2.T @ p.W2 - np.eye(p.m))))
    if err > TOL.orthogonality:
        raise NotOrthogonal(f"||W2^T W2 - I||_max = {err:.3e} exceeds {TOL.orthogonality:.0e}")
    y, tape = forward_sub(p, x)
    c, z = tape.z, tape.s
    active = z != 0
    v_active = np.abs(z - c + p.gamma * np.sign(z))
    v_dead = np.maximum(np.abs(c) - p.gamma, 0.0)
    viol = np.where(active, v_active, v_dead)
    recon = float(np.max(np.abs(np.atleast_2d(y) @ p.W2 - z)))
    return ProxReport(float(np.max(viol)), err, recon)
