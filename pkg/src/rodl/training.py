"""Reverse-mode gradients of the stacked loss, Adam/SGD, finite-difference checks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ronet import (LossReport, RonetModel, SubNetParams, Tape, _check_batch, activation, forward_model,
                    forward_sub, inner, loss, orth_residual)
from .numerics import rng_stream


class Diverged(RuntimeError):
    pass


Gradients = list[list[np.ndarray]]   # per layer, same order as SubNetParams.arrays()


def _penalty_grad(W2: np.ndarray) -> np.ndarray:
    """Subgradient of ``sum |W2^T W2 - I|`` with sign(0) = 0."""
    E = np.sign(W2.T @ W2 - np.eye(W2.shape[1]))
    return W2 @ (E + E.T)


def _backward_sub(p: SubNetParams, tape: Tape, G: np.ndarray):
    """Backpropagate ``G = dL/dy`` through one sub-network.

    Returns ``(grads, dL/dx)`` with grads ordered like ``p.arrays()``.
    """
    dW2 = G.T @ tape.s
    ds = G @ p.W2
    d = ds * (np.abs(tape.z) > p.gamma)   # derivative of S_gamma, 0 on the dead zone and at kinks
    _, dsigma = activation(p.activation)
    dW1 = [None] * p.depth
    db = [None] * p.depth
    for k in range(p.depth - 1, -1, -1):
        if k < p.depth - 1:
            d = d * dsigma(tape.pre[k])
        dW1[k] = d.T @ tape.inputs[k]
        db[k] = d.sum(axis=0)
        d = d @ p.W1[k]
    return [*dW1, *db, dW2], d


def backprop(model: RonetModel, traj) -> tuple[LossReport, Gradients]:
    """Loss report and exact gradients for a batch of trajectories ``(B, T+1, m)``."""
    traj = _check_batch(model, traj)
    B = traj.shape[0]
    outs, tapes = forward_model(model, traj[:, 0])
    misfit = [float(np.mean(np.sum((o - traj[:, t + 1]) ** 2, axis=1))) for t, o in enumerate(outs)]
    penalty = [orth_residual(p.W2) for p in model.layers]
    grads: Gradients = [None] * model.T
    upstream = np.zeros_like(outs[-1])
    for t in range(model.T - 1, -1, -1):
        G = upstream + (2.0 / B) * (outs[t] - traj[:, t + 1])
        g, upstream = _backward_sub(model.layers[t], tapes[t], G)
        if model.eta[t]:
            g[-1] = g[-1] + model.eta[t] * _penalty_grad(model.layers[t].W2)
        grads[t] = g
    return LossReport(misfit, penalty, list(model.eta)), grads


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def _near_kink(model: RonetModel, traj, margin: float, penalty_layer: int | None = None) -> bool:
    """Is any threshold input (or relu pre-activation) within ``margin`` of its kink?

    Penalty entries are only inspected for ``penalty_layer``: they depend on
    that layer's W2 alone, so they cannot be crossed by other perturbations.
    """
    _, tapes = forward_model(model, traj[:, 0])
    for p, tape in zip(model.layers, tapes):
        if np.any(np.abs(np.abs(tape.z) - p.gamma) < margin):
            return True
        if p.activation == "relu" and any(np.any(np.abs(h) < margin) for h in tape.pre[:-1]):
            return True
    if penalty_layer is not None and model.eta[penalty_layer]:
        W2 = model.layers[penalty_layer].W2
        if np.any(np.abs(W2.T @ W2 - np.eye(W2.shape[1])) < margin):
            return True
    return False


def fd_check(model: RonetModel, traj, h: float = 1e-6, kink_margin: float = 1e-4, grad_hook=None) -> float:
    """Max relative deviation between backprop and central differences.

    Every parameter coordinate is perturbed by ``+-h``; coordinates whose
    perturbation brings any threshold input within ``kink_margin`` of
    ``+-gamma`` (or, for W2, a penalty entry within ``kink_margin`` of zero)
    are skipped. Deviation per array is ``||fd - bp||_inf / max(||fd||_inf,
    ||bp||_inf)``; the maximum over arrays is returned. With
    ``kink_margin=0`` nothing is skipped and kinks may dominate.
    ``grad_hook(grads)`` may replace the analytic gradients (negative controls).
    Raises ValueError when every coordinate had to be skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    traj = _check_batch(model, traj)
    _, grads = backprop(model, traj)
    if grad_hook is not None:
        grads = grad_hook(grads)
    work = model.copy()
    worst = 0.0
    checked = 0
    for t, p in enumerate(work.layers):
        arrays = p.arrays()
        for a, arr in enumerate(arrays):
            pen = t if a == len(arrays) - 1 else None
            fd = np.zeros_like(arr)
            keep = np.zeros(arr.shape, dtype=bool)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                skip = kink_margin > 0 and _near_kink(work, traj, kink_margin, pen)
                lp = loss(work, traj).total
                arr[idx] = old - h
                skip = skip or (kink_margin > 0 and _near_kink(work, traj, kink_margin, pen))
                lm = loss(work, traj).total
                arr[idx] = old
                if not skip:
                    fd[idx] = (lp - lm) / (2.0 * h)
                    keep[idx] = True
            checked += int(keep.sum())
            if not keep.any():
                continue
            bp = grads[t][a]
            num = np.max(np.abs(fd[keep] - bp[keep]))
            den = max(np.max(np.abs(fd[keep])), np.max(np.abs(bp[keep])))
            if den > 0:
                worst = max(worst, num / den)
    if checked == 0:
        raise ValueError("every coordinate lies within kink_margin of a kink; nothing was checked")
    return worst


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def random_orthogonal(m: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((m, m)))
    return Q * np.sign(np.diag(R))


def init_subnet(m: int, rng: np.random.Generator, depth: int = 1, width: int | None = None,
                activation_name: str = "tanh", noise: float = 1e-2, w2: str = "orthogonal",
                gamma: float = 0.0) -> SubNetParams:
    """W1 = I + noise (square layers), b = 0, W2 random orthogonal.

    Rectangular hidden layers (``width != m``) use scaled Gaussian weights
    padded with the identity on the overlapping block. ``w2="gaussian"``
    starts W2 from an unnormalized Gaussian matrix instead.
    """
    width = width or m
    dims = [m] + [width] * (depth - 1) + [m]
    W1, b = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        w = noise * rng.standard_normal((dout, din))
        k = min(din, dout)
        w[:k, :k] += np.eye(k)
        W1.append(w)
        b.append(np.zeros(dout))
    if w2 == "orthogonal":
        W2 = random_orthogonal(m, rng)
    elif w2 == "gaussian":
        W2 = rng.standard_normal((m, m)) / np.sqrt(m)
    elif w2 == "identity":
        W2 = np.eye(m)
    else:
        raise ValueError(f"unknown W2 init {w2!r}")
    return SubNetParams(W1, b, W2, gamma, activation_name if depth > 1 else "identity")


def init_model(m: int, T: int, seed: int, eta: float = 1.0, **kw) -> RonetModel:
    rng = rng_stream(seed, 101)
    return RonetModel([init_subnet(m, rng, **kw) for _ in range(T)], [eta] * T)


def calibrate_gamma(model: RonetModel, traj, scale: float = 1e-3) -> RonetModel:
    """Freeze ``gamma_t = scale * median |inner_t(o^t)|`` from one forward pass."""
    traj = np.asarray(traj, dtype=float)
    o = traj[:, 0]
    for p in model.layers:
        p.gamma = 0.0
        p.gamma = float(scale * np.median(np.abs(inner(p, o))))
        o, _ = forward_sub(p, o)
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    gamma_scale: float = 1e-3
    early_stop_tol: float = 1e-8
    early_stop_patience: int = 20
    orth_report: float = 1e-2   # flag when ||W2^T W2 - I||_1 / m^2 exceeds this

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("step size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam moments must lie in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    loss_curve: list[float]
    best_epoch: int
    orth_residuals: list[float]
    orth_flagged: bool
    wall_time: float
    seed: int
    gammas: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"loss_curve": self.loss_curve, "best_epoch": self.best_epoch,
                "orth_residuals": self.orth_residuals, "orth_flagged": self.orth_flagged,
                "wall_time": self.wall_time, "seed": self.seed, "gammas": self.gammas}


class Adam:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        c = self.cfg
        self.k += 1
        a = c.lr * np.sqrt(1.0 - c.beta2 ** self.k) / (1.0 - c.beta1 ** self.k)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= a * m / (np.sqrt(v) + c.eps * np.sqrt(1.0 - c.beta2 ** self.k))


class SGD:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            p -= self.cfg.lr * g


def train(model: RonetModel, data, cfg: TrainConfig = TrainConfig(), calibrate: bool = True,
          callback=None) -> tuple[RonetModel, TrainReport]:
    """Minibatch training; returns the best-epoch parameters.

    ``data`` is a TrajectoryDataset or an array ``(count, T+1, m)``. When
    ``calibrate`` is set, thresholds are frozen from the initial forward pass
    via ``cfg.gamma_scale``; otherwise the model's own gammas are kept.
    """
    traj = np.asarray(getattr(data, "trajectories", data), dtype=float)
    traj = _check_batch(model, traj)
    start = time.perf_counter()
    model = model.copy()
    if calibrate:
        calibrate_gamma(model, traj, cfg.gamma_scale)
    params = model.arrays()
    opt = Adam(params, cfg) if cfg.optimizer == "adam" else SGD(params, cfg)
    rng = rng_stream(cfg.seed, 202)
    n = traj.shape[0]
    initial = loss(model, traj).total
    best, best_epoch, best_params = initial, -1, [p.copy() for p in params]
    curve: list[float] = []
    stall = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            _, grads = backprop(model, traj[order[s:s + cfg.batch_size]])
            opt.step(params, [g for layer in grads for g in layer])
        total = loss(model, traj).total
        if not np.isfinite(total) or total > 1e6 * max(initial, 1e-300):
            raise Diverged(f"epoch {epoch}: loss {total:.3e} vs initial {initial:.3e}")
        curve.append(total)
        if callback is not None:
            callback(epoch, total)
        improved = best - total
        if total < best:
            best, best_epoch = total, epoch
            for dst, src in zip(best_params, params):
                dst[...] = src
        if improved < cfg.early_stop_tol * max(abs(best), 1e-300):
            stall += 1
            if stall >= cfg.early_stop_patience:
                break
        else:
            stall = 0
    for dst, src in zip(params, best_params):
        dst[...] = src
    orth = [orth_residual(p.W2) for p in model.layers]
    flagged = any(r / p.m ** 2 > cfg.orth_report for r, p in zip(orth, model.layers))
    report = TrainReport(curve, best_epoch, orth, flagged, time.perf_counter() - start, cfg.seed,
                         [p.gamma for p in model.layers])
    return model, report
