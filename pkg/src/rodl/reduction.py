"""Dominant-mode selection, truncated operators and error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nlmc import CoarseSystem
from .ronet import DimMismatch, SubNetParams, forward_sub


class EmptyInputs(ValueError):
    pass


class BadS(ValueError):
    pass


class ZeroTruth(ValueError):
    pass


def rel_l2(pred, truth) -> float:
    """``||pred - truth||_2 / ||truth||_2``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    nt = np.linalg.norm(truth)
    if nt == 0:
        raise ZeroTruth("relative error undefined for a zero reference")
    return float(np.linalg.norm(pred - truth) / nt)


def rel_l2_rows(pred, truth) -> np.ndarray:
    """Row-wise relative errors for batches ``(n, m)``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    nt = np.linalg.norm(truth, axis=1)
    if np.any(nt == 0):
        raise ZeroTruth("relative error undefined for a zero reference row")
    return np.linalg.norm(pred - truth, axis=1) / nt


# ---------------------------------------------------------------------------
# dominance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DominanceOrder:
    S: np.ndarray       # per-coordinate score, original index order
    order: np.ndarray   # coordinates sorted by descending score

    @property
    def sorted_scores(self) -> np.ndarray:
        return self.S[self.order]


def dominance_from_codes(O) -> DominanceOrder:
    """``S_j = (1/L) sqrt(sum_i O_ij^2)`` with a stable descending sort."""
    O = np.atleast_2d(np.asarray(O, dtype=float))
    L = O.shape[0]
    if L == 0:
        raise EmptyInputs("dominance needs at least one sample")
    S = np.sqrt(np.sum(O * O, axis=0)) / L
    order = np.argsort(-S, kind="stable")
    return DominanceOrder(S, order)


def dominance(p: SubNetParams, inputs) -> DominanceOrder:
    """Rank W2 coordinates by the size of ``W2^T NN(x)`` over the inputs."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if X.shape[0] == 0 or X.size == 0:
        raise EmptyInputs("dominance needs at least one sample")
    y, _ = forward_sub(p, X)
    return dominance_from_codes(y @ p.W2)


# ---------------------------------------------------------------------------
# reduced operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReducedOperator:
    s: int
    W2s: np.ndarray
    W1: np.ndarray
    b: np.ndarray
    order: DominanceOrder

    @property
    def kept(self) -> np.ndarray:
        return self.order.order[:self.s]


def _affine(p: SubNetParams) -> tuple[np.ndarray, np.ndarray]:
    if p.depth != 1:
        raise DimMismatch("truncation is defined for the linear sub-network only")
    return p.W1[0], p.b[0]


def truncate(p: SubNetParams, order: DominanceOrder, s: int) -> ReducedOperator:
    """Zero every W2 column outside the ``s`` most dominant coordinates."""
    m = p.m
    if not (isinstance(s, (int, np.integer)) and 1 <= s <= m):
        raise BadS(f"s must be an integer in 1..{m}, got {s!r}")
    W1, b = _affine(p)
    W2s = np.zeros_like(p.W2)
    keep = order.order[:s]
    W2s[:, keep] = p.W2[:, keep]
    return ReducedOperator(int(s), W2s, W1, b, order)


def apply_reduced(op: ReducedOperator, x) -> np.ndarray:
    """``W2s (W1 x + b)`` for a vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.W1.shape[1]:
        raise DimMismatch(f"input has length {x.shape[-1]}, operator expects {op.W1.shape[1]}")
    return (x @ op.W1.T + op.b) @ op.W2s.T


def linear_operator(p: SubNetParams, x) -> np.ndarray:
    """Untruncated ``W2 W1 x + W2 b``."""
    W1, b = _affine(p)
    return (np.asarray(x, dtype=float) @ W1.T + b) @ p.W2.T


def scaled_s_grid(m: int, base=(5, 10, 20, 40, 80, 160, 320), reference: int = 445) -> list[int]:
    """Retained-mode counts proportional to a reference dimension, always ending at ``m``."""
    if m < 1:
        raise BadS("m must be positive")
    grid = {min(m, max(1, int(round(k * m / reference)))) for k in base}
    grid.add(m)
    return sorted(grid)


@dataclass
class TruncationCurve:
    s_values: list[int]
    errors: np.ndarray       # (n_s, n_samples) relative errors against the truth
    nn_errors: np.ndarray    # (n_samples,) full network errors
    to_nn: np.ndarray        # (n_s, n_samples) ||L_s - NN|| / ||NN||

    @property
    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    def error_at(self, s: int) -> float:
        return float(self.mean[self.s_values.index(s)])

    def max_uptick(self) -> float:
        mu = self.mean
        return float(max([0.0] + list(np.diff(mu))))


def truncation_error_curve(p: SubNetParams, order: DominanceOrder, inputs, truth,
                           s_values=None) -> TruncationCurve:
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.atleast_2d(np.asarray(truth, dtype=float))
    if X.shape[0] == 0:
        raise EmptyInputs("no test pairs")
    s_values = list(s_values) if s_values is not None else scaled_s_grid(p.m)
    nn, _ = forward_sub(p, X)
    errs, to_nn = [], []
    for s in s_values:
        pred = apply_reduced(truncate(p, order, int(s)), X)
        errs.append(rel_l2_rows(pred, Y))
        to_nn.append(rel_l2_rows(pred, nn))
    return TruncationCurve([int(s) for s in s_values], np.array(errs), rel_l2_rows(nn, Y), np.array(to_nn))


# ---------------------------------------------------------------------------
# eigen-subspace comparison
# ---------------------------------------------------------------------------

@dataclass
class EigenComparison:
    lam: np.ndarray
    T_true: np.ndarray
    T_learned: np.ndarray
    r: int

    def block_distance(self, k: int | None = None) -> float:
        k = self.r if k is None else k
        return float(np.linalg.norm(self.T_learned[:k, :k] - self.T_true[:k, :k]))

    def block_norm(self, k: int | None = None) -> float:
        k = self.r if k is None else k
        return float(np.linalg.norm(self.T_true[:k, :k]))

    def full_distance(self) -> float:
        return float(np.linalg.norm(self.T_learned - self.T_true))

    def learned_diagonal(self) -> np.ndarray:
        return np.diag(self.T_learned).copy()

    def off_diagonal_true(self) -> float:
        return float(np.max(np.abs(self.T_true - np.diag(np.diag(self.T_true)))))


def eigen_subspace_compare(cs: CoarseSystem, W, r: int) -> EigenComparison:
    """Compare ``W_hat`` with a learned linear map ``W`` in the eigenbasis of ``W_hat``.

    With ``V`` M-orthonormal, ``V^T M V = I`` and the similarity transform
    ``V^T M X V`` of ``X = W_hat`` is exactly ``diag(lam)``. ``W`` is a
    matrix or a linear sub-network (``W2 W1`` is used).
    """
    if isinstance(W, SubNetParams):
        W = W.W2 @ _affine(W)[0]
    W = np.asarray(W, dtype=float)
    if W.shape != (cs.m, cs.m):
        raise DimMismatch(f"operator shape {W.shape} does not match m={cs.m}")
    if not 1 <= r <= cs.m:
        raise BadS(f"r must lie in 1..{cs.m}")
    lam, V = cs.eigen()
    VM = V.T @ cs.M
    return EigenComparison(lam, VM @ cs.W_hat @ V, VM @ W @ V, int(r))


# ---------------------------------------------------------------------------
# sparsity profile
# ---------------------------------------------------------------------------

@dataclass
class SparsityProfile:
    quadratic_avg: np.ndarray   # descending root-mean-square of transformed coefficients
    tail: np.ndarray            # eps_emp(s) for s = 0..m

    def eps(self, s: int) -> float:
        return float(self.tail[s])


def sparsity_profile(W2, Y) -> SparsityProfile:
    """Coefficients ``W2^T y`` of targets ``Y`` (rows) and their empirical tail.

    ``eps_emp(s)`` is the largest residual ``||c - c_s||_2`` over samples,
    where ``c_s`` keeps the ``s`` largest-magnitude entries of each ``c``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[0] == 0:
        raise EmptyInputs("no samples")
    C = Y @ np.asarray(W2, dtype=float)
    q = np.sqrt(np.mean(C * C, axis=0))
    mag2 = np.sort(C * C, axis=1)                     # ascending per sample
    csum = np.concatenate([np.zeros((C.shape[0], 1)), np.cumsum(mag2, axis=1)], axis=1)
    m = C.shape[1]
    tail = np.sqrt(np.max(csum[:, m - np.arange(m + 1)], axis=0))
    return SparsityProfile(np.sort(q)[::-1], tail)
