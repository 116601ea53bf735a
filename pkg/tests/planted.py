"""Planted one-step problems with a known sparsifying basis."""
import numpy as np

from rodl.training import random_orthogonal


def planted_pairs(m=20, s=5, n=400, seed=0, support=None, Q=None, tail=0.0):
    """Pairs ``(x, y)`` with ``y = W_hat x + b_hat`` and ``Q^T y`` s-sparse plus a tail.

    Returns ``(traj, Q, W_hat, b_hat)`` with ``traj`` of shape ``(n, 2, m)``.
    """
    rng = np.random.default_rng(seed)
    Q = random_orthogonal(m, rng) if Q is None else Q
    W_hat = Q @ np.diag(np.linspace(0.95, 0.4, m)) @ Q.T
    b_hat = 0.05 * Q[:, 0]
    c = np.zeros((n, m))
    for i in range(n):
        supp = support if support is not None else rng.choice(m, s, replace=False)
        c[i, supp] = rng.uniform(0.5, 2.0, len(supp)) * rng.choice([-1, 1], len(supp))
    if tail:
        c += tail / np.sqrt(m) * rng.uniform(-1, 1, (n, m))
    Y = c @ Q.T
    X = np.linalg.solve(W_hat, (Y - b_hat).T).T
    return np.stack([X, Y], axis=1), Q, W_hat, b_hat
