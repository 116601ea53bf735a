"""Repository-wide numerical tolerances, gathered in one record."""
from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    solve: float = 1e-10            # dense solve: ||Ax - b||_inf <= solve * (1 + ||b||_inf)
    sparse_solve: float = 1e-8      # sparse solve: ||Ax - b||_2 <= sparse_solve * (1 + ||b||_2)
    pivot: float = 1e-14            # relative pivot floor for SingularMatrix
    eig_residual: float = 1e-8
    eig_orthogonality: float = 1e-10
    direct_max_unknowns: int = 20_000
    iterative_maxiter: int = 5_000
    constraint: float = 1e-8        # NLMC average constraints
    gram_condition: float = 1e12    # RankDeficient threshold on the coarse mass matrix
    orthogonality: float = 1e-6     # prox check requires ||W2^T W2 - I||_max below this
    reg_shift: float = 1e-8         # diagonal shift for pure-Neumann stationary solves


TOL = Tolerances()
