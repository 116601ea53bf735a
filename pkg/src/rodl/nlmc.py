"""Non-local multicontinuum (NLMC) basis and the coarse one-step map.

Each coarse block carries one matrix continuum plus one continuum per
fracture segment inside it. Continua are numbered matrix-first (block
order), then fracture segments ordered by (block, fracture). The basis for
continuum ``c`` of block ``i`` minimizes the energy on the oversampled
region ``K_i^+`` subject to unit average on ``c`` and zero average on every
other continuum of ``K_i^+``; it vanishes on the part of the region
boundary interior to the domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .config import TOL
from .grid import FineSystem, MeshPair, edge_blocks, restrict_to_region
from .numerics import (NumericsError, SingularMatrix, factorize_sparse, load_container, lu_solve,
                       save_container, sym_eigen)


class SaddleSingular(NumericsError):
    pass


class RankDeficient(NumericsError):
    pass


@dataclass(frozen=True)
class ContinuumIndex:
    n_blocks: int
    seg_block: np.ndarray      # coarse block of each fracture segment
    seg_fracture: np.ndarray   # fracture id of each fracture segment
    edge_segment: np.ndarray   # segment id of each fracture fine edge

    @property
    def m(self) -> int:
        return self.n_blocks + self.seg_block.size

    @property
    def n_segments(self) -> int:
        return self.seg_block.size

    def fractures_in(self, block: int) -> np.ndarray:
        """L_j: count is ``len`` of the returned segment ids of block ``block``."""
        return np.flatnonzero(self.seg_block == block)

    def continua_of(self, block: int) -> list[int]:
        return [block] + [self.n_blocks + s for s in self.fractures_in(block)]

    def block_of(self) -> np.ndarray:
        """Home block of every continuum."""
        return np.concatenate([np.arange(self.n_blocks), self.seg_block])

    @classmethod
    def build(cls, mesh: MeshPair, frac_edges: np.ndarray, frac_owner: np.ndarray) -> "ContinuumIndex":
        if len(frac_edges) == 0:
            z = np.zeros(0, dtype=np.int64)
            return cls(mesh.n_blocks, z, z, z)
        blk = edge_blocks(mesh, frac_edges)
        pairs, inv = np.unique(np.column_stack([blk, frac_owner]), axis=0, return_inverse=True)
        return cls(mesh.n_blocks, pairs[:, 0].copy(), pairs[:, 1].copy(), inv.ravel().astype(np.int64))


def constraint_matrix(fine: FineSystem, index: ContinuumIndex) -> sp.csr_matrix:
    """Averages of a fine nodal field over every continuum, as an (m, n_nodes) matrix.

    Block averages integrate the Q1 field exactly (|cell|/4 per corner);
    fracture averages use the trapezoid rule along the fracture edges, also
    exact for the piecewise-linear trace.
    """
    mesh = fine.mesh
    cn = mesh.cell_nodes()
    cb = mesh.cell_block()
    area = mesh.hx * mesh.hy
    block_area = area * mesh.refine ** 2
    rows = np.repeat(cb, 4)
    Cm = sp.coo_matrix((np.full(rows.size, area / 4.0 / block_area), (rows, cn.ravel())),
                       shape=(mesh.n_blocks, mesh.n_nodes)).tocsr()
    if index.n_segments == 0:
        return Cm
    xy = mesh.node_xy()
    e = fine.frac_edges
    length = np.linalg.norm(xy[e[:, 1]] - xy[e[:, 0]], axis=1)
    seg_len = np.bincount(index.edge_segment, weights=length, minlength=index.n_segments)
    w = 0.5 * length / seg_len[index.edge_segment]
    Cf = sp.coo_matrix((np.repeat(w, 2), (np.repeat(index.edge_segment, 2), e.ravel())),
                       shape=(index.n_segments, mesh.n_nodes)).tocsr()
    return sp.vstack([Cm, Cf]).tocsr()


@dataclass
class MultiscaleBasis:
    Phi: sp.csc_matrix          # (n_nodes, m)
    index: ContinuumIndex
    layers: int
    constraints: sp.csr_matrix  # (m, n_nodes) continuum averages

    @property
    def m(self) -> int:
        return self.Phi.shape[1]

    def averages(self) -> np.ndarray:
        """(m, m) matrix of continuum averages of every column; identity up to solve error."""
        return (self.constraints @ self.Phi).toarray()

    def lift(self, U) -> np.ndarray:
        """Fine nodal field(s) ``Phi U`` from coarse coefficients."""
        return self.Phi @ np.asarray(U, dtype=float).T if np.ndim(U) == 2 else self.Phi @ U


def build_basis(fine: FineSystem, layers: int = 2) -> MultiscaleBasis:
    """Solve the constrained local energy minimizations for every continuum."""
    if layers < 1:
        raise ValueError("oversampling needs at least one layer")
    mesh = fine.mesh
    index = ContinuumIndex.build(mesh, fine.frac_edges, fine.frac_owner)
    C = constraint_matrix(fine, index)
    owner_block = index.block_of()
    cols, rows, vals = [], [], []
    for i in range(mesh.n_blocks):
        region = mesh.oversampled(i, layers)
        loc = restrict_to_region(fine, region, keep_domain_boundary=True)
        cont = np.flatnonzero(np.isin(owner_block, region))
        Cloc = C[cont][:, loc.nodes].tocsr()
        empty = np.flatnonzero(np.diff(Cloc.indptr) == 0)
        if empty.size:
            raise SaddleSingular(f"block {i}: continua {cont[empty].tolist()} have no free fine nodes")
        nf, nc = loc.nodes.size, cont.size
        K = sp.bmat([[loc.A, Cloc.T], [Cloc, None]], format="csc")
        try:
            lu = factorize_sparse(K)
        except SingularMatrix as exc:
            raise SaddleSingular(f"block {i}: {exc}") from exc
        mine = index.continua_of(i)
        rhs = np.zeros((nf + nc, len(mine)))
        for k, c in enumerate(mine):
            rhs[nf + np.searchsorted(cont, c), k] = 1.0
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SaddleSingular(f"block {i}: non-finite basis")
        res = K @ sol - rhs
        if np.max(np.abs(res)) > TOL.sparse_solve * (1.0 + np.max(np.abs(rhs))):
            raise SaddleSingular(f"block {i}: saddle residual {np.max(np.abs(res)):.2e}")
        for k, c in enumerate(mine):
            psi = sol[:nf, k]
            nz = np.abs(psi) > 0
            rows.append(loc.nodes[nz])
            cols.append(np.full(nz.sum(), c))
            vals.append(psi[nz])
    Phi = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(mesh.n_nodes, index.m))
    return MultiscaleBasis(Phi, index, layers, C)


# ---------------------------------------------------------------------------
# coarse system
# ---------------------------------------------------------------------------

@dataclass
class CoarseSystem:
    M: np.ndarray
    A: np.ndarray
    F: np.ndarray
    dt: float
    Phi: sp.csc_matrix | None = None
    meta: dict = field(default_factory=dict)
    W_hat: np.ndarray = field(init=False, repr=False)
    b_hat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.F = np.asarray(self.F, dtype=float)
        self.W_hat, self.b_hat = affine_map(self)

    @property
    def m(self) -> int:
        return self.M.shape[0]

    def step(self, U) -> np.ndarray:
        """One implicit Euler step via the stored affine map; accepts a batch of rows."""
        U = np.asarray(U, dtype=float)
        return U @ self.W_hat.T + self.b_hat

    def eigen(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenpairs of the one-step matrix, descending, M-orthonormal eigenvectors.

        W_hat v = lam v  <=>  M v = lam (M + dt A) v, a symmetric-definite
        pencil, so the eigenvalues are real and lie in (0, 1].
        """
        lam, V = sym_eigen(self.M, self.M + self.dt * self.A)
        V = V / np.sqrt(np.einsum("ij,ik,kj->j", V, self.M, V))
        return lam, V

    def save(self, path) -> Path:
        arrays = {"M": self.M, "A": self.A, "F": self.F}
        meta = dict(self.meta, dt=self.dt)
        if self.Phi is not None:
            P = sp.csc_matrix(self.Phi)
            arrays.update(Phi_data=P.data, Phi_indices=P.indices, Phi_indptr=P.indptr)
            meta["Phi_shape"] = list(P.shape)
        return save_container(path, "coarse-system", arrays, meta)

    @classmethod
    def load(cls, path) -> "CoarseSystem":
        arr, meta = load_container(path, "coarse-system")
        Phi = None
        if "Phi_data" in arr:
            Phi = sp.csc_matrix((arr["Phi_data"], arr["Phi_indices"], arr["Phi_indptr"]),
                                shape=tuple(meta.pop("Phi_shape")))
        dt = meta.pop("dt")
        return cls(arr["M"], arr["A"], arr["F"], dt, Phi, meta)


def affine_map(cs: CoarseSystem) -> tuple[np.ndarray, np.ndarray]:
    """``W_hat = (M + dt A)^-1 M`` and ``b_hat = (M + dt A)^-1 dt F``."""
    B = cs.M + cs.dt * cs.A
    W = lu_solve(B, cs.M)
    b = lu_solve(B, cs.dt * cs.F)
    return W, b


def galerkin(Phi, Mf, Af, Ff) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Phi = sp.csc_matrix(Phi)
    M = (Phi.T @ (Mf @ Phi)).toarray()
    A = (Phi.T @ (Af @ Phi)).toarray()
    F = Phi.T @ Ff
    return 0.5 * (M + M.T), 0.5 * (A + A.T), np.asarray(F).ravel()


def project_coarse(fine: FineSystem, basis: MultiscaleBasis | sp.spmatrix, dt: float, meta: dict | None = None) -> CoarseSystem:
    """Galerkin projection ``M = Phi^T M_f Phi`` etc. onto the multiscale space."""
    Phi = basis.Phi if isinstance(basis, MultiscaleBasis) else sp.csc_matrix(basis)
    M, A, F = galerkin(Phi, fine.M, fine.A, fine.F)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > TOL.gram_condition:
        raise RankDeficient(f"coarse mass matrix condition {cond:.3e} exceeds {TOL.gram_condition:.0e}")
    return CoarseSystem(M, A, F, float(dt), Phi, dict(meta or {}))


def l2_project(cs: CoarseSystem, Mf, u_fine) -> np.ndarray:
    """Coarse coefficients of the L2 projection of fine nodal field(s) (columns)."""
    rhs = cs.Phi.T @ (Mf @ u_fine)
    return lu_solve(cs.M, rhs)
