"""Structured coarse/fine meshes, fractured permeability fields, Q1 assembly.

Fine nodes are numbered ``j * (nx + 1) + i`` and fine cells ``j * nx + i``
with ``i`` running along x. Coarse block ``(bx, by)`` has index ``by * nbx + bx``.
Fractures are lower-dimensional conductors laid along fine edges; their
aperture is folded into the line conductivity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import yaml


class GridError(Exception):
    pass


class InvalidDims(GridError):
    pass


class GeometryMismatch(GridError):
    pass


class EmptyRegion(GridError):
    pass


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeshPair:
    nbx: int
    nby: int
    refine: int
    lx: float = 1.0
    ly: float = 1.0

    @property
    def nx(self) -> int:
        return self.nbx * self.refine

    @property
    def ny(self) -> int:
        return self.nby * self.refine

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_blocks(self) -> int:
        return self.nbx * self.nby

    def node_xy(self) -> np.ndarray:
        x = np.linspace(0.0, self.lx, self.nx + 1)
        y = np.linspace(0.0, self.ly, self.ny + 1)
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def cell_centers(self) -> np.ndarray:
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def cell_nodes(self) -> np.ndarray:
        """(n_cells, 4) node ids, counter-clockwise from the lower-left corner."""
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        i, j = i.ravel(), j.ravel()
        w = self.nx + 1
        n0 = j * w + i
        return np.column_stack([n0, n0 + 1, n0 + w + 1, n0 + w])

    def cell_block(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        return ((j.ravel() // self.refine) * self.nbx + i.ravel() // self.refine).astype(np.int64)

    def block_cells(self, block: int) -> np.ndarray:
        return np.flatnonzero(self.cell_block() == block)

    def oversampled(self, block: int, layers: int) -> list[int]:
        """Blocks within ``layers`` rings of ``block`` (the region K_i^+), sorted."""
        if not 0 <= block < self.n_blocks:
            raise InvalidDims(f"block {block} outside 0..{self.n_blocks - 1}")
        bx, by = block % self.nbx, block // self.nbx
        xs = range(max(0, bx - layers), min(self.nbx, bx + layers + 1))
        ys = range(max(0, by - layers), min(self.nby, by + layers + 1))
        return sorted(y * self.nbx + x for y in ys for x in xs)

    def region_free_nodes(self, blocks: Sequence[int], keep_domain_boundary: bool = False) -> np.ndarray:
        """Nodes not on the region boundary.

        A node is free when every fine cell touching it belongs to the
        region. Nodes on the outer domain boundary count as region boundary
        unless ``keep_domain_boundary`` is set, in which case they stay free
        (natural no-flow condition there).
        """
        in_region = np.zeros(self.n_blocks, dtype=bool)
        blocks = [b for b in blocks if 0 <= b < self.n_blocks]
        in_region[blocks] = True
        cell_in = in_region[self.cell_block()]
        cn = self.cell_nodes()
        touches = np.zeros(self.n_nodes, dtype=np.int64)
        inside = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(touches, cn.ravel(), 1)
        np.add.at(inside, cn[cell_in].ravel(), 1)
        free = (touches == inside) & (inside > 0)
        if not keep_domain_boundary:
            free &= touches == 4
        return np.flatnonzero(free)


def build_mesh_pair(coarse_dims: Sequence[int], refinement: int, extents: Sequence[float] = (1.0, 1.0)) -> MeshPair:
    nbx, nby = (int(d) for d in coarse_dims)
    if nbx < 2 or nby < 2 or refinement < 2:
        raise InvalidDims(f"need coarse dims >= 2x2 and refinement >= 2, got {nbx}x{nby}, {refinement}")
    return MeshPair(nbx, nby, int(refinement), float(extents[0]), float(extents[1]))


# ---------------------------------------------------------------------------
# fractures and permeability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fracture:
    points: tuple[tuple[float, float], ...]
    kappa: float = 1e3
    aperture: float = 1.0

    @property
    def conductivity(self) -> float:
        return self.kappa * self.aperture


@dataclass(frozen=True)
class FractureSet:
    fractures: tuple[Fracture, ...] = ()

    def __len__(self) -> int:
        return len(self.fractures)

    def edges(self, mesh: MeshPair) -> tuple[np.ndarray, np.ndarray]:
        """Fine edges covered by fractures.

        Returns ``(edges, owner)``: ``edges`` is (n_edges, 2) node ids,
        ``owner`` the fracture index of each edge. Raises GeometryMismatch
        when a polyline leaves the fine-grid lines.
        """
        edges, owner = [], []
        w = mesh.nx + 1
        for k, frac in enumerate(self.fractures):
            if frac.kappa <= 0 or frac.aperture <= 0:
                raise GeometryMismatch(f"fracture {k}: conductivity must be positive")
            if len(frac.points) < 2:
                raise GeometryMismatch(f"fracture {k}: needs at least two points")
            ij = []
            for x, y in frac.points:
                fi, fj = x / mesh.hx, y / mesh.hy
                i, j = int(round(fi)), int(round(fj))
                if abs(fi - i) > 1e-8 or abs(fj - j) > 1e-8 or not (0 <= i <= mesh.nx and 0 <= j <= mesh.ny):
                    raise GeometryMismatch(f"fracture {k}: point ({x}, {y}) is not a fine node")
                ij.append((i, j))
            for (i0, j0), (i1, j1) in zip(ij[:-1], ij[1:]):
                if i0 != i1 and j0 != j1:
                    raise GeometryMismatch(f"fracture {k}: segment ({i0},{j0})-({i1},{j1}) is not along a fine edge")
                if i0 == i1:
                    for j in range(min(j0, j1), max(j0, j1)):
                        edges.append((j * w + i0, (j + 1) * w + i0))
                        owner.append(k)
                else:
                    for i in range(min(i0, i1), max(i0, i1)):
                        edges.append((j0 * w + i, j0 * w + i + 1))
                        owner.append(k)
        if not edges:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        edges = np.asarray(edges, dtype=np.int64)
        owner = np.asarray(owner, dtype=np.int64)
        # an edge shared by two polylines keeps the first owner
        _, first = np.unique(np.sort(edges, axis=1), axis=0, return_index=True)
        first = np.sort(first)
        return edges[first], owner[first]


def edge_blocks(mesh: MeshPair, edges: np.ndarray) -> np.ndarray:
    """Coarse block owning each fine edge (midpoint nudged up/right off block lines)."""
    xy = mesh.node_xy()
    mid = 0.5 * (xy[edges[:, 0]] + xy[edges[:, 1]])
    bx = np.clip(((mid[:, 0] + 1e-9 * mesh.lx) / (mesh.lx / mesh.nbx)).astype(int), 0, mesh.nbx - 1)
    by = np.clip(((mid[:, 1] + 1e-9 * mesh.ly) / (mesh.ly / mesh.nby)).astype(int), 0, mesh.nby - 1)
    return (by * mesh.nbx + bx).astype(np.int64)


@dataclass(frozen=True)
class PermeabilityField:
    """Matrix permeability per fine cell plus embedded fractures."""
    kappa_m: np.ndarray
    fractures: FractureSet = field(default_factory=FractureSet)

    def __post_init__(self):
        k = np.asarray(self.kappa_m, dtype=float).ravel()
        if not np.all(np.isfinite(k)) or np.any(k <= 0):
            raise GridError("matrix permeability must be finite and positive")
        object.__setattr__(self, "kappa_m", k)

    @classmethod
    def constant(cls, mesh: MeshPair, value: float = 1.0, fractures: FractureSet | None = None) -> "PermeabilityField":
        return cls(np.full(mesh.n_cells, float(value)), fractures or FractureSet())


# ---------------------------------------------------------------------------
# Q1 element matrices
# ---------------------------------------------------------------------------

_G2 = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_G3 = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_W3 = np.array([5.0, 8.0, 5.0]) / 9.0
_CORNERS = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)


def _shape(xi, eta):
    """Q1 shape functions and reference gradients at points (xi, eta)."""
    xi, eta = np.asarray(xi), np.asarray(eta)
    N = 0.25 * (1 + np.multiply.outer(xi, _CORNERS[:, 0])) * (1 + np.multiply.outer(eta, _CORNERS[:, 1]))
    dxi = 0.25 * _CORNERS[:, 0] * (1 + np.multiply.outer(eta, _CORNERS[:, 1]))
    deta = 0.25 * _CORNERS[:, 1] * (1 + np.multiply.outer(xi, _CORNERS[:, 0]))
    return N, dxi, deta


def element_matrices(hx: float, hy: float) -> tuple[np.ndarray, np.ndarray]:
    """Q1 stiffness and mass matrices on an ``hx`` by ``hy`` rectangle."""
    K = np.zeros((4, 4))
    Mloc = np.zeros((4, 4))
    jac = hx * hy / 4.0
    for a in _G2:
        for b in _G2:
            N, dxi, deta = _shape(a, b)
            gx, gy = dxi * 2.0 / hx, deta * 2.0 / hy
            K += (np.outer(gx, gx) + np.outer(gy, gy)) * jac
            Mloc += np.outer(N, N) * jac
    return K, Mloc


def _scatter_pattern(conn: np.ndarray, n: int, block: int):
    """Precompute CSR structure for sum_e c_e * Ke over elements ``conn``.

    Returns ``(S, indices, indptr)`` with ``S`` mapping per-element
    coefficients times the flattened local matrix onto CSR data.
    """
    ne = conn.shape[0]
    rows = np.repeat(conn, block, axis=1).ravel()
    cols = np.tile(conn, (1, block)).ravel()
    slot = np.arange(rows.size)
    pattern = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    pattern.sum_duplicates()
    pattern.sort_indices()
    # locate each (row, col) pair in the CSR data array
    keys = rows.astype(np.int64) * n + cols
    csr_rows = np.repeat(np.arange(n), np.diff(pattern.indptr))
    csr_keys = csr_rows.astype(np.int64) * n + pattern.indices
    pos = np.searchsorted(csr_keys, keys)
    elem = slot // (block * block)
    local = slot % (block * block)
    return pos, elem, local, pattern.indices.copy(), pattern.indptr.copy(), ne


class _Assembler:
    """Fast re-assembly of ``sum_e c_e * Kref`` for varying coefficients."""

    def __init__(self, conn: np.ndarray, n: int, kref: np.ndarray):
        block = conn.shape[1]
        pos, elem, local, self.indices, self.indptr, ne = _scatter_pattern(conn, n, block)
        self.n = n
        self.ne = ne
        vals = kref.ravel()[local]
        self.S = sp.csr_matrix((vals, (pos, elem)), shape=(self.indices.size, ne))

    def __call__(self, coef: np.ndarray) -> sp.csr_matrix:
        data = self.S @ np.asarray(coef, dtype=float)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


# ---------------------------------------------------------------------------
# fine system
# ---------------------------------------------------------------------------

SourceLike = Callable[[np.ndarray, np.ndarray], np.ndarray] | None


@dataclass
class FineSystem:
    mesh: MeshPair
    perm: PermeabilityField
    M: sp.csr_matrix
    A: sp.csr_matrix
    F: np.ndarray
    frac_edges: np.ndarray
    frac_owner: np.ndarray
    _cell_asm: _Assembler = field(repr=False, default=None)
    _edge_asm: _Assembler | None = field(repr=False, default=None)

    def stiffness(self, cell_kappa, edge_kappa=None) -> sp.csr_matrix:
        """Reassemble A_f for new per-cell (and per-fracture-edge) coefficients."""
        A = self._cell_asm(cell_kappa)
        if self._edge_asm is not None:
            ek = self.edge_conductivity() if edge_kappa is None else edge_kappa
            A = A + self._edge_asm(ek)
        return A

    def edge_conductivity(self) -> np.ndarray:
        cond = np.array([f.conductivity for f in self.perm.fractures.fractures])
        return cond[self.frac_owner] if len(cond) else np.zeros(0)

    def energy(self, u) -> float:
        return float(u @ (self.A @ u))


def load_vector(mesh: MeshPair, f: SourceLike) -> np.ndarray:
    """``F_i = int f phi_i`` by 3x3 Gauss quadrature per fine cell."""
    F = np.zeros(mesh.n_nodes)
    if f is None:
        return F
    cn = mesh.cell_nodes()
    xy = mesh.node_xy()
    x0, y0 = xy[cn[:, 0], 0], xy[cn[:, 0], 1]
    jac = mesh.hx * mesh.hy / 4.0
    loc = np.zeros((mesh.n_cells, 4))
    for a, wa in zip(_G3, _W3):
        for b, wb in zip(_G3, _W3):
            N, _, _ = _shape(a, b)
            px = x0 + (a + 1) * 0.5 * mesh.hx
            py = y0 + (b + 1) * 0.5 * mesh.hy
            fv = np.asarray(f(px, py), dtype=float) * np.ones_like(px)
            loc += (wa * wb * jac) * fv[:, None] * N[None, :]
    np.add.at(F, cn.ravel(), loc.ravel())
    return F


def assemble_fine(mesh: MeshPair, perm: PermeabilityField, source: SourceLike = None) -> FineSystem:
    """Q1 mass, stiffness (matrix + fracture line terms) and load on the fine grid."""
    if perm.kappa_m.size != mesh.n_cells:
        raise GeometryMismatch(f"permeability has {perm.kappa_m.size} cells, mesh has {mesh.n_cells}")
    Kref, Mref = element_matrices(mesh.hx, mesh.hy)
    cn = mesh.cell_nodes()
    cell_asm = _Assembler(cn, mesh.n_nodes, Kref)
    M = _Assembler(cn, mesh.n_nodes, Mref)(np.ones(mesh.n_cells))
    edges, owner = perm.fractures.edges(mesh)
    sysm = FineSystem(mesh, perm, M, None, load_vector(mesh, source), edges, owner, cell_asm, None)
    if len(edges):
        xy = mesh.node_xy()
        length = np.linalg.norm(xy[edges[:, 1]] - xy[edges[:, 0]], axis=1)
        edge_asm = _EdgeAssembler(edges, mesh.n_nodes, length)
        sysm._edge_asm = edge_asm
    sysm.A = sysm.stiffness(perm.kappa_m)
    return sysm


class _EdgeAssembler(_Assembler):
    def __init__(self, edges, n, length):
        super().__init__(edges, n, np.array([[1.0, -1.0], [-1.0, 1.0]]))
        self.inv_len = 1.0 / length

    def __call__(self, coef):
        return super().__call__(np.asarray(coef) * self.inv_len)


@dataclass
class LocalSystem:
    """Fine operators restricted to the free nodes of a union of coarse blocks."""
    blocks: tuple[int, ...]
    nodes: np.ndarray
    M: sp.csr_matrix
    A: sp.csr_matrix
    F: np.ndarray


def restrict_to_region(sys: FineSystem, blocks: Sequence[int], keep_domain_boundary: bool = False,
                       A: sp.csr_matrix | None = None) -> LocalSystem:
    """Zero-Dirichlet restriction to the region made of ``blocks``.

    ``A`` overrides the stiffness matrix to restrict (used when the
    coefficient was reassembled).
    """
    nodes = sys.mesh.region_free_nodes(blocks, keep_domain_boundary)
    if nodes.size == 0:
        raise EmptyRegion(f"region {list(blocks)} has no free fine nodes")
    A = sys.A if A is None else A
    return LocalSystem(tuple(sorted(blocks)), nodes, sys.M[nodes][:, nodes].tocsr(),
                       A[nodes][:, nodes].tocsr(), sys.F[nodes].copy())


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """A permeability / fracture / source configuration read from YAML.

    Schema::

        name: str                       # scenario id
        label: int                      # cluster label (default 0)
        coarse: [nbx, nby]              # coarse blocks
        refine: int                     # fine cells per block edge
        extents: [lx, ly]               # default [1, 1]
        kappa_m: 1.0                    # constant, or
        kappa_m: {type: lognormal, sigma: 0.5, smooth: 3.0, seed: 1}
        fractures:                      # optional
          - points: [[x0, y0], [x1, y1], ...]   # along fine grid lines
            kappa: 1000.0
            aperture: 1.0
        source: {type: none}            # or {type: bump, center: [.5,.5], width: .1, amplitude: 1}
    """
    name: str
    mesh: MeshPair
    perm: PermeabilityField
    source: SourceLike
    label: int = 0
    raw: dict = field(default_factory=dict)

    def assemble(self) -> FineSystem:
        return assemble_fine(self.mesh, self.perm, self.source)


def bump_source(center=(0.5, 0.5), width=0.1, amplitude=1.0):
    cx, cy = center

    def f(x, y):
        return amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width ** 2))
    return f


def scenario_from_dict(d: dict, base_dir: Path | None = None) -> Scenario:
    try:
        mesh = build_mesh_pair(d["coarse"], d["refine"], d.get("extents", (1.0, 1.0)))
    except KeyError as exc:
        raise GridError(f"scenario missing field {exc}") from exc
    km = d.get("kappa_m", 1.0)
    if isinstance(km, (int, float)):
        kappa = np.full(mesh.n_cells, float(km))
    elif isinstance(km, dict) and km.get("type") == "lognormal":
        from scipy.ndimage import gaussian_filter
        from .numerics import rng_stream
        g = rng_stream(int(km.get("seed", 0)), 7).standard_normal((mesh.ny, mesh.nx))
        g = gaussian_filter(g, float(km.get("smooth", 3.0)) * mesh.refine / 2.0, mode="wrap")
        g = (g - g.mean()) / (g.std() + 1e-300)
        kappa = float(km.get("mean", 1.0)) * np.exp(float(km.get("sigma", 0.5)) * g).ravel()
    elif isinstance(km, list):
        kappa = np.asarray(km, dtype=float).ravel()
    else:
        raise GridError(f"unsupported kappa_m entry {km!r}")
    fracs = tuple(Fracture(tuple(tuple(map(float, p)) for p in f["points"]),
                           float(f.get("kappa", 1e3)), float(f.get("aperture", 1.0)))
                  for f in d.get("fractures", []) or [])
    src = d.get("source", {"type": "bump"}) or {"type": "none"}
    if src.get("type", "bump") == "bump":
        source = bump_source(tuple(src.get("center", (0.5, 0.5))), float(src.get("width", 0.1)),
                             float(src.get("amplitude", 1.0)))
    elif src.get("type") == "none":
        source = None
    else:
        raise GridError(f"unsupported source type {src.get('type')!r}")
    perm = PermeabilityField(kappa, FractureSet(fracs))
    return Scenario(str(d.get("name", "scenario")), mesh, perm, source, int(d.get("label", 0)), dict(d))


def load_scenario(path) -> Scenario:
    path = Path(path)
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise GridError(f"{path}: scenario must be a mapping")
    d.setdefault("name", path.stem)
    return scenario_from_dict(d, path.parent)
