"""Coarse time stepping, initial-condition synthesis and trajectory datasets."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import FineSystem, Scenario
from .nlmc import CoarseSystem, MultiscaleBasis, build_basis, l2_project, project_coarse
from .numerics import NumericsError, ParseError, load_container, lu_solve, rng_stream, save_container


class BlowUp(NumericsError):
    def __init__(self, msg: str, sample: int | None = None):
        super().__init__(msg if sample is None else f"sample {sample}: {msg}")
        self.sample = sample


class EmptyDataset(ValueError):
    pass


@dataclass
class CoarseModel:
    """Everything needed to step the coarse model, linear or nonlinear."""
    scenario: Scenario | None
    fine: FineSystem
    basis: MultiscaleBasis
    cs: CoarseSystem

    @property
    def m(self) -> int:
        return self.cs.m


def build_coarse_model(scenario: Scenario, dt: float = 0.01, layers: int = 2) -> CoarseModel:
    fine = scenario.assemble()
    basis = build_basis(fine, layers)
    meta = {"scenario": scenario.name, "label": scenario.label, "layers": layers}
    cs = project_coarse(fine, basis, dt, meta)
    return CoarseModel(scenario, fine, basis, cs)


# ---------------------------------------------------------------------------
# linear and nonlinear steps
# ---------------------------------------------------------------------------

def step_linear(cs: CoarseSystem, U) -> np.ndarray:
    """Implicit Euler step ``(M + dt A)^-1 (M U + dt F)`` by direct solve."""
    U = np.asarray(U, dtype=float)
    if U.shape[-1] != cs.m:
        raise ValueError(f"state has length {U.shape[-1]}, system has m={cs.m}")
    rhs = (U @ cs.M.T + cs.dt * cs.F).T
    return lu_solve(cs.M + cs.dt * cs.A, rhs).T


@dataclass(frozen=True)
class NonlinearLaw:
    """Mobility ``kappa = kappa_hat(x) * g(u)`` with ``g`` clamped to ``[kmin, kmax]``.

    tags: ``"u2"`` g = u^2, ``"one"`` g = 1, ``"one_plus_eps_u2"`` g = 1 + eps u^2.
    """
    tag: str = "u2"
    eps: float = 0.0
    kmin: float = 1e-3
    kmax: float = 1e3

    def g(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.tag == "u2":
            g = u * u
        elif self.tag == "one":
            g = np.ones_like(u)
        elif self.tag == "one_plus_eps_u2":
            g = 1.0 + self.eps * u * u
        else:
            raise ValueError(f"unknown nonlinear law {self.tag!r}")
        return np.clip(g, self.kmin, self.kmax)


def nonlinear_stiffness(model: CoarseModel, law: NonlinearLaw, u_nodes) -> np.ndarray:
    """Coarse stiffness for the mobility evaluated at fine nodal field ``u_nodes``.

    The Q1 field is sampled at cell centres (mean of the four corners) and
    at fracture edge midpoints.
    """
    fine = model.fine
    cn = fine.mesh.cell_nodes()
    u_cell = np.asarray(u_nodes)[cn].mean(axis=1)
    kc = fine.perm.kappa_m * law.g(u_cell)
    ke = None
    if len(fine.frac_edges):
        u_edge = np.asarray(u_nodes)[fine.frac_edges].mean(axis=1)
        ke = fine.edge_conductivity() * law.g(u_edge)
    Af = fine.stiffness(kc, ke)
    Phi = model.basis.Phi
    A = (Phi.T @ (Af @ Phi)).toarray()
    return 0.5 * (A + A.T)


def step_nonlinear(model: CoarseModel, law: NonlinearLaw, U, scheme: str = "implicit-lagged",
                   dt: float | None = None, blowup_cap: float = 1e6) -> np.ndarray:
    """One Euler step with the mobility frozen at the current state.

    ``explicit``: ``U + dt M^-1 (F - A(u^n) U)``;
    ``implicit-lagged``: ``(M + dt A(u^n))^-1 (M U + dt F)``.
    """
    U = np.asarray(U, dtype=float)
    if not np.all(np.isfinite(U)):
        raise BlowUp("non-finite state")
    cs = model.cs
    dt = cs.dt if dt is None else dt
    A = nonlinear_stiffness(model, law, model.basis.Phi @ U)
    if scheme == "explicit":
        U1 = U + dt * lu_solve(cs.M, cs.F - A @ U)
    elif scheme == "implicit-lagged":
        U1 = lu_solve(cs.M + dt * A, cs.M @ U + dt * cs.F)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if not np.all(np.isfinite(U1)) or np.max(np.abs(U1)) > blowup_cap:
        raise BlowUp(f"|U| exceeded {blowup_cap:g}")
    return U1


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------

def bump_field(xy: np.ndarray, rng: np.random.Generator, lx: float = 1.0, ly: float = 1.0) -> np.ndarray:
    """Sum of 3-6 Gaussian bumps with random centres, widths and amplitudes."""
    n = int(rng.integers(3, 7))
    cx = rng.uniform(0.0, lx, n)
    cy = rng.uniform(0.0, ly, n)
    w = rng.uniform(0.05, 0.3, n) * max(lx, ly)
    a = rng.uniform(0.0, 1.0, n)
    d2 = (xy[:, :1] - cx) ** 2 + (xy[:, 1:] - cy) ** 2
    return (a * np.exp(-d2 / (2.0 * w * w))).sum(axis=1)


def gen_initial_conditions(model: CoarseModel, count: int, law: NonlinearLaw = NonlinearLaw(),
                           pre_steps: int = 10, seed: int = 0, scheme: str = "implicit-lagged") -> np.ndarray:
    """Terminal states of ``pre_steps`` nonlinear steps from random bump fields.

    Sample ``k`` draws from the stream keyed ``(seed, k)``, so results do not
    depend on how many samples are requested. Returns ``(count, m)``.
    """
    if pre_steps < 1:
        raise ValueError("pre_steps must be at least 1")
    xy = model.fine.mesh.node_xy()
    mesh = model.fine.mesh
    out = np.zeros((count, model.m))
    for k in range(count):
        rng = rng_stream(seed, k)
        u0 = bump_field(xy, rng, mesh.lx, mesh.ly)
        U = l2_project(model.cs, model.fine.M, u0)
        try:
            for _ in range(pre_steps):
                U = step_nonlinear(model, law, U, scheme)
        except BlowUp as exc:
            raise BlowUp(str(exc), sample=k) from exc
        out[k] = U
    return out


def subspace_sample(cs: CoarseSystem, r: int, count: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Random combinations ``sum_{i<=r} c_i v_i`` of the leading eigenvectors of W_hat."""
    if not 1 <= r <= cs.m:
        raise ValueError(f"r must lie in 1..{cs.m}")
    _, V = cs.eigen()
    c = rng_stream(seed, 31).standard_normal((count, r)) * scale
    return c @ V[:, :r].T


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    """``trajectories[i, t]`` is U^t of sample i, t = 0..T."""
    trajectories: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    FORMAT_KIND = "trajectory-dataset"

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.trajectories.ndim != 3:
            raise ValueError("trajectories must have shape (count, T+1, m)")
        if self.labels.shape != (self.trajectories.shape[0],):
            raise ValueError("one label per sample required")

    def __len__(self) -> int:
        return self.trajectories.shape[0]

    @property
    def m(self) -> int:
        return self.trajectories.shape[2]

    @property
    def T(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def inputs(self) -> np.ndarray:
        return self.trajectories[:, 0]

    @property
    def targets(self) -> np.ndarray:
        return self.trajectories[:, 1:]

    def subset(self, idx) -> "TrajectoryDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TrajectoryDataset(self.trajectories[idx], self.labels[idx], dict(self.meta))

    def select_label(self, label: int) -> "TrajectoryDataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def save(self, path) -> Path:
        meta = dict(self.meta, m=self.m, T=self.T, count=len(self))
        return save_container(path, self.FORMAT_KIND, {"trajectories": self.trajectories, "labels": self.labels}, meta)

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        arr, meta = load_container(path, cls.FORMAT_KIND)
        ds = cls(arr["trajectories"], arr["labels"], meta)
        if (meta.get("m"), meta.get("T"), meta.get("count")) != (ds.m, ds.T, len(ds)):
            raise ParseError(f"{path}: header dims disagree with payload")
        return ds

    @classmethod
    def concat(cls, parts: Sequence["TrajectoryDataset"]) -> "TrajectoryDataset":
        meta = {"parts": [p.meta for p in parts]}
        return cls(np.concatenate([p.trajectories for p in parts]), np.concatenate([p.labels for p in parts]), meta)


def gen_dataset(cs: CoarseSystem, U0, T: int, label: int = 0, meta: dict | None = None) -> TrajectoryDataset:
    """Roll ``T`` linear steps from every initial state."""
    if T < 1:
        raise ValueError("T must be at least 1")
    U = np.atleast_2d(np.asarray(U0, dtype=float))
    traj = np.zeros((U.shape[0], T + 1, cs.m))
    traj[:, 0] = U
    for t in range(T):
        U = step_linear(cs, U)
        traj[:, t + 1] = U
    info = dict(cs.meta, dt=cs.dt, T=T)
    info.update(meta or {})
    return TrajectoryDataset(traj, np.full(U.shape[0], label), info)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.98
    test: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.test) < 0 or abs(self.train + self.test - 1.0) > 1e-12:
            raise ValueError("split fractions must be nonnegative and sum to 1")


def split(ds: TrajectoryDataset, spec: SplitSpec = SplitSpec()) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Seeded shuffle into disjoint train/test parts."""
    n = len(ds)
    if n == 0:
        raise EmptyDataset("cannot split an empty dataset")
    perm = rng_stream(spec.seed, 17).permutation(n)
    n_test = int(round(spec.test * n))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))
