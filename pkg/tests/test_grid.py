from pathlib import Path

import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from rodl.grid import (EmptyRegion, Fracture, FractureSet, GeometryMismatch, InvalidDims, MeshPair,
                       PermeabilityField, assemble_fine, build_mesh_pair, element_matrices, load_scenario,
                       restrict_to_region)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_mesh_counts():
    mesh = build_mesh_pair((2, 2), 4)
    assert (mesh.nx, mesh.ny, mesh.n_cells, mesh.n_nodes) == (8, 8, 64, 81)


def test_mesh_rejects_single_block():
    with pytest.raises(InvalidDims):
        build_mesh_pair((1, 1), 2)


def test_corner_oversampling():
    mesh = build_mesh_pair((4, 4), 2)
    assert mesh.oversampled(0, 1) == [0, 1, 4, 5]
    assert mesh.oversampled(5, 1) == [0, 1, 2, 4, 5, 6, 8, 9, 10]
    assert len(mesh.oversampled(5, 5)) == 16


def test_element_matrices_by_hand():
    K, M = element_matrices(1.0, 1.0)
    Kh = np.array([[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6.0
    Mh = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]]) / 36.0
    np.testing.assert_allclose(K, Kh, atol=1e-15)
    np.testing.assert_allclose(M, Mh, atol=1e-15)


def test_unit_square_kernel_and_mass():
    mesh = MeshPair(2, 2, 1)   # 2x2 fine cells
    fs = assemble_fine(mesh, PermeabilityField.constant(mesh))
    np.testing.assert_allclose(fs.A @ np.ones(mesh.n_nodes), 0.0, atol=1e-14)
    assert fs.M.sum() == pytest.approx(1.0, abs=1e-14)


def test_single_fracture_edge_adds_line_stiffness():
    mesh = build_mesh_pair((2, 2), 2)
    h = mesh.hx
    plain = assemble_fine(mesh, PermeabilityField.constant(mesh))
    frac = FractureSet((Fracture(((h, h), (2 * h, h)), kappa=1e3),))
    fs = assemble_fine(mesh, PermeabilityField.constant(mesh, 1.0, frac))
    a, b = 6, 7          # nodes (1,1) and (2,1) on a 5-wide node grid
    expect = np.zeros((mesh.n_nodes, mesh.n_nodes))
    expect[np.ix_([a, b], [a, b])] = 1e3 / h * np.array([[1, -1], [-1, 1]])
    np.testing.assert_allclose((fs.A - plain.A).toarray(), expect, atol=1e-9)
    np.testing.assert_allclose(fs.A @ np.ones(mesh.n_nodes), 0.0, atol=1e-9)


def test_fracture_must_follow_grid_lines():
    mesh = build_mesh_pair((2, 2), 2)
    with pytest.raises(GeometryMismatch):
        FractureSet((Fracture(((0.1, 0.1), (0.5, 0.1))),)).edges(mesh)
    with pytest.raises(GeometryMismatch):
        FractureSet((Fracture(((0.0, 0.0), (0.25, 0.25))),)).edges(mesh)


def test_restrict_regions():
    mesh = build_mesh_pair((2, 2), 2)
    fs = assemble_fine(mesh, PermeabilityField.constant(mesh))
    whole = restrict_to_region(fs, range(4))
    assert whole.nodes.size == 9     # 5x5 nodes minus the boundary ring
    one = restrict_to_region(fs, [0])
    assert one.nodes.tolist() == [6] and one.A.shape == (1, 1)
    with pytest.raises(EmptyRegion):
        restrict_to_region(fs, [17])


def _l2_error(mesh, uh, exact):
    """L2 error of a nodal Q1 field by 4x4 Gauss quadrature with hand-coded bilinear interpolation."""
    g, w = np.polynomial.legendre.leggauss(4)
    U = uh.reshape(mesh.ny + 1, mesh.nx + 1)
    err2 = 0.0
    for a, wa in zip(g, w):
        for b, wb in zip(g, w):
            s, t = (a + 1) / 2, (b + 1) / 2
            val = ((1 - s) * (1 - t) * U[:-1, :-1] + s * (1 - t) * U[:-1, 1:]
                   + s * t * U[1:, 1:] + (1 - s) * t * U[1:, :-1])
            x = (np.arange(mesh.nx) + s) * mesh.hx
            y = (np.arange(mesh.ny) + t) * mesh.hy
            X, Y = np.meshgrid(x, y)
            err2 += wa * wb / 4 * mesh.hx * mesh.hy * np.sum((val - exact(X, Y)) ** 2)
    return np.sqrt(err2)


def manufactured_errors(refinements=(2, 4, 8, 16)):
    exact = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)  # noqa: E731
    errs = []
    for r in refinements:
        mesh = build_mesh_pair((2, 2), r)
        fs = assemble_fine(mesh, PermeabilityField.constant(mesh), lambda x, y: 2 * np.pi ** 2 * exact(x, y))
        loc = restrict_to_region(fs, range(mesh.n_blocks))
        u = np.zeros(mesh.n_nodes)
        u[loc.nodes] = spla.spsolve(loc.A.tocsc(), loc.F)
        errs.append(_l2_error(mesh, u, exact))
    return np.array(errs)


def test_fem_convergence_rate():
    errs = manufactured_errors()
    ratios = errs[:-1] / errs[1:]
    assert np.all((ratios >= 3.5) & (ratios <= 4.5)), ratios


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), nf=st.integers(0, 2))
def test_galerkin_forms_are_semidefinite(seed, nf):
    rng = np.random.default_rng(seed)
    mesh = build_mesh_pair((3, 3), 2)
    fr = tuple(Fracture(((mesh.hx, mesh.hy * (1 + 2 * k)), (5 * mesh.hx, mesh.hy * (1 + 2 * k))), 1e3)
               for k in range(nf))
    perm = PermeabilityField(np.exp(rng.standard_normal(mesh.n_cells)), FractureSet(fr))
    fs = assemble_fine(mesh, perm)
    u = rng.standard_normal(mesh.n_nodes)
    assert u @ (fs.A @ u) >= -1e-12 * np.abs(fs.A).sum()
    assert u @ (fs.M @ u) > 0
    assert np.max(np.abs(fs.A @ np.ones(mesh.n_nodes))) <= 1e-12 * max(1.0, abs(fs.A).max())


def test_shipped_scenarios_load():
    lin = load_scenario(CONFIGS / "scenarios" / "lognormal.yaml")
    a = load_scenario(CONFIGS / "scenarios" / "fractured_a.yaml")
    b = load_scenario(CONFIGS / "scenarios" / "fractured_b.yaml")
    assert lin.mesh.n_blocks == 100 and len(lin.perm.fractures) == 0
    assert (a.label, b.label) == (1, 2)
    assert {f.kappa for f in a.perm.fractures.fractures} == {1e3}
    assert np.all(a.perm.kappa_m == 1.0)
