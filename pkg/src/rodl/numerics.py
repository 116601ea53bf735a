"""Linear algebra primitives, seeded random streams and the array container.

Dense factorizations and eigensolvers are thin wrappers over LAPACK (via
scipy/numpy); sparse systems use SuperLU below ``TOL.direct_max_unknowns``
unknowns and MINRES/GMRES above. Every solve checks its own residual.
"""
from __future__ import annotations

import json
import warnings
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import TOL


class NumericsError(Exception):
    """Base class for numerical failures."""


class SingularMatrix(NumericsError):
    pass


class NoConvergence(NumericsError):
    def __init__(self, iterations: int, residual: float, msg: str = "iteration did not converge"):
        super().__init__(f"{msg} (iterations={iterations}, residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class ParseError(Exception):
    """A container file is missing, truncated, or has an inconsistent header."""


# ---------------------------------------------------------------------------
# dense and sparse solves
# ---------------------------------------------------------------------------

def lu_solve(A, rhs, refine: int = 2) -> np.ndarray:
    """Solve ``A x = rhs`` by LU with partial pivoting.

    ``rhs`` may be a vector or a matrix of right-hand sides. Up to ``refine``
    steps of iterative refinement are taken when the residual exceeds
    ``TOL.solve * (1 + ||rhs||_inf)``.
    """
    A = np.asarray(A, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"lu_solve needs a square matrix, got shape {A.shape}")
    if rhs.shape[0] != A.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, matrix has {A.shape[0]}")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if scale == 0.0:
        raise SingularMatrix("matrix is identically zero")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() < TOL.pivot * scale:
        raise SingularMatrix(f"pivot {pivots.min():.3e} below {TOL.pivot:.0e} * ||A||max")
    x = sla.lu_solve((lu, piv), rhs)
    bound = TOL.solve * (1.0 + np.max(np.abs(rhs), initial=0.0))
    for _ in range(refine):
        r = rhs - A @ x
        if np.max(np.abs(r), initial=0.0) <= bound:
            break
        x = x + sla.lu_solve((lu, piv), r)
    return x


def _as_csr(A) -> sp.csr_matrix:
    if sp.issparse(A):
        return sp.csr_matrix(A, dtype=float)
    return sp.csr_matrix(np.asarray(A, dtype=float))


def factorize_sparse(A):
    """SuperLU factorization of a square sparse matrix; raises SingularMatrix."""
    A = sp.csc_matrix(A, dtype=float)
    if A.nnz == 0 or not np.any(A.data):
        raise SingularMatrix("matrix is identically zero")
    try:
        return spla.splu(A)
    except RuntimeError as exc:  # SuperLU reports "Factor is exactly singular"
        raise SingularMatrix(str(exc)) from exc


def sparse_solve(A, rhs, symmetric: bool = False) -> np.ndarray:
    """Solve a sparse square system.

    Direct (SuperLU) for ``n <= TOL.direct_max_unknowns``; otherwise MINRES
    when ``symmetric`` (indefinite saddle systems included) or GMRES.
    Accepts a matrix of right-hand sides on the direct path.
    """
    A = _as_csr(A)
    n = A.shape[0]
    if A.shape[1] != n:
        raise ValueError(f"sparse_solve needs a square matrix, got {A.shape}")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != n:
        raise ValueError("rhs length does not match matrix")

    if n <= TOL.direct_max_unknowns:
        x = factorize_sparse(A).solve(rhs)
        r = rhs - A @ x
        rn = np.linalg.norm(r, axis=0)
        bound = TOL.sparse_solve * (1.0 + np.linalg.norm(rhs, axis=0))
        if not np.all(np.isfinite(x)) or np.any(rn > bound):
            raise SingularMatrix(f"direct solve residual {np.max(rn):.3e} exceeds bound")
        return x

    if rhs.ndim != 1:
        return np.column_stack([sparse_solve(A, rhs[:, k], symmetric) for k in range(rhs.shape[1])])
    bnorm = np.linalg.norm(rhs)
    target = TOL.sparse_solve * (1.0 + bnorm)
    rtol = target / max(bnorm, 1e-300)
    if symmetric:
        x, info = spla.minres(A, rhs, rtol=rtol, maxiter=TOL.iterative_maxiter)
    else:
        x, info = spla.gmres(A, rhs, rtol=rtol, maxiter=TOL.iterative_maxiter, restart=200)
    res = float(np.linalg.norm(rhs - A @ x))
    if info != 0 or res > target:
        raise NoConvergence(TOL.iterative_maxiter if info > 0 else info, res)
    return x


# ---------------------------------------------------------------------------
# eigenproblems
# ---------------------------------------------------------------------------

def sym_eigen(A, B=None) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order.

    ``A`` is symmetrized as ``(A + A^T)/2``. With ``B`` (symmetric positive
    definite) the generalized problem ``A v = lam B v`` is solved and the
    eigenvectors are ``B``-orthonormal.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"sym_eigen needs a square matrix, got {A.shape}")
    As = 0.5 * (A + A.T)
    try:
        if B is None:
            lam, V = np.linalg.eigh(As)
        else:
            B = np.asarray(B, dtype=float)
            lam, V = sla.eigh(As, 0.5 * (B + B.T))
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise NoConvergence(0, float("nan"), f"eigensolver failed: {exc}") from exc
    order = np.argsort(-lam, kind="stable")
    return lam[order], V[:, order]


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, *keys)``.

    PCG64 output is platform independent, so equal keys give equal draws
    everywhere. Distinct ``keys`` give statistically independent streams.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


# ---------------------------------------------------------------------------
# container files
# ---------------------------------------------------------------------------
#
# A container is an uncompressed zip archive (readable by ``numpy.load``)
# holding one ``.npy`` member per array plus ``__header__.json``:
#
#   {"format": "rodl-container", "version": 1, "kind": <str>,
#    "arrays": {name: {"dtype": "<f8", "shape": [...]}, ...}, "meta": {...}}
#
# Floats are stored little-endian float64 ("<f8"), integers "<i8". Member
# timestamps are fixed so identical content gives identical bytes.

CONTAINER_FORMAT = "rodl-container"
CONTAINER_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _normalize(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind in "biu":
        return np.ascontiguousarray(arr, dtype="<i8")
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f8")
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def save_container(path, kind: str, arrays: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: _normalize(v) for k, v in arrays.items()}
    header = {
        "format": CONTAINER_FORMAT,
        "version": CONTAINER_VERSION,
        "kind": kind,
        "arrays": {k: {"dtype": v.dtype.str, "shape": list(v.shape)} for k, v in arrays.items()},
        "meta": dict(meta or {}),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("__header__.json", date_time=_EPOCH),
                    json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arrays[name], allow_pickle=False)
    return path


def load_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("__header__.json"))
            if header.get("format") != CONTAINER_FORMAT:
                raise ParseError(f"{path}: not a {CONTAINER_FORMAT} file")
            if header.get("version") != CONTAINER_VERSION:
                raise ParseError(f"{path}: unsupported version {header.get('version')}")
            if kind is not None and header.get("kind") != kind:
                raise ParseError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
            arrays = {}
            for name, spec in header["arrays"].items():
                with zf.open(f"{name}.npy") as fh:
                    arr = np.lib.format.read_array(fh, allow_pickle=False)
                if arr.dtype.str != spec["dtype"] or list(arr.shape) != list(spec["shape"]):
                    raise ParseError(f"{path}: array {name!r} disagrees with header")
                arrays[name] = arr
    except ParseError:
        raise
    except (OSError, KeyError, ValueError, TypeError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return arrays, header["meta"]


def read_header(path) -> dict[str, Any]:
    """Parsed ``__header__.json`` of a container, validated like ``load_container``."""
    path = Path(path)
    load_container(path)
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("__header__.json"))
