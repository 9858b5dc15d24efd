"""Dense finite-dimensional hermitian linear algebra.

Every operator is a plain ``numpy`` complex array.  The ``as_*`` helpers
validate an array against the invariants of its role (hermitian operator,
density matrix, projector, unitary) and hand back a read-only complex copy.

Composite indexing is row-major with the first factor slow, so for
``kron(a, b)`` the row index is ``i1 * d2 + i2``.  The system factor always
comes first.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

HERMITIAN_TOL = 1e-12
ALGEBRA_TOL = 1e-10
TRACE_TOL = 1e-8
DEGENERACY_GAP = 1e-9


class ValidationError(ValueError):
    """An operator does not satisfy the invariants of its role."""


class EigensolverError(RuntimeError):
    """The hermitian eigensolver failed to converge."""


def _frozen(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=np.complex128, copy=True)
    out.flags.writeable = False
    return out


def as_square(m, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ValidationError(f"{name} must be a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} has non-finite entries")
    return _frozen(m)


def hermiticity_error(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0


def as_hermitian(m, name: str = "operator", tol: float = HERMITIAN_TOL) -> np.ndarray:
    m = as_square(m, name)
    err = hermiticity_error(m)
    if err > tol * max(1.0, float(np.max(np.abs(m)))):
        raise ValidationError(f"{name} is not hermitian (max |m - m^H| = {err:.3e})")
    return m


def as_density_matrix(m, name: str = "density matrix") -> np.ndarray:
    m = as_hermitian(m, name, tol=ALGEBRA_TOL)
    tr = np.trace(m)
    if abs(tr - 1.0) > ALGEBRA_TOL:
        raise ValidationError(f"{name} has trace {tr.real:.12g}, expected 1")
    if pure_state_vector(m) is not None:
        return m
    lo = np.linalg.eigvalsh(m)[0]
    if lo < -ALGEBRA_TOL:
        raise ValidationError(f"{name} is not positive semidefinite (min eigenvalue {lo:.3e})")
    return m


def pure_state_vector(m, tol: float = ALGEBRA_TOL) -> np.ndarray | None:
    """A vector ``v`` with ``m = v v^H`` (entrywise within ``tol``), or ``None``."""
    m = np.asarray(m)
    d = np.real(np.diagonal(m))
    j = int(np.argmax(d))
    if d[j] <= tol:
        return None
    v = m[:, j] / np.sqrt(d[j])
    if np.max(np.abs(m - np.outer(v, v.conj()))) > tol:
        return None
    return v


def as_projector(m, name: str = "projector") -> np.ndarray:
    m = as_hermitian(m, name, tol=ALGEBRA_TOL)
    if np.linalg.norm(m @ m - m) > ALGEBRA_TOL:
        raise ValidationError(f"{name} is not idempotent")
    rank = np.trace(m).real
    if abs(rank - round(rank)) > TRACE_TOL:
        raise ValidationError(f"{name} has non-integer trace {rank:.12g}")
    return m


def projector_rank(p: np.ndarray) -> int:
    return int(round(np.trace(p).real))


def as_unitary(m, name: str = "unitary") -> np.ndarray:
    m = as_square(m, name)
    if np.linalg.norm(m.conj().T @ m - np.eye(m.shape[0])) > ALGEBRA_TOL:
        raise ValidationError(f"{name} is not unitary")
    return m


def tensor_product(a, b) -> np.ndarray:
    """Kronecker product ``a (x) b`` of two square matrices, first factor slow."""
    a = as_square(a, "left factor")
    b = as_square(b, "right factor")
    d1, d2 = a.shape[0], b.shape[0]
    out = np.einsum("ij,kl->ikjl", a, b).reshape(d1 * d2, d1 * d2)
    out.flags.writeable = False
    return out


def kron_all(factors: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones((1, 1), dtype=np.complex128)
    for f in factors:
        out = np.kron(out, f)
    return out


def _eigh(a: np.ndarray):
    try:
        return np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(
            f"eigh failed on a {a.shape[0]}x{a.shape[0]} hermitian matrix: {exc}"
        ) from exc


def apply_function(a, func) -> np.ndarray:
    """Return ``func(a)`` for hermitian ``a`` through its eigendecomposition.

    ``func`` acts elementwise on the real eigenvalue array.
    """
    a = as_hermitian(a)
    w, v = _eigh(a)
    return _frozen((v * func(w)) @ v.conj().T)


def evolve_unitary(k, t: float) -> np.ndarray:
    """``exp(i k t)`` for hermitian ``k``.

    Note the sign: the propagator is ``exp(+i k t)`` and states evolve as
    ``U^H rho U``, equivalent to the usual convention with ``k -> -k``.
    """
    if not np.isfinite(t):
        raise ValidationError(f"time must be finite, got {t}")
    return apply_function(k, lambda w: np.exp(1j * w * t))


def spectral_decompose(a, gap: float = DEGENERACY_GAP) -> list[tuple[float, np.ndarray]]:
    """Eigenvalues in ascending order with their spectral projectors.

    Eigenvalues closer than ``gap`` are merged into one eigenspace whose
    eigenvalue is the mean of the cluster.
    """
    a = as_hermitian(a)
    w, v = _eigh(a)
    groups: list[list[int]] = [[0]]
    for i in range(1, len(w)):
        if w[i] - w[groups[-1][-1]] < gap:
            groups[-1].append(i)
        else:
            groups.append([i])
    out = []
    for g in groups:
        vecs = v[:, g]
        out.append((float(np.mean(w[g])), _frozen(vecs @ vecs.conj().T)))
    return out


def commutator(a, b) -> np.ndarray:
    a = as_square(a, "a")
    b = as_square(b, "b")
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a @ b - b @ a


def commutator_norm(a, b) -> float:
    """Operator norm (largest singular value) of ``ab - ba``."""
    return float(np.linalg.norm(commutator(a, b), 2))


def operator_norm(m) -> float:
    return float(np.linalg.norm(np.asarray(m), 2))


def partial_trace(m, dims: tuple[int, int], over: int = 1) -> np.ndarray:
    """Trace out factor ``over`` (0 = first, 1 = second) of a bipartite matrix."""
    m = as_square(m)
    d1, d2 = dims
    if d1 < 1 or d2 < 1 or d1 * d2 != m.shape[0]:
        raise ValidationError(f"dimension {m.shape[0]} does not factor as {d1} x {d2}")
    t = m.reshape(d1, d2, d1, d2)
    if over == 1:
        out = np.einsum("ikjk->ij", t)
    elif over == 0:
        out = np.einsum("kikj->ij", t)
    else:
        raise ValidationError(f"over must be 0 or 1, got {over}")
    return _frozen(out)


def random_hermitian(rng: np.random.Generator, dim: int, scale: float = 1.0) -> np.ndarray:
    z = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * (z + z.conj().T) / 2


def random_unitary(rng: np.random.Generator, dim: int) -> np.ndarray:
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def random_density_matrix(rng: np.random.Generator, dim: int, rank: int | None = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    rho = (rho + rho.conj().T) / 2
    return rho / np.trace(rho).real


PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
for _p in (PAULI_X, PAULI_Y, PAULI_Z):
    _p.flags.writeable = False
