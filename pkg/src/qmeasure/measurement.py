"""Coupled system/apparatus measurement scheme on finite-dimensional spaces.

The system has ``n`` levels with energies ``eps_r`` and the coordinate basis
as its energy eigenbasis.  The apparatus has a free Hamiltonian ``K``, an
initial density matrix ``Omega`` and a family of orthogonal macrostate
projectors ``Pi_alpha`` summing to the identity.  A coupling that does not
induce transitions between system levels is a list of apparatus operators
``V_r``, one per level, and the coupled Hamiltonian is block diagonal::

    H_c = sum_r P(u_r) (x) K_r,     K_r = K + V_r + eps_r I

All dynamics is then carried by the tensor::

    F[r, s, a] = Tr(U_r(t)^H  Omega  U_s(t)  Pi_a),   U_r(t) = exp(i K_r t)

from which the pointer probabilities, expectation values and conditional
expectation values are assembled without ever forming the coupled state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import expm_multiply

from .linalg import (
    ALGEBRA_TOL,
    HERMITIAN_TOL,
    ValidationError,
    as_density_matrix,
    as_hermitian,
    as_projector,
    evolve_unitary,
    projector_rank,
    pure_state_vector,
    random_density_matrix,
    random_hermitian,
    random_unitary,
    tensor_product,
)

NULL_WEIGHT = 1e-12
POPULATED = 1e-8


class NullMacrostateError(ValueError):
    """Conditioning on a macrostate that has (numerically) zero probability."""


class AmbiguousPointerError(ValueError):
    """Two macrostates tie for the largest weight of a system level."""


class PointerMapError(ValueError):
    """A diagnostic needs a bijective pointer map and did not get one."""


def _readonly(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SystemModel:
    energies: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        c = np.asarray(self.amplitudes, dtype=np.complex128)
        if e.ndim != 1 or c.shape != e.shape:
            raise ValidationError("energies and amplitudes must be 1-D of equal length")
        if e.size < 2:
            raise ValidationError(f"system needs at least 2 levels, got {e.size}")
        norm = float(np.sum(np.abs(c) ** 2))
        if abs(norm - 1.0) > HERMITIAN_TOL:
            raise ValidationError(f"amplitudes are not normalized (sum |c|^2 = {norm:.15g})")
        object.__setattr__(self, "energies", _readonly(e, float))
        object.__setattr__(self, "amplitudes", _readonly(c, np.complex128))

    @property
    def n(self) -> int:
        return self.energies.size

    @property
    def hamiltonian(self) -> np.ndarray:
        return np.diag(self.energies).astype(np.complex128)

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @property
    def state(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())


@dataclass(frozen=True)
class ApparatusModel:
    free_hamiltonian: np.ndarray
    initial_state: np.ndarray
    macrostates: tuple

    def __post_init__(self):
        k = as_hermitian(self.free_hamiltonian, "apparatus Hamiltonian")
        omega = as_density_matrix(self.initial_state, "apparatus initial state")
        if omega.shape != k.shape:
            raise ValidationError("apparatus Hamiltonian and initial state differ in dimension")
        if len(self.macrostates) < 1:
            raise ValidationError("at least one macrostate projector is required")
        projs = tuple(as_projector(p, f"macrostate {i}") for i, p in enumerate(self.macrostates))
        total = np.zeros_like(k)
        for i, p in enumerate(projs):
            if p.shape != k.shape:
                raise ValidationError(f"macrostate {i} has shape {p.shape}, expected {k.shape}")
            if projector_rank(p) < 1:
                raise ValidationError(f"macrostate {i} is the zero projector")
            total = total + p
        if np.linalg.norm(total - np.eye(k.shape[0])) > ALGEBRA_TOL:
            raise ValidationError("macrostate projectors must be orthogonal and sum to the identity")
        object.__setattr__(self, "free_hamiltonian", k)
        object.__setattr__(self, "initial_state", omega)
        object.__setattr__(self, "macrostates", projs)

    @property
    def dim_k(self) -> int:
        return self.free_hamiltonian.shape[0]

    @property
    def nu(self) -> int:
        return len(self.macrostates)


@dataclass(frozen=True)
class CoupledModel:
    system: SystemModel
    apparatus: ApparatusModel
    couplings: tuple
    sector_hamiltonians: tuple

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def dim_k(self) -> int:
        return self.apparatus.dim_k

    @property
    def nu(self) -> int:
        return self.apparatus.nu

    @property
    def dim(self) -> int:
        return self.n * self.dim_k

    def hamiltonian(self) -> np.ndarray:
        """``H_c`` assembled from the sector Hamiltonians."""
        n, d = self.n, self.dim_k
        h = np.zeros((n * d, n * d), dtype=np.complex128)
        for r, kr in enumerate(self.sector_hamiltonians):
            h[r * d:(r + 1) * d, r * d:(r + 1) * d] = kr
        return h

    def hamiltonian_sum_form(self) -> np.ndarray:
        """``H (x) I + I (x) K + sum_r P(u_r) (x) V_r``, built independently of the sectors."""
        n, d = self.n, self.dim_k
        h = tensor_product(self.system.hamiltonian, np.eye(d))
        h = h + tensor_product(np.eye(n), self.apparatus.free_hamiltonian)
        for r, v in enumerate(self.couplings):
            pr = np.zeros((n, n), dtype=np.complex128)
            pr[r, r] = 1.0
            h = h + tensor_product(pr, v)
        return h

    def initial_state(self) -> np.ndarray:
        return tensor_product(self.system.state, self.apparatus.initial_state)


@dataclass(frozen=True)
class FTensor:
    """``values[r, s, a]`` at a fixed time.  Construction does not validate;
    see :func:`f_condition_violations`."""

    time: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 3 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"F tensor must have shape (n, n, nu), got {v.shape}")
        object.__setattr__(self, "values", _readonly(v, np.complex128))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def nu(self) -> int:
        return self.values.shape[2]

    def diagonal(self) -> np.ndarray:
        """Real array ``d[r, a] = Re F[r, r, a]``."""
        idx = np.arange(self.n)
        return self.values[idx, idx, :].real


@dataclass(frozen=True)
class PointerMap:
    mapping: tuple
    bijective: bool


@dataclass(frozen=True)
class IdealityReport:
    offdiag_max: float
    diag_deficit: float


@dataclass(frozen=True)
class CollapseReport:
    collapse_residual: float
    projection_residual: float
    born_residual: float


def build_coupled(system: SystemModel, apparatus: ApparatusModel,
                  couplings: Sequence) -> CoupledModel:
    if len(couplings) != system.n:
        raise ValidationError(f"need {system.n} couplings, got {len(couplings)}")
    d = apparatus.dim_k
    vs = []
    for r, v in enumerate(couplings):
        v = as_hermitian(v, f"coupling V_{r}")
        if v.shape != (d, d):
            raise ValidationError(f"coupling V_{r} has shape {v.shape}, expected {(d, d)}")
        vs.append(v)
    k = apparatus.free_hamiltonian
    sectors = []
    for r, v in enumerate(vs):
        kr = k + v + system.energies[r] * np.eye(d)
        kr.flags.writeable = False
        sectors.append(kr)
    return CoupledModel(system, apparatus, tuple(vs), tuple(sectors))


def sector_propagators(model: CoupledModel, t: float) -> list[np.ndarray]:
    return [evolve_unitary(kr, t) for kr in model.sector_hamiltonians]


def f_coefficients(model: CoupledModel, t: float, method: str = "auto") -> FTensor:
    """The ``F`` tensor at time ``t``.

    ``"propagator"`` forms every ``U_r`` by diagonalization.  ``"action"``
    needs a pure ``Omega = |w><w|`` and only evolves the vectors
    ``v_r = U_r^H w``, since then ``F[r, s, a] = v_s^H Pi_a v_r``; this avoids a
    full eigendecomposition per sector.  ``"auto"`` takes the action route
    whenever ``Omega`` is pure.
    """
    if method not in ("auto", "action", "propagator"):
        raise ValidationError(f"unknown method {method!r}")
    omega = model.apparatus.initial_state
    w = pure_state_vector(omega) if method != "propagator" else None
    if method == "action" and w is None:
        raise ValidationError("the action route needs a pure initial apparatus state")
    pis = np.stack(model.apparatus.macrostates)
    if w is not None:
        vs = np.column_stack([expm_multiply(-1j * t * kr, w) if t else w
                              for kr in model.sector_hamiltonians])
        values = np.einsum("is,air->rsa", vs.conj(), pis @ vs)
        return FTensor(float(t), values)
    us = np.stack(sector_propagators(model, t))
    n, d = us.shape[0], us.shape[1]
    left = us.conj().transpose(0, 2, 1) @ omega                  # U_r^H Omega
    flat_u = us.transpose(0, 2, 1).reshape(n, d * d)
    values = np.empty((n, n, pis.shape[0]), dtype=np.complex128)
    for a, pi in enumerate(pis):
        # Tr(Pi_a L_r U_s) = sum_ij (Pi_a L_r)_ij (U_s)_ji
        values[:, :, a] = (pi @ left).reshape(n, d * d) @ flat_u.T
    return FTensor(float(t), values)


def full_state(model: CoupledModel, t: float) -> np.ndarray:
    """Coupled state ``U^H Phi(0) U`` with ``U = exp(i H_c t)`` on the full space.

    Dense and independent of :func:`f_coefficients`; intended for checks on
    small models.
    """
    u = evolve_unitary(model.hamiltonian_sum_form(), t)
    return u.conj().T @ model.initial_state() @ u


SystemLike = SystemModel | CoupledModel


def _system_of(model, f: FTensor) -> SystemModel:
    """The system part of ``model``, after checking ``f`` has matching shape."""
    system = model.system if isinstance(model, CoupledModel) else model
    nu = model.nu if isinstance(model, CoupledModel) else f.nu
    if f.n != system.n or f.nu != nu:
        raise ValidationError(
            f"F tensor shape {f.values.shape} does not match model (n={system.n}, nu={nu})")
    return system


def _weighted(system: SystemModel, f: FTensor) -> np.ndarray:
    """``G[r, s, a] = conj(c_r) c_s F[s, r, a]``.

    With ``Phi(0) = |psi><psi| (x) Omega`` the coefficient of
    ``conj(c_r) c_s (u_r, A u_s)`` in ``Tr(Phi(t) (A (x) Pi_a))`` is
    ``F[s, r, a]``; pairing it with ``F[r, s, a]`` would conjugate every
    interference term.
    """
    c = system.amplitudes
    return np.einsum("r,s,sra->rsa", c.conj(), c, f.values)


def pointer_probabilities(model: SystemLike, f: FTensor) -> np.ndarray:
    """Weights ``w_a`` of the macrostates.

    ``model`` may be a :class:`CoupledModel` or just its :class:`SystemModel`;
    the functionals below read only the amplitudes and the ``F`` tensor.
    """
    return _system_of(model, f).populations @ f.diagonal()


def _check_observable(system: SystemModel, a) -> np.ndarray:
    a = as_hermitian(a, "observable")
    if a.shape != (system.n, system.n):
        raise ValidationError(f"observable has shape {a.shape}, expected {(system.n, system.n)}")
    return a


def expectation(model: SystemLike, f: FTensor, a) -> float:
    system = _system_of(model, f)
    a = _check_observable(system, a)
    g = _weighted(system, f).sum(axis=2)
    diag = float(np.sum(system.populations * np.diagonal(a).real))
    off = g * a
    off = off.sum() - np.trace(off)
    return diag + float(off.real)


def conditional_expectation(model: SystemLike, f: FTensor, a, alpha: int) -> float:
    system = _system_of(model, f)
    a = _check_observable(system, a)
    w = pointer_probabilities(system, f)[alpha]
    if w <= NULL_WEIGHT:
        raise NullMacrostateError(
            f"conditioning on null macrostate {alpha} (probability {w:.3e})")
    g = _weighted(system, f)[:, :, alpha]
    return float(np.sum(g * a).real) / w


def f_condition_violations(f: FTensor) -> dict[str, float]:
    """Largest violation of each structural condition on ``F`` (0 means satisfied)."""
    v = f.values
    d = np.diagonal(v, axis1=0, axis2=1)        # (nu, n) entries F[r, r, a]
    herm = float(np.max(np.abs(v - np.conj(np.transpose(v, (1, 0, 2))))))
    bounds = float(max(0.0, -d.real.min(), d.real.max() - 1.0, np.abs(d.imag).max()))
    sum_rule = float(np.max(np.abs(d.sum(axis=0) - 1.0)))
    psd = 0.0
    for a in range(f.nu):
        block = v[:, :, a]
        lo = np.linalg.eigvalsh((block + block.conj().T) / 2)[0]
        psd = max(psd, float(-lo))
    dd = d.real.T                                # (n, nu)
    bound = np.einsum("ra,sa->rsa", dd, dd) - np.abs(v) ** 2
    positivity = float(max(0.0, -bound.min()))
    return {
        "hermitian": herm,
        "diagonal_bounds": bounds,
        "sum_rule": sum_rule,
        "psd": psd,
        "positivity_bound": positivity,
    }


def infer_pointer_map(f: FTensor, tie_tol: float = 1e-12) -> PointerMap:
    d = f.diagonal()
    mapping = []
    for r in range(f.n):
        order = np.argsort(-d[r], kind="stable")
        if f.nu > 1 and d[r, order[0]] - d[r, order[1]] <= tie_tol:
            raise AmbiguousPointerError(
                f"level {r} ties between macrostates {order[0]} and {order[1]}")
        mapping.append(int(order[0]))
    permutation = f.nu == f.n and len(set(mapping)) == f.n
    bijective = permutation and min(d[r, a] for r, a in enumerate(mapping)) > 0.5
    return PointerMap(tuple(mapping), bool(bijective))


def ideality_report(f: FTensor, pointer: PointerMap) -> IdealityReport:
    """Largest interference entry and largest diagonal deficit ``1 - F[r, r, a(r)]``.

    The deficit is summed over the other macrostates instead of subtracted
    from one, so exponentially small deficits keep their relative precision.
    """
    n = f.n
    off = np.abs(f.values.copy())
    off[np.arange(n), np.arange(n), :] = 0.0
    d = f.diagonal()
    deficit = 0.0
    for r, a in enumerate(pointer.mapping):
        others = np.delete(d[r], a)
        deficit = max(deficit, float(np.sum(others)))
    return IdealityReport(float(off.max()), deficit)


def collapse_check(model: SystemLike, f: FTensor, a, pointer: PointerMap) -> CollapseReport:
    """Residuals of the collapse, projection and Born statements for a bijective pointer.

    Every residual is assembled from small terms only, so residuals far below
    machine epsilon stay resolved:

    * projection: ``E(A|K_a(r)) - A_rr`` has numerator
      ``sum_{(s,s') != (r,r)} G[s,s',a] A_ss' - A_rr sum_{s != r} |c_s|^2 F[s,s,a]``,
      an exact rearrangement;
    * Born: ``w_a(r) - |c_r|^2`` is evaluated as
      ``sum_{s != r} |c_s|^2 F[s,s,a(r)] - |c_r|^2 sum_{b != a(r)} F[r,r,b]``,
      which uses the sum rule ``sum_b F[r,r,b] = 1`` (checked by
      :func:`f_condition_violations`).
    """
    if not pointer.bijective:
        raise PointerMapError("collapse diagnostics need a bijective pointer map")
    system = _system_of(model, f)
    a = _check_observable(system, a)
    pops = system.populations
    diag = np.diagonal(a).real
    collapse = abs(expectation(system, f, a) - float(np.sum(pops * diag)))
    w = pointer_probabilities(system, f)
    d = f.diagonal().real
    g = _weighted(system, f)
    projection, born = 0.0, 0.0
    for r, alpha in enumerate(pointer.mapping):
        others = np.arange(system.n) != r
        leak_in = float(np.sum(pops[others] * d[others, alpha]))
        leak_out = pops[r] * float(np.sum(np.delete(d[r], alpha)))
        born = max(born, abs(leak_in - leak_out))
        if pops[r] > POPULATED:
            ga = g[:, :, alpha] * a
            num = np.sum(ga) - ga[r, r] - diag[r] * leak_in
            projection = max(projection, abs(float(num.real)) / w[alpha])
    return CollapseReport(float(collapse), float(projection), float(born))


# dense checks --------------------------------------------------------------

def dense_pointer_probabilities(model: CoupledModel, phi: np.ndarray) -> np.ndarray:
    eye = np.eye(model.n)
    return np.array([np.trace(phi @ tensor_product(eye, p)).real
                     for p in model.apparatus.macrostates])


def dense_expectation(model: CoupledModel, phi: np.ndarray, a) -> float:
    return float(np.trace(phi @ tensor_product(a, np.eye(model.dim_k))).real)


def dense_conditional_expectation(model: CoupledModel, phi: np.ndarray, a, alpha: int) -> float:
    pi = model.apparatus.macrostates[alpha]
    w = np.trace(phi @ tensor_product(np.eye(model.n), pi)).real
    if w <= NULL_WEIGHT:
        raise NullMacrostateError(f"conditioning on null macrostate {alpha}")
    return float(np.trace(phi @ tensor_product(a, pi)).real) / w


def dense_f_coefficients(model: CoupledModel, phi: np.ndarray) -> np.ndarray:
    """Read ``F`` back off the coupled state by partial traces of its ``(r, s)`` blocks.

    Only valid when every amplitude is nonzero.
    """
    c = model.system.amplitudes
    d = model.dim_k
    blocks = phi.reshape(model.n, d, model.n, d)
    out = np.empty((model.n, model.n, model.nu), dtype=np.complex128)
    for r in range(model.n):
        for s in range(model.n):
            omega_rs = blocks[r, :, s, :] / (c[r] * np.conj(c[s]))
            for a, pi in enumerate(model.apparatus.macrostates):
                out[r, s, a] = np.trace(omega_rs @ pi)
    return out


# model factories -----------------------------------------------------------

def random_macrostates(rng: np.random.Generator, dim_k: int, nu: int,
                       rotate: bool = True) -> list[np.ndarray]:
    """``nu`` orthogonal projectors of random (nonzero) rank covering ``C^dim_k``."""
    if not 1 <= nu <= dim_k:
        raise ValidationError(f"need 1 <= nu <= dim_k, got nu={nu}, dim_k={dim_k}")
    cuts = np.sort(rng.choice(np.arange(1, dim_k), size=nu - 1, replace=False))
    edges = [0, *cuts.tolist(), dim_k]
    basis = random_unitary(rng, dim_k) if rotate else np.eye(dim_k)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        v = basis[:, lo:hi]
        out.append(v @ v.conj().T)
    return out


def random_model(rng: np.random.Generator, n: int, dim_k: int, nu: int | None = None,
                 coupling_scale: float = 1.0) -> CoupledModel:
    nu = n if nu is None else nu
    amps = rng.normal(size=n) + 1j * rng.normal(size=n)
    amps /= np.linalg.norm(amps)
    system = SystemModel(rng.normal(size=n), amps)
    apparatus = ApparatusModel(
        random_hermitian(rng, dim_k),
        random_density_matrix(rng, dim_k),
        tuple(random_macrostates(rng, dim_k, nu)),
    )
    couplings = [random_hermitian(rng, dim_k, coupling_scale) for _ in range(n)]
    return build_coupled(system, apparatus, couplings)
