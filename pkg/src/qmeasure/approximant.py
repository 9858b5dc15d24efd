"""Discrete-spectrum approximants of continuous-spectrum observables and finite rational instruments.

A continuous spectrum is represented by a fine-grid hermitian operator (the
proxy) whose spectrum lies in ``[a, b]``.  A partition of ``[a, b]`` into bins
of width ``eps`` with one representative point per bin defines the
approximant ``F(A) = sum_k rep_k (E(cut_{k+1}) - E(cut_k))``: every eigenvalue
is replaced by the representative of its bin.  Bins are half-open,
``[cut_k, cut_{k+1})``, except the last, which is closed at ``b``.

A :class:`QInstrument` is what a laboratory device can actually report:
finitely many states, each with an exact rational readout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .linalg import (
    ALGEBRA_TOL,
    ValidationError,
    as_hermitian,
    as_projector,
    projector_rank,
    random_unitary,
)

RANGE_SLACK = 1e-10


class NoAdmissibleRationalError(ValueError):
    """No rational with the allowed denominator lies inside a bin."""


def bin_count(a: float, b: float, eps: float) -> int:
    """``ceil((b - a) / eps)``, ignoring round-off just above an integer."""
    x = (b - a) / eps
    k = round(x)
    if abs(x - k) <= 1e-9 * max(1.0, x):
        return max(1, int(k))
    return math.ceil(x)


@dataclass(frozen=True)
class Partition:
    epsilon: float
    cuts: tuple
    representatives: tuple

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        reps = tuple(float(r) for r in self.representatives)
        if len(cuts) != len(reps) + 1 or len(reps) < 1:
            raise ValidationError("need one more cut than representatives")
        if any(hi <= lo for lo, hi in zip(cuts[:-1], cuts[1:])):
            raise ValidationError("cuts must be strictly increasing")
        for k, r in enumerate(reps):
            if not self._inside(k, r, cuts):
                raise ValidationError(
                    f"representative {r} outside bin {k} [{cuts[k]}, {cuts[k + 1]})")
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "representatives", reps)

    @staticmethod
    def _inside(k: int, x, cuts) -> bool:
        last = k == len(cuts) - 2
        return cuts[k] <= x and (x < cuts[k + 1] or (last and x <= cuts[k + 1]))

    @property
    def n_bins(self) -> int:
        return len(self.representatives)

    @property
    def lower(self) -> float:
        return self.cuts[0]

    @property
    def upper(self) -> float:
        return self.cuts[-1]

    def bin_bounds(self, k: int) -> tuple[float, float]:
        return self.cuts[k], self.cuts[k + 1]

    def contains(self, k: int, x) -> bool:
        return self._inside(k, x, self.cuts)

    def locate(self, values) -> np.ndarray:
        """Bin index of each value (cut points go to the bin on their right)."""
        v = np.asarray(values, dtype=float)
        span = self.upper - self.lower
        if np.any(v < self.lower - RANGE_SLACK * span) or np.any(v > self.upper + RANGE_SLACK * span):
            raise ValidationError(f"values outside partition range [{self.lower}, {self.upper}]")
        idx = np.searchsorted(self.cuts, v, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "cuts": list(self.cuts),
                "representatives": list(self.representatives)}

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        return cls(float(d["epsilon"]), tuple(d["cuts"]), tuple(d["representatives"]))


def make_partition(a: float, b: float, eps: float, rule="midpoint") -> Partition:
    """Uniform partition of ``[a, b]`` with spacing ``eps``; the last bin is truncated at ``b``.

    ``rule`` is ``"midpoint"``, ``"left"`` or an explicit list of representatives.
    """
    if not eps > 0:
        raise ValidationError(f"epsilon must be positive, got {eps}")
    if not b > a:
        raise ValidationError(f"need b > a, got [{a}, {b}]")
    j = bin_count(a, b, eps)
    cuts = [a + k * eps for k in range(j)] + [b]
    if isinstance(rule, str):
        if rule == "midpoint":
            reps = [(lo + hi) / 2 for lo, hi in zip(cuts[:-1], cuts[1:])]
        elif rule == "left":
            reps = cuts[:-1]
        else:
            raise ValidationError(f"unknown representative rule {rule!r}")
    else:
        reps = [float(r) for r in rule]
        if len(reps) != j:
            raise ValidationError(f"need {j} representatives, got {len(reps)}")
    return Partition(float(eps), tuple(cuts), tuple(reps))


@dataclass(frozen=True)
class ContinuumProxy:
    operator: np.ndarray
    lower: float
    upper: float

    def __post_init__(self):
        op = as_hermitian(self.operator, "proxy operator")
        w = np.linalg.eigvalsh(op)
        span = self.upper - self.lower
        if w[0] < self.lower - RANGE_SLACK * span or w[-1] > self.upper + RANGE_SLACK * span:
            raise ValidationError(
                f"proxy spectrum [{w[0]:.6g}, {w[-1]:.6g}] not inside [{self.lower}, {self.upper}]")
        object.__setattr__(self, "operator", op)

    @property
    def grid_dim(self) -> int:
        return self.operator.shape[0]

    @classmethod
    def position(cls, grid_dim: int, lower: float = 0.0, upper: float = 1.0) -> "ContinuumProxy":
        """Diagonal position grid ``lower + j (upper - lower) / D``, ``j = 0..D-1``."""
        x = lower + np.arange(grid_dim) * (upper - lower) / grid_dim
        return cls(np.diag(x), lower, upper)

    @classmethod
    def random(cls, rng: np.random.Generator, grid_dim: int,
               lower: float = -1.0, upper: float = 1.0) -> "ContinuumProxy":
        """Random eigenbasis with eigenvalues drawn uniformly from ``[lower, upper]``."""
        u = random_unitary(rng, grid_dim)
        w = rng.uniform(lower, upper, size=grid_dim)
        op = (u * w) @ u.conj().T
        return cls((op + op.conj().T) / 2, lower, upper)


def approximant(proxy: ContinuumProxy, partition: Partition) -> np.ndarray:
    if partition.lower > proxy.lower or partition.upper < proxy.upper:
        raise ValidationError("partition must cover the proxy range")
    w, v = np.linalg.eigh(proxy.operator)
    reps = np.asarray(partition.representatives)[partition.locate(w)]
    out = (v * reps) @ v.conj().T
    return (out + out.conj().T) / 2


@dataclass(frozen=True)
class QInstrument:
    readouts: tuple

    def __post_init__(self):
        rs = tuple(Fraction(r) for r in self.readouts)
        if not rs:
            raise ValidationError("an instrument needs at least one state")
        if len(set(rs)) != len(rs):
            raise ValidationError("readouts must be distinct")
        object.__setattr__(self, "readouts", rs)

    @property
    def state_count(self) -> int:
        return len(self.readouts)

    def as_strings(self) -> list[str]:
        return [format_rational(r) for r in self.readouts]

    @classmethod
    def from_strings(cls, items: Sequence[str]) -> "QInstrument":
        return cls(tuple(parse_rational(s) for s in items))


def format_rational(x: Fraction) -> str:
    return f"{x.numerator}/{x.denominator}"


def parse_rational(s: str) -> Fraction:
    num, _, den = s.partition("/")
    return Fraction(int(num), int(den or 1))


def best_rational_in_bin(x: float, lo: float, hi: float, max_denominator: int,
                         closed: bool = False) -> Fraction:
    """Closest rational to ``x`` in ``[lo, hi)`` (``[lo, hi]`` if ``closed``) with denominator <= ``max_denominator``.

    Ties go to the candidate nearer the bin midpoint, then to the smaller denominator.
    """
    # exact integer arithmetic: x = xn/xd, lo = ln/ld, hi = hn/hd, midpoint = mn/md
    xn, xd = Fraction(x).as_integer_ratio()
    ln, ld = Fraction(lo).as_integer_ratio()
    hn, hd = Fraction(hi).as_integer_ratio()
    mn, md = ln * hd + hn * ld, 2 * ld * hd
    best, best_key = None, None
    for q in range(1, max_denominator + 1):
        p_min = -((-ln * q) // ld)
        p_max, rem = divmod(hn * q, hd)
        if rem == 0 and not closed:
            p_max -= 1
        if p_min > p_max:
            continue
        base = xn * q // xd
        for p in {min(max(base, p_min), p_max), min(max(base + 1, p_min), p_max)}:
            # distances to x and to the midpoint share the factors 1/xd and 1/md
            key = (abs(p * xd - xn * q), abs(p * md - mn * q), q)
            if best is None or _closer(key, best_key):
                best, best_key = (p, q), key
    if best is None:
        raise NoAdmissibleRationalError(
            f"no rational with denominator <= {max_denominator} in [{lo}, {hi}); "
            f"use max_denominator >= {bin_count(lo, hi, (hi - lo) ** 2)}")
    return Fraction(*best)


def _closer(a: tuple, b: tuple) -> bool:
    """Whether candidate ``a`` beats ``b``; keys are ``(e_x, e_mid, q)`` with distances ``e / q``."""
    for ea, eb in ((a[0], b[0]), (a[1], b[1])):
        lhs, rhs = ea * b[2], eb * a[2]
        if lhs != rhs:
            return lhs < rhs
    return a[2] < b[2]


def rationalize(partition: Partition, max_denominator: int) -> QInstrument:
    if max_denominator < 1:
        raise ValidationError(f"max_denominator must be >= 1, got {max_denominator}")
    out = []
    for k, rep in enumerate(partition.representatives):
        lo, hi = partition.bin_bounds(k)
        out.append(best_rational_in_bin(rep, lo, hi, max_denominator,
                                        closed=k == partition.n_bins - 1))
    return QInstrument(tuple(out))


@dataclass(frozen=True)
class TradeoffReport:
    levels: int
    reliable: bool
    risk_exponent: float


def tradeoff_report(lower: float, upper: float, eps: float, apparatus_size: float) -> TradeoffReport:
    """Resolution against apparatus size, with the decay constant set to 1.

    ``reliable`` means ``n <= sqrt(N) / 3``, a safety margin chosen here.
    """
    if not eps > 0 or apparatus_size < 1:
        raise ValidationError("need eps > 0 and apparatus_size >= 1")
    n = bin_count(lower, upper, eps)
    return TradeoffReport(n, bool(n <= math.sqrt(apparatus_size) / 3), apparatus_size / n ** 2)


@dataclass(frozen=True)
class LMeasurableOperator:
    values: tuple
    projectors: tuple

    @property
    def operator(self) -> np.ndarray:
        return sum(q * e for q, e in zip(self.values, self.projectors))


def l_measurable(values: Sequence, basis: Sequence) -> LMeasurableOperator:
    """``sum_j q_j E_j`` over an orthonormal family of rank-1 projectors."""
    if len(values) != len(basis):
        raise ValidationError(f"{len(values)} values for {len(basis)} projectors")
    projs = tuple(as_projector(e, f"E_{j}") for j, e in enumerate(basis))
    for j, e in enumerate(projs):
        if projector_rank(e) != 1:
            raise ValidationError(f"E_{j} is not rank 1")
    for i in range(len(projs)):
        for j in range(i + 1, len(projs)):
            if np.linalg.norm(projs[i] @ projs[j]) > ALGEBRA_TOL:
                raise ValidationError(f"E_{i} and E_{j} are not orthogonal")
    return LMeasurableOperator(tuple(values), projs)


def rank_one_projectors(vectors: np.ndarray) -> list[np.ndarray]:
    """Projectors onto the columns of ``vectors``."""
    v = np.asarray(vectors, dtype=np.complex128)
    return [np.outer(v[:, j], v[:, j].conj()) for j in range(v.shape[1])]


def fourier_basis(dim: int) -> np.ndarray:
    j = np.arange(dim)
    return np.exp(2j * np.pi * np.outer(j, j) / dim) / np.sqrt(dim)
