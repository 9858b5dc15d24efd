"""Finite Coleman-Hepp pointer: ``N`` apparatus spins rotated conditionally on the system level.

Model::

    K = 0,    V_r = (theta_r / 2) * sum_k sigma_y^(k),    Omega = |down ... down><down ... down|

so ``U_r(t)`` is a product of identical single-site rotations by angle
``theta_r t`` and ``Omega_{r,s}(t)`` factorizes over sites.  A macrostate is
a band of up-spin counts ``m``; the ``F`` tensor is a band sum of the
coefficients of the counting polynomial ``(p_rs + q_rs x)^N``, which costs
polynomial time in ``N`` instead of ``2^N``.

Single-site basis order is ``(up, down)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import gammaln, xlogy

from .linalg import PAULI_Y, ValidationError, kron_all
from .measurement import (
    ApparatusModel,
    CoupledModel,
    FTensor,
    PointerMapError,
    SystemModel,
    build_coupled,
    ideality_report,
    infer_pointer_map,
)

LOG_DOMAIN_ABOVE = 1000
DENSE_MAX_SPINS = 12


@dataclass(frozen=True)
class SpinChainApparatus:
    n_spins: int
    rotation_angles: tuple

    def __post_init__(self):
        if int(self.n_spins) != self.n_spins or self.n_spins < 1:
            raise ValidationError(f"n_spins must be a positive integer, got {self.n_spins}")
        angles = tuple(float(a) for a in self.rotation_angles)
        if len(angles) < 2:
            raise ValidationError("need a rotation angle for each of at least 2 system levels")
        if not all(math.isfinite(a) for a in angles):
            raise ValidationError(f"rotation angles must be finite, got {angles}")
        object.__setattr__(self, "n_spins", int(self.n_spins))
        object.__setattr__(self, "rotation_angles", angles)

    @property
    def n_levels(self) -> int:
        return len(self.rotation_angles)

    def up_probability(self, r: int, t: float) -> float:
        return math.sin(self.rotation_angles[r] * t / 2) ** 2


@dataclass(frozen=True)
class MagnetizationBands:
    """Contiguous bands of up-spin count ``m`` in ``0..n_spins``.

    ``edges`` are the interior cut points: band ``a`` is
    ``edges[a-1] <= m < edges[a]`` with implicit outer edges ``0`` and ``n_spins + 1``.
    """

    n_spins: int
    edges: tuple

    def __post_init__(self):
        edges = tuple(int(e) for e in self.edges)
        full = (0, *edges, self.n_spins + 1)
        if any(b <= a for a, b in zip(full[:-1], full[1:])):
            raise ValidationError(f"band edges {edges} do not give nonempty bands over 0..{self.n_spins}")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def majority(cls, n_spins: int) -> "MagnetizationBands":
        """Two bands split at half filling; a tie goes to the upper band."""
        return cls(n_spins, ((n_spins + 1) // 2,))

    @classmethod
    def equal_width(cls, n_spins: int, n_bands: int) -> "MagnetizationBands":
        """Band ``j`` holds the ``m`` with ``j/n <= m/N < (j+1)/n``; ``m = N`` joins the last band."""
        if not 1 <= n_bands <= n_spins + 1:
            raise ValidationError(f"{n_bands} bands cannot all be nonempty over m = 0..{n_spins}")
        return cls(n_spins, tuple(-(-j * n_spins // n_bands) for j in range(1, n_bands)))

    @property
    def count(self) -> int:
        return len(self.edges) + 1

    def slices(self) -> list[slice]:
        full = (0, *self.edges, self.n_spins + 1)
        return [slice(a, b) for a, b in zip(full[:-1], full[1:])]

    def band_of(self, m: int) -> int:
        return int(np.searchsorted(self.edges, m, side="right"))

    def projectors(self) -> list[np.ndarray]:
        """Dense diagonal projectors on ``2^N`` spin configurations."""
        n = self.n_spins
        idx = np.arange(2 ** n)
        ups = n - np.array([bin(i).count("1") for i in idx])     # bit 1 = down
        bands = np.searchsorted(self.edges, ups, side="right")
        return [np.diag((bands == a).astype(np.complex128)) for a in range(self.count)]


@dataclass(frozen=True)
class ScalingFit:
    c_hat: float
    intercept: float
    r_squared: float
    n_levels: int
    n_points: int


def site_transfer(theta_r: float, theta_s: float, t: float) -> tuple[complex, complex]:
    """Per-site weights ``(q_rs, p_rs)`` for a site counted up / down.

    With ``a_r = exp(-i theta_r t sigma_y / 2) |down>`` these are
    ``conj(a_s[up]) a_r[up]`` and ``conj(a_s[down]) a_r[down]``.
    """
    hr, hs = theta_r * t / 2, theta_s * t / 2
    q = complex(math.sin(hr) * math.sin(hs))
    p = complex(math.cos(hr) * math.cos(hs))
    return q, p


def _poly_power(base: np.ndarray, n: int) -> np.ndarray:
    out = np.ones(1, dtype=np.complex128)
    while n:
        if n & 1:
            out = np.convolve(out, base)
        n >>= 1
        if n:
            base = np.convolve(base, base)
    return out


def _log_binomial_coefficients(q: complex, p: complex, n: int) -> np.ndarray:
    m = np.arange(n + 1)
    logmag = (gammaln(n + 1) - gammaln(m + 1) - gammaln(n - m + 1)
              + xlogy(m, abs(q)) + xlogy(n - m, abs(p)))
    phase = m * np.angle(q) + (n - m) * np.angle(p)
    return np.exp(logmag) * np.exp(1j * phase)


def counting_polynomial(q: complex, p: complex, n: int) -> np.ndarray:
    """Coefficients of ``(p + q x)^n`` in increasing powers of ``x``."""
    if n > LOG_DOMAIN_ABOVE:
        return _log_binomial_coefficients(q, p, n)
    return _poly_power(np.array([p, q], dtype=np.complex128), n)


def f_coefficients_structured(app: SpinChainApparatus, bands: MagnetizationBands, t: float,
                              energies: Sequence[float] | None = None) -> FTensor:
    if bands.n_spins != app.n_spins:
        raise ValidationError(f"bands are for {bands.n_spins} spins, apparatus has {app.n_spins}")
    n = app.n_levels
    eps = np.zeros(n) if energies is None else np.asarray(energies, dtype=float)
    slices = bands.slices()
    values = np.empty((n, n, bands.count), dtype=np.complex128)
    for r in range(n):
        for s in range(r, n):
            q, p = site_transfer(app.rotation_angles[r], app.rotation_angles[s], t)
            coeffs = counting_polynomial(q, p, app.n_spins)
            phase = np.exp(1j * (eps[s] - eps[r]) * t)
            row = np.array([coeffs[sl].sum() for sl in slices]) * phase
            values[r, s] = row
            values[s, r] = row.conj()
    idx = np.arange(n)
    values[idx, idx] = values[idx, idx].real
    return FTensor(float(t), values)


def collective_sigma_y(n_spins: int) -> np.ndarray:
    eye = np.eye(2, dtype=np.complex128)
    total = np.zeros((2 ** n_spins, 2 ** n_spins), dtype=np.complex128)
    for k in range(n_spins):
        total += kron_all([PAULI_Y if j == k else eye for j in range(n_spins)])
    return total


def dense_model(app: SpinChainApparatus, bands: MagnetizationBands,
                amplitudes: Sequence[complex], energies: Sequence[float] | None = None) -> CoupledModel:
    """The same model on the full ``2^N`` apparatus space (small ``N`` only)."""
    if app.n_spins > DENSE_MAX_SPINS:
        raise ValidationError(f"dense model limited to {DENSE_MAX_SPINS} spins, got {app.n_spins}")
    n = app.n_levels
    eps = np.zeros(n) if energies is None else np.asarray(energies, dtype=float)
    dim = 2 ** app.n_spins
    omega = np.zeros((dim, dim), dtype=np.complex128)
    omega[-1, -1] = 1.0
    apparatus = ApparatusModel(np.zeros((dim, dim)), omega, tuple(bands.projectors()))
    sy = collective_sigma_y(app.n_spins)
    couplings = [theta / 2 * sy for theta in app.rotation_angles]
    return build_coupled(SystemModel(eps, amplitudes), apparatus, couplings)


def readout_time(theta: float, p_up: float) -> float:
    """Time at which a level rotating at ``theta`` has per-site up probability ``p_up``."""
    if theta == 0 or not 0 <= p_up <= 1:
        raise ValidationError(f"no readout time for theta={theta}, p_up={p_up}")
    return 2 * math.asin(math.sqrt(p_up)) / abs(theta)


BandFactory = Callable[[int], MagnetizationBands]


def eta_sweep(n_values: Iterable[int], angles: Sequence[float], t_star: float,
              bands: BandFactory = MagnetizationBands.majority,
              energies: Sequence[float] | None = None) -> list[tuple[int, float]]:
    """Measurement error ``eta(N)`` (largest diagonal deficit) at the readout time."""
    out = []
    for n_spins in n_values:
        app = SpinChainApparatus(int(n_spins), tuple(angles))
        f = f_coefficients_structured(app, bands(app.n_spins), t_star, energies)
        pointer = infer_pointer_map(f)
        if not pointer.bijective:
            raise PointerMapError(f"pointer map not bijective at N={n_spins}, t={t_star}")
        out.append((app.n_spins, ideality_report(f, pointer).diag_deficit))
    return out


def fit_exponential(points: Iterable[tuple[float, float]], n_levels: int = 2) -> ScalingFit:
    """Least-squares fit of ``log eta = intercept - (c / n) N``."""
    pts = list(points)
    usable = [(x, y) for x, y in pts if y > 0]
    if len(usable) < len(pts):
        warnings.warn(f"dropped {len(pts) - len(usable)} non-positive eta values from fit",
                      stacklevel=2)
    if len(usable) < 3:
        raise ValueError(f"need at least 3 positive points to fit, got {len(usable)}")
    x = np.array([u[0] for u in usable], dtype=float)
    y = np.log(np.array([u[1] for u in usable], dtype=float))
    design = np.column_stack([np.ones_like(x), x])
    (intercept, slope), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (intercept + slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return ScalingFit(float(-slope * n_levels), float(intercept), float(min(1.0, max(0.0, r2))),
                      n_levels, len(usable))


def binomial_pmf(n: int, p: float) -> np.ndarray:
    m = np.arange(n + 1)
    logpmf = (gammaln(n + 1) - gammaln(m + 1) - gammaln(n - m + 1)
              + xlogy(m, p) + xlogy(n - m, 1 - p))
    return np.exp(logpmf)


def reliability_probe(n_spins: int, n_bands: int, p: float | None = None) -> float:
    """Probability that the up-spin count lands outside the band targeted by ``p``.

    ``n_bands`` equal-width bands cover ``m / N`` in ``[0, 1]``; the target band
    is the one containing ``p``.  ``p`` defaults to the centre of the middle band.
    """
    if n_bands < 1 or n_spins < 1:
        raise ValidationError("need n_spins >= 1 and n_bands >= 1")
    if n_bands == 1:
        return 0.0
    if p is None:
        p = (n_bands // 2 + 0.5) / n_bands
    if not 0 <= p <= 1:
        raise ValidationError(f"p must lie in [0, 1], got {p}")
    bands = MagnetizationBands.equal_width(n_spins, n_bands)
    target = bands.slices()[min(int(p * n_bands), n_bands - 1)]
    pmf = binomial_pmf(n_spins, p)
    return math.fsum(pmf[:target.start]) + math.fsum(pmf[target.stop:])
