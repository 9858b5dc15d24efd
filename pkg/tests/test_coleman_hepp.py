import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from qmeasure import coleman_hepp as ch
from qmeasure.coleman_hepp import (
    MagnetizationBands,
    SpinChainApparatus,
    counting_polynomial,
    dense_model,
    eta_sweep,
    f_coefficients_structured,
    fit_exponential,
    readout_time,
    reliability_probe,
    site_transfer,
)
from qmeasure.linalg import PAULI_Y, ValidationError
from qmeasure.measurement import PointerMapError, f_coefficients, f_condition_violations

from oracles import binomial_tail_below


def site_vector(theta, t):
    down = np.array([0.0, 1.0])
    return expm(-1j * theta * t / 2 * PAULI_Y) @ down


class TestSiteTransfer:
    def test_zero_time(self):
        assert site_transfer(0.7, -1.3, 0.0) == (0, 1)

    def test_full_flip(self):
        q, p = site_transfer(math.pi, math.pi, 1.0)
        assert q == pytest.approx(1, abs=1e-15) and p == pytest.approx(0, abs=1e-15)

    def test_diagonal_is_probability(self):
        q, p = site_transfer(1.1, 1.1, 0.9)
        assert q.real + p.real == pytest.approx(1, abs=1e-15)
        assert q.real == pytest.approx(math.sin(1.1 * 0.9 / 2) ** 2)

    @pytest.mark.parametrize("tr,ts,t", [(0.3, 1.9, 0.7), (-2.0, 0.5, 1.3), (0.0, math.pi, 1.0)])
    def test_matches_single_site_rotation(self, tr, ts, t):
        ar, as_ = site_vector(tr, t), site_vector(ts, t)
        q, p = site_transfer(tr, ts, t)
        assert q == pytest.approx(np.conj(as_[0]) * ar[0], abs=1e-14)
        assert p == pytest.approx(np.conj(as_[1]) * ar[1], abs=1e-14)

    def test_full_flip_kills_interference(self):
        app = SpinChainApparatus(7, (0.0, math.pi))
        f = f_coefficients_structured(app, MagnetizationBands.majority(7), 1.0)
        assert np.max(np.abs(f.values[0, 1])) == pytest.approx(0, abs=1e-15)


class TestBands:
    def test_majority_tie_goes_up(self):
        b = MagnetizationBands.majority(4)
        assert b.band_of(1) == 0 and b.band_of(2) == 1

    def test_equal_width(self):
        b = MagnetizationBands.equal_width(10, 3)
        assert [b.band_of(m) for m in range(11)] == [0] * 4 + [1] * 3 + [2] * 4

    def test_too_many_bands(self):
        with pytest.raises(ValidationError, match="3 bands"):
            MagnetizationBands.equal_width(1, 3)
        assert MagnetizationBands.equal_width(2, 3).edges == (1, 2)

    def test_empty_band_rejected(self):
        with pytest.raises(ValidationError):
            MagnetizationBands(3, (2, 2))

    def test_dense_projectors_count_up_spins(self):
        projs = MagnetizationBands.majority(3).projectors()
        # index 7 is all down, index 0 is all up
        assert projs[0][7, 7] == 1 and projs[1][0, 0] == 1
        np.testing.assert_array_equal(sum(projs), np.eye(8))


class TestCountingPolynomial:
    def test_binomial(self):
        np.testing.assert_allclose(counting_polynomial(0.3, 0.7, 3),
                                   [0.343, 3 * 0.49 * 0.3, 3 * 0.7 * 0.09, 0.027], atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 400), st.floats(0.0, 1.0))
    def test_probability_distribution(self, n, q):
        c = counting_polynomial(complex(q), complex(1 - q), n)
        assert np.all(c.real >= -1e-15)
        assert np.max(np.abs(c.imag)) == 0
        assert math.fsum(c.real) == pytest.approx(1, abs=1e-12)

    @pytest.mark.parametrize("q,p", [(0.25, 0.75), (-0.3, 0.5), (0.2 + 0.1j, -0.4j), (0.0, 1.0)])
    def test_log_domain_matches_convolution(self, monkeypatch, q, p):
        exact = counting_polynomial(q, p, 300)
        monkeypatch.setattr(ch, "LOG_DOMAIN_ABOVE", 10)
        logdom = counting_polynomial(q, p, 300)
        scale = np.max(np.abs(exact))
        assert np.max(np.abs(exact - logdom)) <= 1e-10 * scale

    def test_large_n_does_not_underflow_the_mass(self):
        c = counting_polynomial(0.9, 0.1, 5000)
        assert math.fsum(c.real) == pytest.approx(1, abs=1e-9)
        assert np.all(np.isfinite(c))


class TestStructuredF:
    @pytest.mark.parametrize("theta", [0.4, 1.2, -2.5])
    def test_single_site(self, theta):
        t = 0.8
        app = SpinChainApparatus(1, (theta, 0.3))
        f = f_coefficients_structured(app, MagnetizationBands(1, (1,)), t)
        np.testing.assert_allclose(f.values[0, 0].real,
                                   [math.cos(theta * t / 2) ** 2, math.sin(theta * t / 2) ** 2],
                                   atol=1e-15)

    def test_identical_sectors(self):
        app = SpinChainApparatus(30, (0.9, 0.9))
        f = f_coefficients_structured(app, MagnetizationBands.equal_width(30, 3), 1.4)
        d = f.diagonal()
        np.testing.assert_allclose(d[0], d[1], atol=1e-15)
        np.testing.assert_allclose(np.abs(f.values[0, 1]), d[0], atol=1e-14)

    def test_band_mismatch(self):
        with pytest.raises(ValidationError, match="bands are for"):
            f_coefficients_structured(SpinChainApparatus(3, (0, 1)), MagnetizationBands.majority(4), 1)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense(self, seed):
        rng = np.random.default_rng(seed)
        n_spins = int(rng.integers(1, 7))
        n = int(rng.integers(2, 4))
        app = SpinChainApparatus(n_spins, tuple(rng.uniform(-3, 3, n)))
        bands = MagnetizationBands.equal_width(n_spins, int(rng.integers(1, n_spins + 2)))
        energies = rng.normal(size=n)
        t = float(rng.uniform(0, 3))
        structured = f_coefficients_structured(app, bands, t, energies)
        dense = f_coefficients(dense_model(app, bands, np.ones(n) / math.sqrt(n), energies), t)
        assert np.max(np.abs(structured.values - dense.values)) <= 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 200), st.lists(st.floats(-4, 4), min_size=2, max_size=4),
           st.floats(0, 5), st.integers(1, 6))
    def test_conditions(self, n_spins, angles, t, n_bands):
        assume(n_bands <= n_spins + 1)
        app = SpinChainApparatus(n_spins, tuple(angles))
        f = f_coefficients_structured(app, MagnetizationBands.equal_width(n_spins, n_bands), t)
        for name, value in f_condition_violations(f).items():
            assert value <= 1e-10, name

    def test_dense_limit(self):
        with pytest.raises(ValidationError):
            dense_model(SpinChainApparatus(13, (0, 1)), MagnetizationBands.majority(13), [1, 0])


class TestReadoutTime:
    def test_up_probability(self):
        app = SpinChainApparatus(5, (0.0, 1.7))
        t = readout_time(1.7, 0.9)
        assert app.up_probability(1, t) == pytest.approx(0.9, abs=1e-15)
        assert app.up_probability(0, t) == 0

    def test_zero_angle(self):
        with pytest.raises(ValidationError):
            readout_time(0.0, 0.9)


class TestEtaSweep:
    def test_full_flip_is_exact(self):
        pts = eta_sweep([10, 20, 30], (0.0, math.pi), 1.0)
        assert all(eta == pytest.approx(0, abs=1e-15) for _, eta in pts)

    @pytest.mark.parametrize("n_spins", [20, 55, 100, 200])
    def test_binomial_tail(self, n_spins):
        t = readout_time(1.0, 0.9)
        [(_, eta)] = eta_sweep([n_spins], (0.0, 1.0), t)
        oracle = binomial_tail_below(n_spins, 0.9, (n_spins + 1) // 2)
        assert eta == pytest.approx(oracle, rel=1e-12)

    def test_nonincreasing(self):
        t = readout_time(2.0, 0.8)
        etas = [eta for _, eta in eta_sweep(range(5, 120, 5), (0.0, 2.0), t)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(etas, etas[1:]))

    def test_zero_time_not_bijective(self):
        with pytest.raises(PointerMapError, match="N=10"):
            eta_sweep([10], (0.0, 1.0), 0.0)


class TestFitExponential:
    def test_exact_data(self):
        fit = fit_exponential([(n, math.exp(-0.5 * n / 2)) for n in range(10, 100, 10)])
        assert fit.c_hat == pytest.approx(0.5, abs=1e-9)
        assert fit.intercept == pytest.approx(0, abs=1e-9)
        assert fit.r_squared == pytest.approx(1, abs=1e-12)

    def test_noisy_data(self):
        rng = np.random.default_rng(0)
        pts = [(n, math.exp(-0.25 * n) * (1 + 0.01 * rng.normal())) for n in range(20, 220, 20)]
        fit = fit_exponential(pts)
        assert fit.c_hat == pytest.approx(0.5, rel=0.05)
        assert 0.99 <= fit.r_squared <= 1

    def test_drops_nonpositive_with_warning(self):
        pts = [(n, math.exp(-n)) for n in (1, 2, 3)] + [(4, 0.0)]
        with pytest.warns(UserWarning, match="dropped 1"):
            fit = fit_exponential(pts)
        assert fit.n_points == 3

    def test_too_few_points(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(ValueError, match="at least 3"):
                fit_exponential([(1, 0.5), (2, 0.25), (3, 0.0)])

    def test_coleman_hepp_sweep(self):
        t = readout_time(1.0, 0.9)
        fit = fit_exponential(eta_sweep(range(20, 201, 20), (0.0, 1.0), t))
        assert fit.c_hat > 0 and fit.r_squared >= 0.99


class TestReliability:
    def test_single_band(self):
        assert reliability_probe(100, 1) == 0

    def test_two_band_tail(self):
        assert reliability_probe(100, 2, 0.75) == pytest.approx(binomial_tail_below(100, 0.75, 50),
                                                                rel=1e-12)
        assert reliability_probe(100, 2) == reliability_probe(100, 2, 0.75)

    def test_decays_in_n_at_fixed_bands(self):
        vals = [reliability_probe(n, 4) for n in (50, 100, 200, 400)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_fixed_ratio_is_roughly_constant(self):
        vals = [reliability_probe(4 * k * k, k) for k in (5, 10, 20, 50)]
        assert max(vals) / min(vals) < 3

    def test_sqrt_bands_unreliable(self):
        for n_spins in (100, 400, 2500):
            assert reliability_probe(n_spins, round(math.sqrt(n_spins))) > 0.05

    def test_bad_p(self):
        with pytest.raises(ValidationError):
            reliability_probe(10, 2, 1.5)
