import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from branchcrt.branching import OffspringDistribution
from branchcrt.spectral import (Domain, QuadratureError, SeriesError, UnsupportedDomain, conditioned_kernel,
                                conditioned_kernel_bound, critical_beta, effective_gap, expected_count,
                                first_eigenpair, heat_kernel, integrate_domain, model_constants, phi_moment,
                                second_moment_phi, spectral_gap, spectral_series, survival_probability)
from oracles import fd_dirichlet, image_kernel, image_survival, many_to_two_phi

PI = math.pi


# independent finite-difference oracle

def test_interval_eigenpair_matches_finite_differences(interval):
    w, grid, v = fd_dirichlet(0.0, PI, n=9999)
    pair = first_eigenpair(interval)
    assert abs(pair.lam - w[0]) < 1e-6
    assert pair.lam == 0.5
    mid = len(grid) // 2
    assert grid[mid] == pytest.approx(PI / 2)
    assert abs(pair.phi(PI / 2) - v[mid, 0]) < 1e-6
    assert pair.phi(PI / 2) == pytest.approx(0.797885, abs=1e-6)


def test_box_eigenvalue_is_tensor_of_fd_oracle():
    w, _, _ = fd_dirichlet(0.0, PI, n=9999)
    box = Domain.box([(0, PI), (0, PI)])
    assert abs(first_eigenpair(box).lam - 2 * w[0]) < 1e-6
    assert first_eigenpair(box).lam == pytest.approx(1.0)


def test_longer_interval_eigenvalue():
    w, _, _ = fd_dirichlet(0.0, 2 * PI, n=9999)
    lam = first_eigenpair(Domain.interval(0, 2 * PI)).lam
    assert abs(lam - w[0]) < 1e-6
    assert lam == pytest.approx(0.125)


def test_anisotropic_box_modes_sorted_and_complete():
    box = Domain.box([(0, 1.0), (0, 3.0)], np.diag([1.0, 2.0]))
    modes = spectral_series(box, 30).modes
    lams = [m.lam for m in modes]
    assert lams == sorted(lams)
    brute = sorted(0.5 * PI**2 * (i**2 + 2 * j**2 / 9.0) for i in range(1, 40) for j in range(1, 40))[:30]
    assert np.allclose(lams, brute)


def test_unsupported_domain():
    with pytest.raises(UnsupportedDomain):
        first_eigenpair(Domain("ball", (0.0,), (1.0,), ((1.0,),)))


def test_non_diagonal_coefficients_rejected():
    box = Domain.box([(0, 1), (0, 1)], [[1.0, 0.2], [0.2, 1.0]])
    with pytest.raises(UnsupportedDomain):
        first_eigenpair(box)


# moments and constants (quadrature oracle is scipy.integrate.quad on the closed form)

def test_phi_moments(interval):
    phi = lambda y: math.sqrt(2 / PI) * math.sin(y)
    assert phi_moment(interval, "one_phi") == pytest.approx(integrate.quad(phi, 0, PI)[0], abs=1e-10)
    assert phi_moment(interval, "one_phi") == pytest.approx(1.595769, abs=1e-6)
    assert phi_moment(interval, "phi3") == pytest.approx(0.677266, abs=1e-6)
    assert phi_moment(interval, "phi2") == pytest.approx(1.0, abs=1e-10)


def test_phi_f_moment_and_nonconvergence(interval):
    assert phi_moment(interval, "phi_f", lambda y: y) == pytest.approx(PI / 2 * 1.595769, abs=1e-5)
    with pytest.raises(QuadratureError):
        phi_moment(interval, "f2_phi", lambda y: 1.0 / np.abs(y - 1.0) ** 1.5)


def test_model_constants(interval):
    c = model_constants(interval, OffspringDistribution.constant(2))
    assert c.beta_critical == 0.5
    assert c.b == pytest.approx(2.95305, abs=1e-5)
    assert c.sigma2 == pytest.approx(0.424413, abs=1e-6)
    assert c.yaglom_mean() == pytest.approx(0.338632, abs=1e-6)
    assert c.phi_moments["one_phi"] / c.b == pytest.approx(1.595769 / 2.95305, abs=1e-6)
    assert c.sigma2 * c.b * c.phi_moments["one_phi"] == pytest.approx(2.0, rel=1e-14)
    assert c.b * c.sigma == pytest.approx(1.9238247, abs=1e-6)
    assert c.b * first_eigenpair(interval).phi(PI / 2) == pytest.approx(3 * PI / 4, abs=1e-9)


def test_sigma2_matches_quadratic_variation_identity(interval):
    # (beta_c E(A-1)^2 phi^2 + a |phi'|^2, phi) / (1, phi)
    phi = lambda y: math.sqrt(2 / PI) * math.sin(y)
    dphi = lambda y: math.sqrt(2 / PI) * math.cos(y)
    num = integrate.quad(lambda y: (0.5 * phi(y) ** 2 + dphi(y) ** 2) * phi(y), 0, PI, epsabs=1e-12)[0]
    den = integrate.quad(phi, 0, PI)[0]
    c = model_constants(interval, OffspringDistribution.constant(2))
    assert c.sigma2 == pytest.approx(num / den, abs=1e-9)


@pytest.mark.parametrize("lam,m,expected", [(0.5, 2, 0.5), (1, 1.5, 2), (0.5, 3, 0.25)])
def test_critical_beta(lam, m, expected):
    assert critical_beta(lam, m) == pytest.approx(expected)


def test_critical_beta_rejects_subcritical_mean():
    with pytest.raises(ValueError):
        critical_beta(0.5, 1.0)


# kernels

def test_heat_kernel_against_images(interval):
    assert heat_kernel(interval, 1.0, PI / 2, PI / 2) == pytest.approx(image_kernel(1.0, PI / 2, PI / 2), abs=1e-10)
    assert heat_kernel(interval, 1.0, PI / 2, PI / 2) == pytest.approx(0.3932040, abs=1e-7)
    for t, x, y in [(0.01, 0.3, 0.35), (0.2, 1.0, 2.5), (3.0, 0.1, 3.0)]:
        assert heat_kernel(interval, t, x, y) == pytest.approx(image_kernel(t, x, y), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, PI - 0.01), st.floats(0.01, PI - 0.01), st.floats(0.01, 5.0))
def test_heat_kernel_symmetric(x, y, t):
    d = Domain.interval(0, PI)
    assert heat_kernel(d, t, x, y) == pytest.approx(heat_kernel(d, t, y, x), abs=1e-12)


def test_chapman_kolmogorov(interval):
    s, t, x, y = 0.3, 0.7, 0.8, 2.1
    lhs = integrate.quad(lambda z: heat_kernel(interval, s, x, z) * heat_kernel(interval, t, z, y), 0, PI,
                         epsabs=1e-12, limit=200)[0]
    assert lhs == pytest.approx(heat_kernel(interval, s + t, x, y), abs=1e-8)


def test_kernel_time_guards(interval):
    with pytest.raises(ValueError):
        heat_kernel(interval, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        heat_kernel(interval, 1e-7, 1.0, 1.0)
    with pytest.raises(SeriesError):
        heat_kernel(interval, 1e-6, 1.0, 1.0, tol=0.0)


def test_survival_probability_against_images(interval):
    for t in (0.1, 1.0, 4.0):
        assert survival_probability(interval, t, 1.0) == pytest.approx(image_survival(t, 1.0), abs=1e-9)


def test_single_particle_martingale_identity(interval):
    pair = first_eigenpair(interval)
    for t, x in [(0.5, 0.4), (2.0, PI / 2)]:
        val = integrate.quad(lambda y: heat_kernel(interval, t, x, y) * pair.phi(y), 0, PI, epsabs=1e-12)[0]
        assert math.exp(pair.lam * t) * val == pytest.approx(pair.phi(x), abs=1e-8)


def test_conditioned_kernel_is_a_density(interval):
    mass = integrate.quad(lambda y: conditioned_kernel(interval, 1.0, PI / 2, y), 0, PI, epsabs=1e-12)[0]
    assert mass == pytest.approx(1.0, abs=1e-8)


def test_conditioned_kernel_relaxes_with_effective_gap(interval):
    # phi_2 vanishes at the midpoint, so the first surviving correction is lambda_3 - lambda_1 = 4
    gap = effective_gap(interval, PI / 2)
    assert gap == pytest.approx(4.0)
    assert spectral_gap(interval) == pytest.approx(1.5)
    ys = np.linspace(0.01, PI - 0.01, 400)
    # sup_y |sin(ny)/sin(y)| <= n gives C = sum over odd n >= 3 of n e^{-(lambda_n - lambda_3) t}
    def constant(t):
        return sum(n * math.exp(-(n * n / 2 - 4.5) * t) for n in range(3, 200, 2))

    for t in (0.5, 1.0, 2.0, 4.0):
        bound = conditioned_kernel_bound(interval, t, PI / 2, ys, constant(t), gap)
        assert bound.holds
        # the envelope is attained up to the sin(ny)/sin(y) slack, so the rate is not slower than 4
        assert bound.deviation > 1e-3 * bound.envelope
    # at t=10 the envelope C e^{-40} is below double precision, so the deviation can only be at roundoff
    ten = conditioned_kernel_bound(interval, 10.0, PI / 2, ys, constant(10.0), gap)
    assert ten.deviation <= ten.envelope + 64 * np.finfo(float).eps
    # away from the midpoint the second mode is present and decays only at rate 1.5
    slow = conditioned_kernel_bound(interval, 2.0, 1.0, ys, 1.0, spectral_gap(interval))
    fast = conditioned_kernel_bound(interval, 2.0, 1.0, ys, slow.deviation * math.exp(gap * 2.0) / 2, gap)
    assert not fast.holds


def test_orthonormality(interval):
    modes = spectral_series(interval, 8).modes
    for i, a in enumerate(modes):
        for j, b in enumerate(modes):
            v = integrate_domain(interval, lambda p: a.phi(p) * b.phi(p))
            assert abs(v - (i == j)) < 1e-8


def test_positivity_and_boundary(interval):
    pair = first_eigenpair(interval)
    grid = np.linspace(1e-6, PI - 1e-6, 1001)
    assert np.all(pair.phi(grid) > 0)
    assert pair.phi(0.0) == 0.0 and abs(pair.phi(PI)) < 1e-15


# moment oracles

def test_expected_count(interval):
    assert expected_count(interval, 2, 0.5, 4.0, PI / 2) == pytest.approx(1.273240, abs=1e-6)
    assert expected_count(interval, 2, 0.5, 4.0, PI / 2) == pytest.approx(math.exp(2) * image_survival(4.0, PI / 2),
                                                                          abs=1e-9)
    assert expected_count(interval, 2, 0.5, 1e-6, PI / 2) == pytest.approx(1.0, abs=1e-6)
    assert expected_count(interval, 2, 0.3, 2.0, 1.0) == pytest.approx(math.exp(0.6) * image_survival(2.0, 1.0),
                                                                       abs=1e-9)


def test_second_moment_phi_against_direct_quadrature(interval):
    for t in (1.0, 2.0):
        assert second_moment_phi(interval, 2, 4, 0.5, t, PI / 2) == pytest.approx(many_to_two_phi(t, PI / 2), abs=1e-8)
    assert second_moment_phi(interval, 2, 4, 0.5, 0.0, PI / 2) == pytest.approx(2 / PI, abs=1e-12)
