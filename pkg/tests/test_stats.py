import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats

from branchcrt.diffusion import sample_phi2
from branchcrt.spectral import Domain, first_eigenpair
from branchcrt.stats import (PASS_RULES, ExperimentReport, InsufficientSample, UndersizedSample, chi2_test,
                             clt_tests, dmatrix_agreement, ergodic_average_test, gw_conditional_law, gw_enumerate,
                             gw_rejection_sample, ks_test, martingale_test, moment_test, particle_density_test,
                             phase_transition, phi2_density_cdf, phi_density_cdf, spine_equilibrium_test,
                             survival_curve, wilson_interval, yaglom_test)
from conftest import rng

PI = math.pi


def strip_runtime(d):
    return {k: v for k, v in d.items() if k != "runtime"}


# goodness of fit

def test_identical_samples_give_zero_statistic():
    x = rng(1).random(100)
    assert ks_test(x, x)[0] == 0.0


def test_ks_p_values_are_uniform_under_the_null():
    ps = [ks_test(rng(100 + i).random(10**4), "uniform")[1] for i in range(100)]
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_disjoint_supports_are_rejected():
    g = rng(2)
    assert ks_test(g.random(200), 2 + g.random(200))[1] < 1e-6


def test_undersized_samples():
    with pytest.raises(UndersizedSample):
        ks_test(np.arange(7.0), "uniform")
    with pytest.raises(UndersizedSample):
        ks_test(np.arange(10.0), np.arange(3.0))
    with pytest.raises(UndersizedSample):
        chi2_test([3, 4], [1, 1])
    with pytest.raises(UndersizedSample):
        chi2_test([20], [1])


def test_chi2_rescales_expected_counts():
    stat, p = chi2_test([50, 50], [0.5, 0.5])
    assert stat == 0.0 and p == pytest.approx(1.0)


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi
    # closed-form Wilson score interval
    z = stats.norm.ppf(0.975)
    centre = (0.5 + z * z / 200) / (1 + z * z / 100)
    half = z * math.sqrt(0.25 / 100 + z * z / 40000) / (1 + z * z / 100)
    assert lo == pytest.approx(centre - half, abs=1e-12) and hi == pytest.approx(centre + half, abs=1e-12)
    assert wilson_interval(0, 100)[0] == 0.0


# closed-form marginal laws

def test_marginal_cdfs_against_quadrature(interval):
    pair = first_eigenpair(interval)
    norm = integrate.quad(lambda y: float(pair.phi(y)), 0, PI)[0]
    for y in (0.3, 1.0, PI / 2, 2.8):
        assert phi_density_cdf(interval)(y) == pytest.approx(
            integrate.quad(lambda s: float(pair.phi(s)), 0, y)[0] / norm, abs=1e-10)
        assert phi2_density_cdf(interval)(y) == pytest.approx(
            integrate.quad(lambda s: float(pair.phi(s)) ** 2, 0, y)[0], abs=1e-10)
    assert phi_density_cdf(interval)(PI / 2) == pytest.approx(0.5)


def test_density_and_spine_targets_differ():
    # negative control: window masses of phi/(1,phi) and phi^2 differ, and a phi^2 sample rejects the phi law
    d = Domain.interval(0, PI)
    f1, f2 = phi_density_cdf(d), phi2_density_cdf(d)
    assert f1(PI / 4) == pytest.approx((1 - math.cos(PI / 4)) / 2, abs=1e-12)
    assert f2(PI / 4) == pytest.approx((PI / 4 - 0.5) / PI, abs=1e-12)
    assert abs(f1(PI / 4) - f2(PI / 4)) > 0.05
    s = sample_phi2(d, rng(3), 5000)
    assert ks_test(s, f2)[1] > 0.01
    assert ks_test(s, f1)[1] < 1e-6


# conditioning by rejection against Galton-Watson enumeration

def test_gw_enumeration_is_a_probability_law():
    assert sum(p for p, _ in gw_enumerate([0.25, 0.5, 0.25], 2)) == pytest.approx(1.0, abs=1e-14)
    law = gw_conditional_law([0.25, 0.5, 0.25], 2)
    # Z_1=1 survives w.p. 3/4, Z_1=2 w.p. 15/16
    assert law[1] == pytest.approx(0.375 / 0.609375, abs=1e-12)
    assert law[1] == pytest.approx(0.61538, abs=1e-5) and law[2] == pytest.approx(0.38462, abs=1e-5)


@pytest.mark.parametrize("pmf,gens,index", [([0.25, 0.5, 0.25], 2, 0), ([0.5, 0.2, 0.3], 2, 0),
                                            ([0.4, 0.3, 0.3], 3, 0), ([0.4, 0.3, 0.3], 3, 1)])
def test_rejection_matches_enumeration(pmf, gens, index):
    law = gw_conditional_law(pmf, gens, index)
    kept, tried = gw_rejection_sample(pmf, gens, 20000, rng(4), index)
    assert tried >= len(kept)
    for k, p in law.items():
        phat = np.mean(kept == k)
        assert abs(phat - p) <= 3 * math.sqrt(p * (1 - p) / len(kept)) + 1e-12


# reports

def test_report_verdict_is_re_derived(tmp_path, params, x0):
    r = martingale_test(x0, params, [0.5, 1.0], 400, seed=3)
    assert isinstance(r.passed, bool)
    paths = r.write(tmp_path, {"seed": 3})
    body = json.loads(paths[0].read_text())
    assert body["header"] == {"seed": 3}
    back = ExperimentReport.from_dict(body["report"])
    assert back.passed == r.passed == body["report"]["passed"]
    assert all(p.exists() for p in paths)
    assert (tmp_path / "martingale_means.csv").read_text().startswith("#")


def test_tolerance_comes_from_the_report(params, x0):
    r = martingale_test(x0, params, [0.5], 400, seed=3)
    assert r.tolerance["se_multiple"] == 3.0
    strict = replace(r, tolerance={**r.tolerance, "se_multiple": 0.0})
    loose = replace(r, tolerance={**r.tolerance, "se_multiple": 1e6})
    assert strict.passed is False and loose.passed is True
    assert martingale_test(x0, params, [0.5], 400, seed=3, tol={"se_multiple": 0.0}).passed is False


def test_every_rule_is_registered():
    assert set(PASS_RULES) == {"none", "gof", "se", "survival", "survival_series", "yaglom", "clt", "dmatrix", "crt",
                               "phase"}


def test_reports_are_reproducible_and_thread_independent(params, x0):
    a = survival_curve(x0, params, [1.0, 2.0], 600, seed=11)
    b = survival_curve(x0, params, [1.0, 2.0], 600, seed=11, threads=2)
    assert strip_runtime(a.to_dict()) == strip_runtime(b.to_dict())
    c = survival_curve(x0, params, [1.0, 2.0], 600, seed=12)
    assert a.estimates["P"] != c.estimates["P"]


def test_experiments_require_criticality(params, x0):
    sub = replace(params, beta=0.3)
    with pytest.raises(ValueError):
        yaglom_test(x0, sub, 1.0, n_cond=10)
    with pytest.raises(ValueError):
        particle_density_test(x0, sub, 1.0, 100)
    with pytest.raises(ValueError):
        clt_tests(x0, sub, 10.0, [1.0], 10)
    with pytest.raises(ValueError):
        dmatrix_agreement(x0, sub, 1.0, n_cond=10)


# small runs of each experiment

def test_moment_test_small(params, x0):
    r = moment_test(x0, params, [1.0], [1.0], 2000, seed=1)
    assert set(r.targets) == {"N(1)", "phi2(1)"}
    assert r.rule == "se" and r.sample_size == 2000


def test_survival_without_branching_matches_series(params, x0):
    r = survival_curve(x0, replace(params, beta=0.0), [0.5, 1.0, 2.0], 4000, seed=2)
    assert r.rule == "survival_series"
    assert r.passed


def test_survival_at_criticality_reports_limit(params, x0):
    r = survival_curve(x0, params, [1.0, 2.0], 1000, seed=2)
    assert r.rule == "survival"
    assert r.targets["limit"] == pytest.approx(3 * PI / 4, abs=1e-9)
    lo, hi = r.tables["curve"]["rows"][0][3:5]
    assert lo <= r.estimates["P"][0] <= hi


def test_yaglom_zero_functional_is_degenerate(params, x0):
    r = yaglom_test(x0, params, 1.0, f="zero", n_cond=50, seed=3)
    assert r.targets["mean"] == 0.0 and r.statistics["max_abs"] == 0.0 and r.passed


def test_yaglom_targets(params, x0):
    r = yaglom_test(x0, params, 1.0, f="one", n_cond=50, seed=3)
    assert r.targets["mean"] == pytest.approx(1.595769 / 2.95305, abs=1e-6)
    with pytest.raises(InsufficientSample):
        yaglom_test(x0, params, 5.0, n_cond=50, seed=3, max_replicas=20)
    with pytest.raises(ValueError):
        yaglom_test(x0, params, 1.0, f="two", n_cond=10)


def test_density_small(params, x0):
    r = particle_density_test(x0, params, 2.0, 500, bins=10, seed=4)
    assert r.sample_size >= 500 and len(r.tables["bins"]["rows"]) == 10
    assert set(r.p_values) == {"ks_phi_density", "chi2_phi_density"}


def test_spine_small(params, x0):
    r = spine_equilibrium_test(x0, params, 5000, 20, 1.0, 1.0, bins=10, seed=5)
    assert r.rule == "gof" and r.sample_size > 0


def test_ergodic_constant_functional_is_exact(params, x0):
    r = ergodic_average_test(x0, params, 50.0, "one", batches=5, seed=6)
    assert r.estimates["average"] == pytest.approx(1.0, abs=1e-12)
    q = ergodic_average_test(x0, params, 50.0, "qv", batches=5, seed=6)
    assert q.targets["average"] == pytest.approx(0.424413, abs=1e-6)
    p = ergodic_average_test(x0, params, 50.0, "phi", batches=5, seed=6)
    assert p.targets["average"] == pytest.approx(0.626657, abs=1e-6)


def test_clt_at_time_zero_is_degenerate(params, x0):
    r = clt_tests(x0, params, 100.0, [0.0, 1.0], 40, seed=7)
    assert r.estimates["mean_s_bar"][0] == 0.0
    assert type(r.estimates["variance_ratio"][0]) is float
    assert set(r.p_values) == {"ks_s_bar(1)", "ks_s_bold(1)", "ks_local_time(1)"}


def test_dmatrix_is_report_only_at_small_t(params, x0):
    r = dmatrix_agreement(x0, params, 1.0, n_cond=20, seed=8)
    assert r.passed is None
    assert r.statistics["attempted"] >= 20
    assert np.all(np.array([row[0] for row in r.tables["norms"]["rows"]]) >= 0)


def test_phase_small(params, x0):
    r = phase_transition(x0, params, [0.8, 1.2], [1.0, 2.0], 300, seed=9)
    assert r.estimates["ratios"] == [0.8, 1.2]
    assert len(r.tables["curves"]["rows"]) == 4
    assert r.statistics["beta_critical"] == pytest.approx(0.5)
