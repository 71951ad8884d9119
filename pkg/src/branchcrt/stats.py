"""Estimators, goodness-of-fit tests and the experiment battery.

Each experiment returns an ExperimentReport whose pass flag is recomputed
from the stored numbers and tolerances by a named rule, so a report read
back from JSON re-derives the same verdict.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from . import _kernels as K
from .branching import (MarkedTree, ParticleCapExceeded, SimulationParams, martingale_growth, population_sample,
                        run_kernel)
from .config import reference_tolerances
from .crt import excursion_distance_matrix, reference_laws, sample_conditioned_excursion
from .diffusion import conditioned_occupation
from .genealogy import distance_matrices, explore, explore_forest, forest_endpoint, s_path_mean_test
from .io import json_text, write_csv
from .spectral import (Domain, expected_count, first_eigenpair, model_constants, phi_moment, second_moment_phi,
                       survival_probability)
from .streams import collect_until, map_replicas


class UndersizedSample(ValueError):
    """Fewer observations than a test needs."""


class InsufficientSample(RuntimeError):
    """Too few conditioned samples within the replica budget."""


# ---------------------------------------------------------------------------
# Reports


def _gof_ok(r: "ExperimentReport", keys: Sequence[str] | None = None) -> bool:
    keys = list(r.p_values) if keys is None else keys
    for k in keys:
        thr = r.tolerance["chi2_p"] if k.startswith("chi2") else r.tolerance["ks_p"]
        p = r.p_values[k]
        if p is None or not p > thr:
            return False
    return True


def _se_ok(r: "ExperimentReport") -> bool:
    z = r.tolerance["se_multiple"]
    return all(abs(r.estimates[k] - r.targets[k]) <= z * r.standard_errors[k] for k in r.targets)


def _survival_ok(r: "ExperimentReport") -> bool:
    tp = np.asarray(r.estimates["tP"], float)
    limit = r.targets["limit"]
    close = abs(tp[-1] - limit) <= r.tolerance["survival_rel"] * limit
    d = np.diff(tp)
    return bool(close and (np.all(d >= 0) or np.all(d <= 0)))


def _series_ok(r: "ExperimentReport") -> bool:
    z = r.tolerance["se_multiple"]
    p, se, s = (np.asarray(r.estimates[k], float) for k in ("P", "P_se", "series"))
    return bool(np.all(np.abs(p - s) <= z * se))


def _yaglom_ok(r: "ExperimentReport") -> bool:
    if r.targets["mean"] == 0.0:
        return r.statistics["max_abs"] == 0.0
    return _gof_ok(r)


def _clt_ok(r: "ExperimentReport") -> bool:
    ratios = np.asarray(r.estimates["variance_ratio"], float)
    rel = np.abs(ratios - r.targets["sigma2"]) / r.targets["sigma2"]
    return _gof_ok(r) and bool(np.all(rel <= r.tolerance["variance_rel"]))


def _dmatrix_ok(r: "ExperimentReport") -> bool | None:
    if r.statistics["t"] < r.tolerance["dmatrix_min_t"]:
        return None
    return r.estimates["quantile"] <= r.tolerance["dmatrix_norm"]


def _phase_ok(r: "ExperimentReport") -> bool:
    ok = True
    for ratio, rel in zip(r.estimates["ratios"], r.estimates["rel_change"]):
        if ratio > 1.0:
            ok &= abs(rel) < r.tolerance["phase_stable_rel"]
        else:
            ok &= -rel > r.tolerance["phase_decay_rel"]
    return bool(ok)


PASS_RULES: dict[str, Callable[["ExperimentReport"], bool | None]] = {
    "none": lambda r: None,
    "gof": _gof_ok,
    "se": _se_ok,
    "survival": _survival_ok,
    "survival_series": _series_ok,
    "yaglom": _yaglom_ok,
    "clt": _clt_ok,
    "dmatrix": _dmatrix_ok,
    "crt": lambda r: _gof_ok(r, ["ks_distance"]),
    "phase": _phase_ok,
}


@dataclass
class ExperimentReport:
    name: str
    rule: str
    estimates: dict
    standard_errors: dict
    targets: dict
    statistics: dict
    p_values: dict
    sample_size: int
    tolerance: dict
    seed: int
    ci_level: float = 0.95
    runtime: float = 0.0
    tables: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool | None:
        """True/False under the stored tolerance; None for report-only runs."""
        return PASS_RULES[self.rule](self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentReport":
        d = {k: v for k, v in d.items() if k != "passed"}
        return cls(**d)

    def write(self, out_dir, header: Mapping | None = None) -> list[Path]:
        """JSON report plus one CSV per table, each carrying `header`."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        body = {"header": dict(header or {}), "report": self.to_dict()}
        paths = [out / f"{self.name}.json"]
        paths[0].write_text(json_text(body, indent=2) + "\n")
        for tname, table in self.tables.items():
            paths.append(write_csv(out / f"{self.name}_{tname}.csv", table["columns"], table["rows"], header))
        return paths


def _tol(tol: Mapping | None) -> dict:
    merged = reference_tolerances()
    merged.update(tol or {})
    return merged


def _report(name, rule, tol, seed, t0, **kw) -> ExperimentReport:
    tol = _tol(tol)
    return ExperimentReport(name=name, rule=rule, tolerance=tol, seed=int(seed), ci_level=float(tol["ci_level"]),
                            runtime=time.perf_counter() - t0, **kw)


# ---------------------------------------------------------------------------
# Goodness of fit


def ks_test(sample, reference, *args) -> tuple[float, float]:
    """One-sample KS against a CDF (callable or scipy name) or two-sample KS against another sample."""
    x = np.asarray(sample, float).ravel()
    if len(x) < 8:
        raise UndersizedSample(f"KS test needs >= 8 observations, got {len(x)}")
    if isinstance(reference, (np.ndarray, list, tuple)):
        y = np.asarray(reference, float).ravel()
        if len(y) < 8:
            raise UndersizedSample(f"KS test needs >= 8 observations, got {len(y)}")
        res = sps.ks_2samp(x, y)
    else:
        res = sps.kstest(x, reference, args=args)
    return float(res.statistic), float(res.pvalue)


def chi2_test(observed, expected) -> tuple[float, float]:
    """Pearson chi-square of binned counts against expected counts (rescaled to the observed total)."""
    obs = np.asarray(observed, float)
    exp = np.asarray(expected, float)
    if obs.sum() < 8 or len(obs) < 2:
        raise UndersizedSample("chi-square test needs >= 8 observations in >= 2 bins")
    exp = exp * obs.sum() / exp.sum()
    res = sps.chisquare(obs, exp)
    return float(res.statistic), float(res.pvalue)


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = sps.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def _mean_se(v) -> tuple[float, float]:
    v = np.asarray(v, float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


# ---------------------------------------------------------------------------
# Closed-form marginal laws on intervals and boxes (first coordinate)


def _axis(domain: Domain) -> tuple[float, float]:
    return float(domain.lower[0]), float(domain.upper[0] - domain.lower[0])


def phi_density_cdf(domain: Domain) -> Callable:
    """CDF of the first coordinate under phi/(1, phi)."""
    lo, ell = _axis(domain)
    return lambda y: (1.0 - np.cos(np.pi * (np.clip(y, lo, lo + ell) - lo) / ell)) / 2.0


def phi2_density_cdf(domain: Domain) -> Callable:
    """CDF of the first coordinate under phi^2."""
    lo, ell = _axis(domain)

    def F(y):
        th = np.pi * (np.clip(y, lo, lo + ell) - lo) / ell
        return (th - np.sin(2.0 * th) / 2.0) / np.pi

    return F


def _binned(domain: Domain, values, cdf, bins: int):
    lo, ell = _axis(domain)
    edges = np.linspace(lo, lo + ell, bins + 1)
    obs, _ = np.histogram(values, edges)
    return obs, np.diff(cdf(edges)), edges


def _x_scalar(domain: Domain, x) -> float:
    return float(np.squeeze(first_eigenpair(domain).phi(x)))


def _assert_critical(params: SimulationParams):
    lam = first_eigenpair(params.domain).lam
    bc = lam / (params.offspring.m - 1.0)
    if abs(params.beta - bc) > 1e-9 * max(1.0, bc):
        raise ValueError(f"experiment requires the critical rate {bc}, got beta={params.beta}")


# ---------------------------------------------------------------------------
# Moments and martingales


def martingale_test(x, params: SimulationParams, ts: Sequence[float], n_rep: int, seed: int = 0,
                    threads: int = 1, tol: Mapping | None = None) -> ExperimentReport:
    """MC means of M_t over trees and of the single-tree S-path at exploration time t, against phi(x)."""
    t0 = time.perf_counter()
    ts = sorted(float(t) for t in ts)
    c = model_constants(params.domain, params.offspring)
    phx = _x_scalar(params.domain, x)
    pop = population_sample(x, replace(params, horizon=max(ts)), ts, n_rep, seed, "martingale", threads)
    if pop.capped.any():
        raise ParticleCapExceeded(f"{int(pop.capped.sum())} trees reached the particle cap")
    sp = s_path_mean_test(x, params, ts, n_rep, seed, threads)
    est, se, tgt, rows = {}, {}, {}, []
    for j, t in enumerate(ts):
        m, s = _mean_se(pop.phi_sums[:, j] * martingale_growth(c, params.beta, t))
        est[f"M({t:g})"], se[f"M({t:g})"], tgt[f"M({t:g})"] = m, s, phx
        est[f"S({t:g})"], se[f"S({t:g})"], tgt[f"S({t:g})"] = float(sp.means[j]), float(sp.ses[j]), phx
        rows.append((t, m, s, float(sp.means[j]), float(sp.ses[j]), phx))
    table = {"columns": ("t", "mean_M", "se_M", "mean_S", "se_S", "target"), "rows": rows}
    return _report("martingale", "se", tol, seed, t0, estimates=est, standard_errors=se, targets=tgt,
                   statistics={}, p_values={}, sample_size=n_rep, tables={"means": table})


def moment_test(x, params: SimulationParams, count_times: Sequence[float], second_times: Sequence[float],
                n_rep: int, seed: int = 0, threads: int = 1, tol: Mapping | None = None) -> ExperimentReport:
    """MC mean of |N_t| against the many-to-one series and of (sum phi)^2 against the many-to-two oracle."""
    t0 = time.perf_counter()
    ts = sorted(set(float(t) for t in count_times) | set(float(t) for t in second_times))
    pop = population_sample(x, replace(params, horizon=max(ts)), ts, n_rep, seed, "moments", threads)
    if pop.capped.any():
        raise ParticleCapExceeded(f"{int(pop.capped.sum())} trees reached the particle cap")
    m, ea2, beta, d = params.offspring.m, params.offspring.ea2, params.beta, params.domain
    est, se, tgt, rows = {}, {}, {}, []
    for j, t in enumerate(ts):
        if t in count_times:
            key = f"N({t:g})"
            est[key], se[key] = _mean_se(pop.counts[:, j])
            tgt[key] = expected_count(d, m, beta, t, x)
            rows.append(("count", t, est[key], se[key], tgt[key]))
        if t in second_times:
            key = f"phi2({t:g})"
            est[key], se[key] = _mean_se(pop.phi_sums[:, j] ** 2)
            tgt[key] = second_moment_phi(d, m, ea2, beta, t, x)
            rows.append(("phi_sum_squared", t, est[key], se[key], tgt[key]))
    table = {"columns": ("moment", "t", "mean", "se", "oracle"), "rows": rows}
    return _report("moments", "se", tol, seed, t0, estimates=est, standard_errors=se, targets=tgt,
                   statistics={}, p_values={}, sample_size=n_rep, tables={"moments": table})


# ---------------------------------------------------------------------------
# Survival, Yaglom, density


def survival_curve(x, params: SimulationParams, ts: Sequence[float], n_rep: int, seed: int = 0,
                   threads: int = 1, tol: Mapping | None = None, tag: str = "survival") -> ExperimentReport:
    """P(|N_t| > 0) with Wilson intervals; at criticality t P(t) is compared with b phi(x).

    At beta = 0 the estimates are compared with the single-particle series instead.
    """
    t0 = time.perf_counter()
    tolm = _tol(tol)
    ts = sorted(float(t) for t in ts)
    pop = population_sample(x, replace(params, horizon=max(ts)), ts, n_rep, seed, tag, threads)
    if pop.capped.any():
        raise ParticleCapExceeded(f"{int(pop.capped.sum())} trees reached the particle cap")
    alive = (pop.counts > 0).sum(0)
    p = alive / n_rep
    cis = [wilson_interval(k, n_rep, tolm["ci_level"]) for k in alive]
    p_se = np.sqrt(np.maximum(p * (1 - p), 1.0 / n_rep) / n_rep)
    est = {"times": ts, "P": p.tolist(), "P_se": p_se.tolist(), "tP": (np.asarray(ts) * p).tolist(),
           "survivors": alive.tolist()}
    stats_ = {"zero_survivor_times": [t for t, k in zip(ts, alive) if k == 0]}
    rows = [(t, int(k), float(pi), lo, hi, t * float(pi)) for t, k, pi, (lo, hi) in zip(ts, alive, p, cis)]
    targets: dict = {}
    rule = "none"
    if params.beta == 0.0:
        est["series"] = [float(np.squeeze(survival_probability(params.domain, t, x))) for t in ts]
        rule = "survival_series"
    else:
        lam = first_eigenpair(params.domain).lam
        if abs(params.beta - lam / (params.offspring.m - 1.0)) <= 1e-9:
            c = model_constants(params.domain, params.offspring)
            targets["limit"] = c.b * _x_scalar(params.domain, x)
            stats_["relative_error"] = abs(est["tP"][-1] - targets["limit"]) / targets["limit"]
            rule = "survival"
    table = {"columns": ("t", "survivors", "P", "wilson_lo", "wilson_hi", "tP"), "rows": rows}
    return _report("survival", rule, tol, seed, t0, estimates=est, standard_errors={"tP": (np.asarray(ts) * p_se).tolist()},
                   targets=targets, statistics=stats_, p_values={}, sample_size=n_rep, tables={"curve": table})


def _f_values(domain: Domain, f) -> tuple[str, Callable | None]:
    if isinstance(f, str):
        if f not in ("phi", "one", "zero"):
            raise ValueError(f"unknown functional {f!r}")
        return f, None
    return "callable", f


def yaglom_test(x, params: SimulationParams, t: float, f="phi", n_cond: int = 2000, seed: int = 0,
                threads: int = 1, max_replicas: int = 10**6, tol: Mapping | None = None) -> ExperimentReport:
    """KS of t^{-1} sum_u f(X_u(t)) on survival against the exponential law of mean (phi, f)/b."""
    t0 = time.perf_counter()
    _assert_critical(params)
    kind, fn = _f_values(params.domain, f)
    p = replace(params, horizon=float(t))

    def one(rng, _i):
        run = run_kernel(x, p, rng, obs_times=[t], snapshots=kind == "callable")
        if run.status == K.STATUS_CAP:
            raise ParticleCapExceeded("particle cap reached")
        n = run.real_obs[0, 0]
        if kind == "phi":
            v = run.real_obs[0, 1]
        elif kind == "one":
            v = n
        elif kind == "zero":
            v = 0.0
        else:
            pos = run.snaps[:, 2:]
            v = float(np.sum(fn(pos if params.domain.dim > 1 else pos[:, 0]))) if len(pos) else 0.0
        return n, v / t

    acc, _rej, ran = collect_until(one, lambda r: r[0] > 0, n_cond, seed, "yaglom", threads,
                                   batch=max(1000, n_cond), max_replicas=max_replicas)
    if len(acc) < n_cond:
        raise InsufficientSample(f"{len(acc)} survivors in {ran} replicas, wanted {n_cond}")
    vals = np.array([v for _, v in acc])
    c = model_constants(params.domain, params.offspring)
    if kind == "phi":
        target = c.yaglom_mean()
    elif kind == "one":
        target = c.phi_moments["one_phi"] / c.b
    elif kind == "zero":
        target = 0.0
    else:
        target = c.yaglom_mean(fn)
    mean, se = _mean_se(vals)
    stats_ = {"max_abs": float(np.abs(vals).max()), "attempted": ran, "t": float(t)}
    pv = {}
    if target > 0:
        stats_["ks"], pv["ks_exponential"] = ks_test(vals, "expon", 0.0, target)
    srt = np.sort(vals)
    table = {"columns": ("value", "empirical_cdf", "exponential_cdf"),
             "rows": [(float(v), (i + 1) / len(srt), float(1 - math.exp(-v / target)) if target > 0 else 1.0)
                      for i, v in enumerate(srt)]}
    return _report("yaglom", "yaglom", tol, seed, t0, estimates={"mean": mean}, standard_errors={"mean": se},
                   targets={"mean": target}, statistics=stats_, p_values=pv, sample_size=len(vals),
                   tables={"sample": table}, notes={"f": kind})


def pooled_positions(x, params: SimulationParams, t: float, min_particles: int, seed: int, threads: int = 1,
                     batch: int = 500, max_replicas: int = 10**6, tag: str = "density") -> tuple[np.ndarray, int, int]:
    """Positions at time t of all particles of surviving trees, pooled over replicas in index order
    until at least `min_particles` are collected. Returns (positions, survivors, replicas used)."""
    p = replace(params, horizon=float(t))

    def one(rng, _i):
        run = run_kernel(x, p, rng, obs_times=[t], snapshots=True)
        if run.status == K.STATUS_CAP:
            raise ParticleCapExceeded("particle cap reached")
        return run.snaps[:, 2:].copy()

    chunks, total, ran = [], 0, 0
    while total < min_particles:
        if ran >= max_replicas:
            raise InsufficientSample(f"{total} particles in {ran} replicas, wanted {min_particles}")
        for pos in map_replicas(one, min(batch, max_replicas - ran), seed, tag, threads, start=ran):
            ran += 1
            if len(pos):
                chunks.append(pos)
                total += len(pos)
                if total >= min_particles:
                    break
    return np.concatenate(chunks), len(chunks), ran


def particle_density_test(x, params: SimulationParams, t: float, min_particles: int = 5000, bins: int = 50,
                          seed: int = 0, threads: int = 1, batch: int = 500, max_replicas: int = 10**6,
                          tol: Mapping | None = None) -> ExperimentReport:
    """Pooled survivor positions at t against phi/(1, phi): KS and chi-square over equal-width bins."""
    t0 = time.perf_counter()
    _assert_critical(params)
    pos, survivors, ran = pooled_positions(x, params, t, min_particles, seed, threads, batch, max_replicas)
    y = pos[:, 0]
    cdf = phi_density_cdf(params.domain)
    ks, p_ks = ks_test(y, cdf)
    obs, mass, edges = _binned(params.domain, y, cdf, bins)
    chi, p_chi = chi2_test(obs, mass)
    mean, se = _mean_se(y)
    lo, ell = _axis(params.domain)
    table = {"columns": ("bin_lo", "bin_hi", "observed", "expected"),
             "rows": [(float(a), float(b), int(o), float(m * len(y))) for a, b, o, m in zip(edges[:-1], edges[1:], obs, mass)]}
    return _report("density", "gof", tol, seed, t0, estimates={"mean_position": mean},
                   standard_errors={"mean_position": se}, targets={"mean_position": lo + ell / 2},
                   statistics={"ks": ks, "chi2": chi, "bins": bins, "survivors": survivors, "attempted": ran,
                               "t": float(t)},
                   p_values={"ks_phi_density": p_ks, "chi2_phi_density": p_chi}, sample_size=len(y),
                   tables={"bins": table})


def spine_equilibrium_test(x, params: SimulationParams, steps: int, chains: int, burn_in: float, thin: float,
                           bins: int = 50, seed: int = 0, tol: Mapping | None = None) -> ExperimentReport:
    """Thinned positions of independent conditioned chains (each `steps` steps long) against phi^2."""
    from .streams import stream
    t0 = time.perf_counter()
    horizon = steps * params.step.h
    pos = conditioned_occupation(params.domain, x, params.step, stream(seed, "spine"), chains, horizon, burn_in, thin)
    y = pos[:, 0]
    cdf = phi2_density_cdf(params.domain)
    ks, p_ks = ks_test(y, cdf)
    obs, mass, edges = _binned(params.domain, y, cdf, bins)
    chi, p_chi = chi2_test(obs, mass)
    table = {"columns": ("bin_lo", "bin_hi", "observed", "expected"),
             "rows": [(float(a), float(b), int(o), float(m * len(y))) for a, b, o, m in zip(edges[:-1], edges[1:], obs, mass)]}
    return _report("spine", "gof", tol, seed, t0, estimates={}, standard_errors={}, targets={},
                   statistics={"ks": ks, "chi2": chi, "chains": chains, "horizon": horizon, "thin": thin,
                               "burn_in": burn_in},
                   p_values={"ks_phi2_density": p_ks, "chi2_phi2_density": p_chi}, sample_size=len(y),
                   tables={"bins": table})


# ---------------------------------------------------------------------------
# Forest exploration


def ergodic_average_test(x, params: SimulationParams, horizon: float, f="phi", batches: int = 20, seed: int = 0,
                         tol: Mapping | None = None) -> ExperimentReport:
    """t^{-1} int_0^t f(V_s) ds on one forest against (f, phi)/(1, phi), with a batch-means SE.

    f: "phi", "one", "qv" (the quadratic-variation integrand, target sigma^2) or a callable.
    """
    from .streams import stream
    t0 = time.perf_counter()
    _assert_critical(params)
    rng = stream(seed, "ergodic")
    edges = np.linspace(0.0, horizon, batches + 1)
    c = model_constants(params.domain, params.offspring)
    if isinstance(f, str):
        end = forest_endpoint(x, params, horizon, rng, clock_times=edges[1:], integrals=True)
        obs = end.clock_obs
        if f == "phi":
            running, target = obs[:, K.C_INT_PHI], 1.0 / c.phi_moments["one_phi"]
        elif f == "one":
            running, target = edges[1:].copy(), 1.0
        elif f == "qv":
            c2 = params.offspring.centred_second_moment
            running = params.beta * c2 * obs[:, K.C_INT_PHI2] + obs[:, K.C_INT_ENERGY]
            target = c.sigma2
        else:
            raise ValueError(f"unknown functional {f!r}")
        trees = end.trees
    else:
        path = explore_forest(x, params, horizon, rng, keep_paths=True)
        s = np.linspace(0.0, horizon, 200 * batches + 1)
        pts = path.position(s)
        v = np.asarray(f(pts if params.domain.dim > 1 else pts[:, 0]), float)
        cum = np.concatenate([[0.0], np.cumsum((v[1:] + v[:-1]) / 2 * np.diff(s))])
        running = cum[200::200]
        target = phi_moment(params.domain, "phi_f", f) / c.phi_moments["one_phi"]
        trees = path.n_trees
    per_batch = np.diff(np.concatenate([[0.0], running])) / np.diff(edges)
    est = float(running[-1] / horizon)
    se = float(per_batch.std(ddof=1) / math.sqrt(batches))
    table = {"columns": ("batch_end", "batch_mean"), "rows": list(zip(edges[1:].tolist(), per_batch.tolist()))}
    return _report("ergodic", "se", tol, seed, t0, estimates={"average": est}, standard_errors={"average": se},
                   targets={"average": target}, statistics={"horizon": horizon, "batches": batches, "trees": trees},
                   p_values={}, sample_size=batches, tables={"batches": table},
                   notes={"f": f if isinstance(f, str) else "callable"})


def clt_tests(x, params: SimulationParams, n: float, t_grid: Sequence[float], n_rep: int, seed: int = 0,
              threads: int = 1, tol: Mapping | None = None) -> ExperimentReport:
    """Forest endpoints at exploration times n t: S-bar, S-bold and phi(x) Lambda scaled by 1/sqrt(n)."""
    t0 = time.perf_counter()
    _assert_critical(params)
    c = model_constants(params.domain, params.offspring)
    phx = _x_scalar(params.domain, x)
    t_grid = sorted(float(t) for t in t_grid)
    live = [t for t in t_grid if t > 0]
    clock = [n * t for t in live]

    def one(rng, _i):
        end = forest_endpoint(x, params, max(clock), rng, clock_times=clock, integrals=False)
        o = end.clock_obs
        sbar = o[:, K.C_PHI] + o[:, K.C_SBOLD] - o[:, K.C_TREES] * phx
        return np.stack([sbar, o[:, K.C_SBOLD], phx * o[:, K.C_TREES]])

    vals = np.array(map_replicas(one, n_rep, seed, "clt", threads)) / math.sqrt(n) if live else None
    est = {"times": t_grid, "variance_ratio": [], "mean_s_bar": []}
    stats_, pv, rows = {}, {}, []
    for t in t_grid:
        if t == 0:
            est["variance_ratio"].append(float(c.sigma2))
            est["mean_s_bar"].append(0.0)
            rows.append((t, 0.0, 0.0, None, None, None))
            continue
        j = live.index(t)
        sbar, sbold, lam = vals[:, 0, j], vals[:, 1, j], vals[:, 2, j]
        law = reference_laws(t, c.sigma)
        ratio = float(sbar.var(ddof=1) / t)
        est["variance_ratio"].append(ratio)
        est["mean_s_bar"].append(float(sbar.mean()))
        for name, sample, dist in (("s_bar", sbar, law.normal()), ("s_bold", sbold, law.half_normal()),
                                   ("local_time", lam, law.half_normal())):
            stats_[f"ks_{name}({t:g})"], pv[f"ks_{name}({t:g})"] = ks_test(sample, dist.cdf)
        rows.append((t, ratio, float(sbar.mean()), pv[f"ks_s_bar({t:g})"], pv[f"ks_s_bold({t:g})"],
                     pv[f"ks_local_time({t:g})"]))
    table = {"columns": ("t", "variance_ratio", "mean_s_bar", "p_s_bar", "p_s_bold", "p_local_time"), "rows": rows}
    return _report("clt", "clt", tol, seed, t0, estimates=est, standard_errors={}, targets={"sigma2": c.sigma2},
                   statistics=stats_, p_values=pv, sample_size=n_rep, tables={"tests": table},
                   notes={"n": n})


# ---------------------------------------------------------------------------
# Genealogy of conditioned trees


def conditioned_tree(x, params: SimulationParams, t: float, extinction_factor: float, rng: np.random.Generator):
    """One tree under P: returns ("ok", tree) if alive at t and extinct by extinction_factor*t,
    ("extinct", None) or ("truncated", None) otherwise."""
    p = replace(params, horizon=float(extinction_factor * t))
    run = run_kernel(x, p, rng, obs_times=[t], record=True)
    if run.status == K.STATUS_CAP:
        raise ParticleCapExceeded("particle cap reached")
    if run.real_obs[0, 0] == 0:
        return "extinct", None
    if not run.extinct:
        return "truncated", None
    return "ok", MarkedTree.from_run(run, p, x)


def _conditioned_sample(x, params, t, extinction_factor, n_cond, seed, tag, threads, max_replicas, per_tree):
    def one(rng, _i):
        kind, tree = conditioned_tree(x, params, t, extinction_factor, rng)
        return (kind, per_tree(tree, rng) if kind == "ok" else None)

    acc, rej, ran = collect_until(one, lambda r: r[0] == "ok", n_cond, seed, tag, threads,
                                  batch=max(1000, n_cond), max_replicas=max_replicas)
    if len(acc) < n_cond:
        raise InsufficientSample(f"{len(acc)} conditioned trees in {ran} replicas, wanted {n_cond}")
    counts = {"extinct": sum(r[0] == "extinct" for r in rej), "truncated": sum(r[0] == "truncated" for r in rej)}
    return [r[1] for r in acc], counts, ran


def dmatrix_agreement(x, params: SimulationParams, t: float, k: int = 2, n_cond: int = 1000,
                      extinction_factor: float = 10.0, seed: int = 0, threads: int = 1, max_replicas: int = 10**6,
                      tol: Mapping | None = None) -> ExperimentReport:
    """Frobenius norm of b^{-1} D^H - D^S at k uniform points of trees conditioned on survival at t."""
    t0 = time.perf_counter()
    _assert_critical(params)
    tolm = _tol(tol)
    c = model_constants(params.domain, params.offspring)

    def per_tree(tree, rng):
        dh, ds, _ = distance_matrices(explore(tree, exact=True), k, t, rng)
        return float(np.linalg.norm(dh / c.b - ds)), float(dh[0, 1]), float(ds[0, 1])

    res, counts, ran = _conditioned_sample(x, params, t, extinction_factor, n_cond, seed, "dmatrix", threads,
                                           max_replicas, per_tree)
    norms = np.array([r[0] for r in res])
    q = float(np.quantile(norms, tolm["dmatrix_quantile"]))
    table = {"columns": ("norm", "DH_12", "DS_12"), "rows": res}
    return _report("dmatrix", "dmatrix", tol, seed, t0, estimates={"quantile": q, "median": float(np.median(norms)),
                                                                   "mean": float(norms.mean())},
                   standard_errors={}, targets={}, p_values={}, sample_size=len(norms),
                   statistics={"t": float(t), "k": k, "attempted": ran, "rejected_extinct": counts["extinct"],
                               "rejected_truncated": counts["truncated"], "b": c.b},
                   tables={"norms": table})


def crt_convergence_test(x, params: SimulationParams, n: float, k: int = 2, n_cond: int = 1000,
                         n_exc: int = 1000, dt: float = 1e-4, extinction_factor: float = 10.0, seed: int = 0,
                         threads: int = 1, max_replicas: int = 10**6, tol: Mapping | None = None) -> ExperimentReport:
    """Two-sample KS between D^H_12 / n on conditioned trees and d_e of b sigma times a Brownian excursion
    conditioned to reach 1/(b sigma). Both sides are restricted to height below extinction_factor
    (tree extinct by extinction_factor * n, excursion maximum below extinction_factor)."""
    t0 = time.perf_counter()
    _assert_critical(params)
    c = model_constants(params.domain, params.offspring)
    scale = c.b * c.sigma

    def per_tree(tree, rng):
        dh, _, _ = distance_matrices(explore(tree, exact=True), k, n, rng)
        return float(dh[0, 1]), float(tree.death.max() / n), float(tree.lifetime.sum() / n**2)

    tree_side, counts, ran = _conditioned_sample(x, params, n, extinction_factor, n_cond, seed, "crt-tree",
                                                 threads, max_replicas, per_tree)

    def one_exc(rng, _i):
        e = sample_conditioned_excursion(1.0 / scale, dt, rng, ceiling=extinction_factor / scale).scaled(scale)
        m, _ = excursion_distance_matrix(e, k, rng)
        return float(m[0, 1]), e.maximum, e.length

    exc_side = map_replicas(one_exc, n_exc, seed, "crt-excursion", threads)
    tr, ex = np.array(tree_side), np.array(exc_side)
    pv, st = {}, {}
    for j, name in enumerate(("distance", "height", "mass")):
        st[f"ks_{name}"], pv[f"ks_{name}"] = ks_test(tr[:, j], ex[:, j])
    st.update({"attempted": ran, "rejected_extinct": counts["extinct"], "rejected_truncated": counts["truncated"],
               "b_sigma": scale, "level": 1.0 / scale, "n": float(n)})
    est = {"mean_tree_distance": float(tr[:, 0].mean()), "mean_excursion_distance": float(ex[:, 0].mean()),
           "mean_tree_height": float(tr[:, 1].mean()), "mean_excursion_height": float(ex[:, 1].mean()),
           "mean_tree_mass": float(tr[:, 2].mean()), "mean_excursion_mass": float(ex[:, 2].mean())}
    rows = [("tree", *r) for r in tree_side] + [("excursion", *r) for r in exc_side]
    table = {"columns": ("side", "distance", "height", "mass"), "rows": rows}
    return _report("crt", "crt", tol, seed, t0, estimates=est, standard_errors={}, targets={}, statistics=st,
                   p_values=pv, sample_size=len(tr) + len(ex), tables={"samples": table})


# ---------------------------------------------------------------------------
# Phase transition


def phase_transition(x, params: SimulationParams, ratios: Sequence[float], ts: Sequence[float], n_rep: int,
                     seed: int = 0, threads: int = 1, tol: Mapping | None = None) -> ExperimentReport:
    """Survival curves at beta = ratio * beta_c; relative change between the last two times.

    Trees stopped by the particle cap count as surviving (reported).
    """
    t0 = time.perf_counter()
    tolm = _tol(tol)
    ts = sorted(float(t) for t in ts)
    lam = first_eigenpair(params.domain).lam
    bc = lam / (params.offspring.m - 1.0)
    rows, rel, capped = [], [], []
    for r in ratios:
        p = replace(params, beta=float(r) * bc, horizon=max(ts))
        pop = population_sample(x, p, ts, n_rep, seed, f"phase-{r:g}", threads)
        alive = (pop.counts > 0) | pop.capped[:, None]
        k = alive.sum(0)
        for t, ki in zip(ts, k):
            lo, hi = wilson_interval(ki, n_rep, tolm["ci_level"])
            rows.append((float(r), t, int(ki), ki / n_rep, lo, hi))
        rel.append(float((k[-1] - k[-2]) / k[-2]) if k[-2] > 0 else -1.0)
        capped.append(int(pop.capped.sum()))
    table = {"columns": ("ratio", "t", "survivors", "P", "wilson_lo", "wilson_hi"), "rows": rows}
    return _report("phase", "phase", tol, seed, t0, estimates={"ratios": [float(r) for r in ratios], "rel_change": rel},
                   standard_errors={}, targets={}, statistics={"capped": capped, "beta_critical": bc, "times": ts},
                   p_values={}, sample_size=n_rep * len(ratios), tables={"curves": table})


# ---------------------------------------------------------------------------
# Galton-Watson enumeration oracle for conditioning by rejection


def gw_enumerate(pmf: Sequence[float], generations: int) -> list[tuple[float, tuple[int, ...]]]:
    """Every Galton-Watson plane tree up to `generations`, as (probability, generation sizes Z_1..Z_g)."""
    out: list[tuple[float, tuple[int, ...]]] = []
    support = [k for k, p in enumerate(pmf) if p > 0]

    def grow(prob, sizes, width):
        if len(sizes) == generations:
            out.append((prob, tuple(sizes)))
            return
        for kids in itertools.product(support, repeat=width):
            q = prob * math.prod(pmf[k] for k in kids)
            grow(q, sizes + [sum(kids)], sum(kids))

    grow(1.0, [], 1)
    return out


def gw_conditional_law(pmf: Sequence[float], generations: int, index: int = 0) -> dict[int, float]:
    """Exact law of Z_{index+1} given Z_generations > 0, by enumeration."""
    trees = gw_enumerate(pmf, generations)
    alive = [(p, z) for p, z in trees if z[-1] > 0]
    total = sum(p for p, _ in alive)
    law: dict[int, float] = {}
    for p, z in alive:
        law[z[index]] = law.get(z[index], 0.0) + p / total
    return law


def gw_rejection_sample(pmf: Sequence[float], generations: int, n: int, rng: np.random.Generator,
                        index: int = 0) -> tuple[np.ndarray, int]:
    """Z_{index+1} for n simulated trees kept only when Z_generations > 0. Returns (kept values, attempts)."""
    pmf = np.asarray(pmf, float)
    kept, tried = [], 0
    while len(kept) < n:
        tried += 1
        z, sizes = 1, []
        for _ in range(generations):
            z = int(rng.choice(len(pmf), size=z, p=pmf).sum()) if z else 0
            sizes.append(z)
        if sizes[-1] > 0:
            kept.append(sizes[index])
    return np.array(kept), tried
