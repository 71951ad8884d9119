"""Closed-form Dirichlet eigenpairs, heat kernels and moment oracles.

Domains are intervals and axis-aligned boxes with a constant diagonal
diffusion matrix. The generator is L = (1/2) sum_ij d_i(a^{ij} d_j), so on an
axis of length ell with coefficient a the n-th mode has eigenvalue
a n^2 pi^2 / (2 ell^2) and eigenfunction sqrt(2/ell) sin(n pi (x - lo) / ell).
Box modes are tensor products of axis modes.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import integrate

QUAD_TOL = 1e-10
QUAD_LIMIT = 10**6
MODE_CAP = 10**5
MIN_TIME = 1e-6


class UnsupportedDomain(ValueError):
    """Domain kind or coefficients without a closed-form eigenpair."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not converge or the integrand is not integrable."""


class SeriesError(RuntimeError):
    """Series truncation could not reach the requested tolerance."""


@dataclass(frozen=True)
class Domain:
    """Interval or axis-aligned box with constant diffusion coefficients."""

    kind: str
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    diffusion: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if self.kind not in ("interval", "box"):
            raise UnsupportedDomain(f"unknown domain kind {self.kind!r}")
        d = len(self.lower)
        if d == 0 or len(self.upper) != d:
            raise ValueError("lower and upper bounds must have the same nonzero length")
        if self.kind == "interval" and d != 1:
            raise ValueError("an interval has exactly one axis")
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("bounds must be finite with lower < upper on every axis")
        a = np.asarray(self.diffusion, float)
        if a.shape != (d, d):
            raise ValueError(f"diffusion matrix must be {d}x{d}")
        if not np.allclose(a, a.T, rtol=0, atol=1e-14):
            raise ValueError("diffusion matrix must be symmetric")
        if np.linalg.eigvalsh(a).min() <= 0:
            raise ValueError("diffusion matrix must be positive definite")

    @classmethod
    def interval(cls, lo: float = 0.0, hi: float = math.pi, coefficient: float = 1.0) -> "Domain":
        return cls("interval", (float(lo),), (float(hi),), ((float(coefficient),),))

    @classmethod
    def box(cls, bounds: Sequence[tuple[float, float]], diffusion=None) -> "Domain":
        d = len(bounds)
        if diffusion is None:
            diffusion = np.eye(d)
        diffusion = np.atleast_2d(np.asarray(diffusion, float))
        return cls(
            "box",
            tuple(float(b[0]) for b in bounds),
            tuple(float(b[1]) for b in bounds),
            tuple(tuple(float(v) for v in row) for row in diffusion),
        )

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    @property
    def coefficients(self) -> np.ndarray:
        """Diagonal of the diffusion matrix; raises if it is not diagonal."""
        a = np.asarray(self.diffusion, float)
        if not np.allclose(a, np.diag(np.diag(a)), rtol=0, atol=1e-14):
            raise UnsupportedDomain("only diagonal diffusion matrices have closed-form eigenpairs")
        return np.diag(a).copy()

    def contains(self, x) -> np.ndarray:
        pts = as_points(self, x)
        return np.all((pts > np.asarray(self.lower)) & (pts < np.asarray(self.upper)), axis=1)


def as_points(domain: Domain, x) -> np.ndarray:
    """Coerce positions to an (N, d) float array."""
    arr = np.asarray(x, float)
    if domain.dim == 1:
        return arr.reshape(-1, 1)
    return arr.reshape(-1, domain.dim)


def _shape_out(domain: Domain, x, values: np.ndarray):
    arr = np.asarray(x, float)
    if domain.dim == 1:
        return values.reshape(arr.shape) if arr.ndim else float(values[0])
    return values.reshape(arr.shape[:-1]) if arr.ndim > 1 else float(values[0])


def axis_mode(n: int, lo: float, ell: float, x: np.ndarray) -> np.ndarray:
    return math.sqrt(2.0 / ell) * np.sin(n * math.pi * (x - lo) / ell)


def axis_mode_derivative(n: int, lo: float, ell: float, x: np.ndarray) -> np.ndarray:
    return math.sqrt(2.0 / ell) * (n * math.pi / ell) * np.cos(n * math.pi * (x - lo) / ell)


def axis_eigenvalue(n: int, ell: float, a: float) -> float:
    return a * n * n * math.pi**2 / (2.0 * ell * ell)


@dataclass(frozen=True)
class EigenPair:
    """Dirichlet eigenpair of -L; modes are multi-indices of axis wave numbers."""

    domain: Domain
    index: tuple[int, ...]
    lam: float
    norm: float = 1.0

    def phi(self, x):
        pts = as_points(self.domain, x)
        vals = np.ones(len(pts))
        for i, n in enumerate(self.index):
            vals *= axis_mode(n, self.domain.lower[i], self.domain.lengths[i], pts[:, i])
        return _shape_out(self.domain, x, vals)

    __call__ = phi

    def grad(self, x) -> np.ndarray:
        """Gradient as an (N, d) array."""
        pts = as_points(self.domain, x)
        lo, ell = self.domain.lower, self.domain.lengths
        factors = np.stack(
            [axis_mode(n, lo[i], ell[i], pts[:, i]) for i, n in enumerate(self.index)], axis=1
        )
        out = np.empty_like(pts)
        for i, n in enumerate(self.index):
            others = np.prod(np.delete(factors, i, axis=1), axis=1)
            out[:, i] = axis_mode_derivative(n, lo[i], ell[i], pts[:, i]) * others
        return out

    def energy_density(self, x):
        """a|grad phi|^2 = sum_ij a^{ij} d_i phi d_j phi."""
        g = self.grad(x)
        a = np.asarray(self.domain.diffusion)
        return _shape_out(self.domain, x, np.einsum("ni,ij,nj->n", g, a, g))

    def sup(self) -> float:
        return float(np.prod(np.sqrt(2.0 / self.domain.lengths)))


def first_eigenpair(domain: Domain) -> EigenPair:
    """Principal eigenpair: lambda = sum of axis eigenvalues, phi a product of sines."""
    if domain.kind not in ("interval", "box"):
        raise UnsupportedDomain(domain.kind)
    a = domain.coefficients
    lam = sum(axis_eigenvalue(1, ell, ai) for ell, ai in zip(domain.lengths, a))
    return EigenPair(domain, (1,) * domain.dim, lam)


@dataclass(frozen=True)
class SpectralSeries:
    """Eigenpairs ordered by eigenvalue, truncated at a mode count."""

    modes: tuple[EigenPair, ...]
    truncation: int
    tail_bound: float = math.inf

    @property
    def gap(self) -> float:
        return self.modes[1].lam - self.modes[0].lam


def spectral_series(domain: Domain, count: int, t: float | None = None) -> SpectralSeries:
    """The `count` lowest modes; tail_bound bounds the sup of the omitted kernel terms at time t."""
    if count > MODE_CAP:
        raise SeriesError(f"mode count {count} exceeds cap {MODE_CAP}")
    a = domain.coefficients
    d = domain.dim
    ells = domain.lengths

    def enumerate_modes(ranges):
        out = []
        for idx in itertools.product(*ranges):
            lam = sum(axis_eigenvalue(n, ell, ai) for n, ell, ai in zip(idx, ells, a))
            out.append((lam, idx))
        out.sort()
        return out

    per_axis = count if d == 1 else int(math.ceil(count ** (1.0 / d))) + 2
    cands = enumerate_modes([range(1, per_axis + 1)] * d)
    if d > 1:
        # every mode below the count-th cube eigenvalue has bounded axis indices
        ceiling = cands[count - 1][0]
        base = [axis_eigenvalue(1, ell, ai) for ell, ai in zip(ells, a)]
        ranges = []
        for i in range(d):
            room = ceiling - (sum(base) - base[i])
            nmax = int(math.floor(ells[i] * math.sqrt(2.0 * room / a[i]) / math.pi))
            ranges.append(range(1, max(nmax, 1) + 1))
        cands = enumerate_modes(ranges)
    modes = tuple(EigenPair(domain, idx, lam) for lam, idx in cands[:count])
    tail = math.inf
    if t is not None and d == 1:
        tail = _axis_tail(count, t, domain.lengths[0], a[0])
    return SpectralSeries(modes, count, tail)


def spectral_gap(domain: Domain) -> float:
    return spectral_series(domain, 2).gap


def _axis_tail(n_kept: int, t: float, ell: float, a: float) -> float:
    """Bound on sum_{n > n_kept} e^{-lambda_n t} sup|phi_n|^2 (geometric majorant)."""
    c = a * math.pi**2 / (2.0 * ell * ell)
    first = math.exp(-c * (n_kept + 1) ** 2 * t)
    ratio = math.exp(-c * (2 * n_kept + 3) * t)
    if ratio >= 1.0:
        return math.inf
    return (2.0 / ell) * first / (1.0 - ratio)


def _axis_mode_count(t: float, ell: float, a: float, tol: float) -> int:
    n = 1
    while _axis_tail(n, t, ell, a) >= tol:
        n = max(n + 1, int(n * 1.5))
        if n > MODE_CAP:
            raise SeriesError(f"tolerance {tol} unreachable within {MODE_CAP} modes at t={t}")
    lo, hi = max(1, int(n / 1.5)), n
    while lo < hi:
        mid = (lo + hi) // 2
        if _axis_tail(mid, t, ell, a) < tol:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _check_time(t: float):
    if not t > 0:
        raise ValueError("t must be positive")
    if t < MIN_TIME:
        raise ValueError(f"kernel evaluation refused below t={MIN_TIME} (divergent on the diagonal)")


def _axis_kernel(t, lo, ell, a, x, y, tol) -> np.ndarray:
    nmax = _axis_mode_count(t, ell, a, tol)
    n = np.arange(1, nmax + 1)
    lam = a * n**2 * math.pi**2 / (2.0 * ell * ell)
    sx = np.sin(np.outer(x - lo, n) * math.pi / ell)
    sy = np.sin(np.outer(y - lo, n) * math.pi / ell)
    return (2.0 / ell) * np.sum(np.exp(-lam * t) * sx * sy, axis=1)


def heat_kernel(domain: Domain, t: float, x, y, tol: float = 1e-10):
    """Killed transition density p_t(x, y) as a truncated eigen-series.

    Box kernels factor into per-axis kernels; each axis series is truncated
    once its tail bound is below tol (relative to the other axis factors).
    """
    _check_time(t)
    a = domain.coefficients
    px, py = as_points(domain, x), as_points(domain, y)
    px, py = np.broadcast_arrays(px, py)
    vals = np.ones(len(px))
    axis_tol = tol / max(1.0, float(np.prod(2.0 / domain.lengths)))
    for i in range(domain.dim):
        vals *= _axis_kernel(t, domain.lower[i], domain.lengths[i], a[i], px[:, i], py[:, i], axis_tol)
    inside = domain.contains(px) & domain.contains(py)
    vals = np.where(inside, vals, 0.0)
    ref = np.asarray(x, float) if np.asarray(x).size >= np.asarray(y).size else np.asarray(y, float)
    return _shape_out(domain, ref, vals)


def survival_probability(domain: Domain, t: float, x, tol: float = 1e-12):
    """P^x(tau > t) = integral of p_t(x, .) via the closed-form mode integrals."""
    _check_time(t)
    a = domain.coefficients
    px = as_points(domain, x)
    vals = np.ones(len(px))
    for i in range(domain.dim):
        vals *= _axis_weighted_sum(t, domain.lower[i], domain.lengths[i], a[i], px[:, i], tol)
    return _shape_out(domain, x, vals)


def _axis_mode_integral(n: np.ndarray, ell: float) -> np.ndarray:
    """(1, phi_n) on one axis."""
    return np.sqrt(2.0 / ell) * ell * (1.0 - np.cos(n * math.pi)) / (n * math.pi)


def _axis_weighted_sum(t, lo, ell, a, x, tol):
    """sum_n e^{-lambda_n t} phi_n(x) (1, phi_n) on one axis."""
    nmax = max(_axis_mode_count(t, ell, a, tol), 1)
    n = np.arange(1, nmax + 1)
    lam = a * n**2 * math.pi**2 / (2.0 * ell * ell)
    modes = np.sqrt(2.0 / ell) * np.sin(np.outer(x - lo, n) * math.pi / ell)
    return modes @ (np.exp(-lam * t) * _axis_mode_integral(n, ell))


def conditioned_kernel(domain: Domain, t: float, x, y, tol: float = 1e-12):
    """Transition density of the diffusion conditioned to stay in the domain forever."""
    pair = first_eigenpair(domain)
    p = heat_kernel(domain, t, x, y, tol)
    return np.exp(pair.lam * t) * p * pair.phi(y) / pair.phi(x)


def effective_gap(domain: Domain, x, count: int = 64) -> float:
    """lambda_j - lambda_1 for the first mode j > 1 that does not vanish at x."""
    series = spectral_series(domain, count)
    lam1 = series.modes[0].lam
    for mode in series.modes[1:]:
        if abs(mode.phi(x)) > 1e-12:
            return mode.lam - lam1
    raise SeriesError("every retained higher mode vanishes at x")


@dataclass(frozen=True)
class KernelBound:
    deviation: float
    envelope: float
    gap: float

    @property
    def holds(self) -> bool:
        return self.deviation <= self.envelope


def conditioned_kernel_bound(domain: Domain, t: float, x, ys, constant: float, gap: float | None = None):
    """sup over ys of |K_t(x, y)/phi(y)^2 - 1| against constant * e^{-gap t}."""
    pair = first_eigenpair(domain)
    if gap is None:
        gap = spectral_gap(domain)
    ys = as_points(domain, ys)
    k = np.ravel(conditioned_kernel(domain, t, np.broadcast_to(as_points(domain, x), ys.shape), ys))
    ratio = k / np.ravel(pair.phi(ys)) ** 2
    dev = float(np.max(np.abs(ratio - 1.0)))
    return KernelBound(dev, constant * math.exp(-gap * t), gap)


def critical_beta(lam: float, m: float) -> float:
    """Branching rate at which the mean population neither grows nor decays."""
    if not m > 1:
        raise ValueError("mean offspring number must exceed 1")
    if not lam > 0:
        raise ValueError("eigenvalue must be positive")
    return lam / (m - 1.0)


def _quad(fun: Callable[[float], float], lo: float, hi: float, tol: float) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(fun, lo, hi, epsabs=tol, epsrel=0.0, limit=QUAD_LIMIT)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(str(exc)) from exc
    if not math.isfinite(val):
        raise QuadratureError("integral is not finite")
    return float(val)


def integrate_domain(domain: Domain, fun: Callable[[np.ndarray], float], tol: float = QUAD_TOL) -> float:
    """Adaptive quadrature of fun(point) over the domain; point is a length-d array."""
    if domain.dim == 1:
        return _quad(lambda s: float(np.ravel(fun(np.array([s])))[0]), domain.lower[0], domain.upper[0], tol)
    ranges = list(zip(domain.lower, domain.upper))
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.nquad(
                lambda *s: float(fun(np.array(s))), ranges, opts={"epsabs": tol, "epsrel": 0.0, "limit": 200}
            )
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(str(exc)) from exc
    if not math.isfinite(val):
        raise QuadratureError("integral is not finite")
    return float(val)


MOMENT_KINDS = ("phi", "phi3", "phi_f", "one_phi", "f2_phi", "phi2", "phi2_f")


def phi_moment(domain: Domain, kind: str, f: Callable | None = None, tol: float = QUAD_TOL) -> float:
    """Integral of a phi-weighted integrand over the domain.

    kind: "phi" or "one_phi" -> (1, phi); "phi3" -> (1, phi^3); "phi2" -> (phi, phi);
    "phi_f" -> (phi, f); "f2_phi" -> (f^2, phi); "phi2_f" -> (phi^2, f).
    Pure phi powers on boxes factor into one-dimensional integrals.
    """
    if kind not in MOMENT_KINDS:
        raise ValueError(f"unknown integrand {kind!r}; expected one of {MOMENT_KINDS}")
    pair = first_eigenpair(domain)
    power = {"phi": 1, "one_phi": 1, "phi3": 3, "phi2": 2}.get(kind)
    if power is not None:
        total = 1.0
        for i in range(domain.dim):
            lo, ell = domain.lower[i], domain.lengths[i]
            total *= _quad(lambda s: float(axis_mode(1, lo, ell, s)) ** power, lo, lo + ell, tol)
        return total
    if f is None:
        raise ValueError(f"integrand {kind!r} needs a function f")

    def weight(p):
        return float(pair.phi(p if domain.dim > 1 else p[0]))

    def fval(p):
        v = float(f(p[0] if domain.dim == 1 else p))
        if not math.isfinite(v):
            raise QuadratureError("f is not finite on the domain")
        return v

    integrands = {
        "phi_f": lambda p: weight(p) * fval(p),
        "f2_phi": lambda p: fval(p) ** 2 * weight(p),
        "phi2_f": lambda p: weight(p) ** 2 * fval(p),
    }
    return integrate_domain(domain, integrands[kind], tol)


class OffspringMoments(Protocol):
    m: float
    ea2: float


@dataclass(frozen=True)
class ModelConstants:
    """Constants of the critical branching diffusion derived from phi-moments."""

    domain: Domain
    lam: float
    m: float
    ea2: float
    beta_critical: float
    b: float
    sigma2: float
    phi_moments: dict = field(default_factory=dict)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def yaglom_mean(self, f: Callable | None = None) -> float:
        """(phi, f)/b; f=None means f = phi."""
        if f is None:
            return self.phi_moments["phi2"] / self.b
        return phi_moment(self.domain, "phi_f", f) / self.b


def model_constants(domain: Domain, offspring: OffspringMoments, f: Callable | None = None) -> ModelConstants:
    """b = 2(m-1)/(lambda (1,phi^3)(E[A^2]-E[A])) and sigma^2 = 2/(b (1,phi))."""
    m, ea2 = float(offspring.m), float(offspring.ea2)
    if not m > 1:
        raise ValueError("offspring mean must exceed 1")
    if not math.isfinite(ea2):
        raise ValueError("offspring second moment must be finite")
    pair = first_eigenpair(domain)
    one_phi = phi_moment(domain, "phi")
    one_phi3 = phi_moment(domain, "phi3")
    phi2 = phi_moment(domain, "phi2")
    b = 2.0 * (m - 1.0) / (pair.lam * one_phi3 * (ea2 - m))
    moments = {"one_phi": one_phi, "one_phi3": one_phi3, "phi2": phi2}
    if f is not None:
        moments["phi_f"] = phi_moment(domain, "phi_f", f)
    return ModelConstants(
        domain=domain,
        lam=pair.lam,
        m=m,
        ea2=ea2,
        beta_critical=critical_beta(pair.lam, m),
        b=b,
        sigma2=2.0 / (b * one_phi),
        phi_moments=moments,
    )


def _check_count_time(t: float):
    if t < 0:
        raise ValueError("t must be nonnegative")


def expected_count(domain: Domain, m: float, beta: float, t: float, x) -> float:
    """Many-to-one: E|N_t| = e^{(m-1) beta t} P^x(tau > t)."""
    _check_count_time(t)
    if t == 0:
        return 1.0
    return float(math.exp((m - 1.0) * beta * t) * np.squeeze(survival_probability(domain, t, x)))


def _phi2_coefficients(domain: Domain, count: int) -> tuple[list[EigenPair], np.ndarray]:
    """Expansion coefficients (phi_n, phi^2); box coefficients factor per axis."""
    series = spectral_series(domain, count)
    coef = []
    for mode in series.modes:
        c = 1.0
        for i, n in enumerate(mode.index):
            lo, ell = domain.lower[i], domain.lengths[i]
            c *= _quad(
                lambda s: float(axis_mode(n, lo, ell, s) * axis_mode(1, lo, ell, s) ** 2),
                lo, lo + ell, QUAD_TOL,
            )
        coef.append(c)
    return list(series.modes), np.asarray(coef)


def second_moment_phi(domain: Domain, m: float, ea2: float, beta: float, t: float, x, modes: int = 200) -> float:
    """Many-to-two with f = g = phi: E[(sum_u phi(X_u(t)))^2]."""
    _check_count_time(t)
    pair = first_eigenpair(domain)
    if t == 0:
        return float(np.squeeze(pair.phi(x))) ** 2
    series, coef = _phi2_coefficients(domain, modes)
    lam = np.array([p.lam for p in series])
    at_x = np.array([float(np.squeeze(p.phi(x))) for p in series]) * coef
    growth = (m - 1.0) * beta

    def p_phi2(s):
        return float(np.sum(np.exp(-lam * s) * at_x))

    first = math.exp(growth * t) * p_phi2(t)
    integrand = lambda s: math.exp((2 * t - s) * growth - 2.0 * pair.lam * (t - s)) * p_phi2(s)
    second = beta * (ea2 - m) * _quad(integrand, 0.0, t, QUAD_TOL)
    return first + second
