"""Killed and conditioned diffusion steps with boundary-crossing correction.

Single-state functions follow the step contract exactly; the batch helpers
advance many independent paths at once with the same rules and are what the
statistical checks use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectral import Domain, as_points, first_eigenpair

REFLECTION_GUARD = 0.5


class SubstepCapExceeded(RuntimeError):
    """Step halving near the boundary hit the cap: the step is too coarse."""


@dataclass(frozen=True)
class StepParams:
    h: float = 1e-3
    bridge_correction: bool = True
    substep_cap: int = 64
    delta: float = REFLECTION_GUARD

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.substep_cap < 0:
            raise ValueError("substep_cap must be nonnegative")


@dataclass(frozen=True)
class DiffusionState:
    """Position (None once absorbed) and elapsed time of one diffusing particle."""

    domain: Domain
    position: np.ndarray | None
    clock: float = 0.0

    @property
    def absorbed(self) -> bool:
        return self.position is None

    @classmethod
    def start(cls, domain: Domain, x, clock: float = 0.0) -> "DiffusionState":
        pos = as_points(domain, x)[0].copy()
        if not domain.contains(pos)[0]:
            return cls(domain, None, clock)
        return cls(domain, pos, clock)


def bridge_hit_probability(domain: Domain, x, y, h: float) -> np.ndarray:
    """Per-face probability that a Brownian bridge from x to y over time h touches the face.

    Returns an (N, d, 2) array, faces ordered (lower, upper) per axis.
    """
    a = domain.coefficients
    px, py = as_points(domain, x), as_points(domain, y)
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    d_lo = np.clip(px - lo, 0, None) * np.clip(py - lo, 0, None)
    d_hi = np.clip(hi - px, 0, None) * np.clip(hi - py, 0, None)
    return np.stack([np.exp(-2.0 * d_lo / (a * h)), np.exp(-2.0 * d_hi / (a * h))], axis=-1)


def step_killed(state: DiffusionState, params: StepParams, rng: np.random.Generator) -> DiffusionState:
    """One Euler step of the killed diffusion; absorption time is interpolated within the step."""
    if state.absorbed:
        raise ValueError("cannot advance an absorbed state")
    pos, absorbed, frac = step_killed_batch(state.domain, state.position[None, :], params, rng)
    if absorbed[0]:
        return DiffusionState(state.domain, None, state.clock + frac[0] * params.h)
    return DiffusionState(state.domain, pos[0], state.clock + params.h)


def step_killed_batch(domain: Domain, positions: np.ndarray, params: StepParams, rng: np.random.Generator,
                      h: float | None = None):
    """Advance interior positions by one killed step.

    Returns (new positions, absorbed mask, absorption fraction of the step).
    Exits through the endpoint are timed by linear interpolation; bridge hits at the step midpoint.
    """
    h = params.h if h is None else h
    a = domain.coefficients
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    pos = np.asarray(positions, float)
    on_boundary = np.any((pos <= lo) | (pos >= hi), axis=1)
    new = pos + np.sqrt(a * h) * rng.standard_normal(pos.shape)
    below, above = new <= lo, new >= hi
    with np.errstate(divide="ignore", invalid="ignore"):
        f_lo = np.where(below, (pos - lo) / (pos - new), np.inf)
        f_hi = np.where(above, (hi - pos) / (new - pos), np.inf)
    frac = np.minimum(f_lo, f_hi).min(axis=1)
    exited = np.isfinite(frac)
    absorbed = exited | on_boundary
    frac = np.where(on_boundary, 0.0, np.where(exited, frac, 1.0))
    if params.bridge_correction:
        p = bridge_hit_probability(domain, pos, new, h).reshape(len(pos), -1)
        u = rng.random(p.shape)
        hit = np.any(u < p, axis=1) & ~absorbed
        frac = np.where(hit, 0.5, frac)
        absorbed = absorbed | hit
    return new, absorbed, frac


def phi_log_gradient(domain: Domain, positions: np.ndarray) -> np.ndarray:
    """grad(phi)/phi per axis for the product-of-sines eigenfunction."""
    lo, ell = np.asarray(domain.lower), domain.lengths
    u = math.pi * (np.asarray(positions, float) - lo) / ell
    return (math.pi / ell) / np.tan(u)


def conditioned_drift(domain: Domain, positions) -> np.ndarray:
    """Doob-transform drift a grad(phi)/phi as an (N, d) array."""
    pts = as_points(domain, positions)
    return domain.coefficients * phi_log_gradient(domain, pts)


def _reflect(domain: Domain, old: np.ndarray, new: np.ndarray) -> np.ndarray:
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    y = np.where(new <= lo, 2 * lo - new, new)
    y = np.where(y >= hi, 2 * hi - y, y)
    bad = (y <= lo) | (y >= hi)
    return np.where(bad, 0.5 * (old + np.where(y <= lo, lo, hi)), y)


def step_conditioned(state: DiffusionState, params: StepParams, rng: np.random.Generator) -> DiffusionState:
    """One step of length h of the conditioned diffusion, built from halved substeps when needed."""
    if state.absorbed:
        raise ValueError("state must be interior")
    pos = state.position.copy()
    remaining = params.h
    while remaining > 0:
        dt = remaining
        halvings = 0
        while np.any(np.abs(conditioned_drift(state.domain, pos)[0]) * dt > params.delta * _face_distance(state.domain, pos)):
            dt *= 0.5
            halvings += 1
            if halvings > params.substep_cap:
                raise SubstepCapExceeded(f"more than {params.substep_cap} halvings at {pos}")
        pos = _conditioned_euler(state.domain, pos[None, :], dt, rng)[0]
        remaining = remaining - dt if dt < remaining else 0.0
    return DiffusionState(state.domain, pos, state.clock + params.h)


def _face_distance(domain: Domain, pos: np.ndarray) -> np.ndarray:
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    return np.minimum(pos - lo, hi - pos)


def _conditioned_euler(domain: Domain, pos: np.ndarray, dt, rng) -> np.ndarray:
    a = domain.coefficients
    dt = np.asarray(dt, float).reshape(-1, 1) if np.ndim(dt) else dt
    new = pos + conditioned_drift(domain, pos) * dt + np.sqrt(a * dt) * rng.standard_normal(pos.shape)
    return _reflect(domain, pos, new)


def advance_conditioned_batch(domain: Domain, positions: np.ndarray, duration: float, params: StepParams,
                              rng: np.random.Generator) -> np.ndarray:
    """Advance many conditioned paths by `duration`, halving per path near the boundary."""
    pos = np.array(positions, float)
    remaining = np.full(len(pos), float(duration))
    while np.any(remaining > 0):
        act = remaining > 0
        dt = np.minimum(remaining[act], params.h)
        p = pos[act]
        for _ in range(params.substep_cap + 1):
            too_big = np.any(np.abs(conditioned_drift(domain, p)) * dt[:, None] > params.delta * _face_distance(domain, p), axis=1)
            if not np.any(too_big):
                break
            dt = np.where(too_big, 0.5 * dt, dt)
        else:
            raise SubstepCapExceeded(f"more than {params.substep_cap} halvings")
        pos[act] = _conditioned_euler(domain, p, dt, rng)
        rem = remaining[act] - dt
        rem[rem < 1e-15] = 0.0
        remaining[act] = rem
    return pos


def sample_phi2(domain: Domain, rng: np.random.Generator, size: int | None = None):
    """Exact rejection sampling from the density phi^2 with a uniform envelope."""
    pair = first_eigenpair(domain)
    n = 1 if size is None else int(size)
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    bound = pair.sup() ** 2
    out = np.empty((0, domain.dim))
    while len(out) < n:
        k = max(2 * (n - len(out)), 16)
        cand = lo + (hi - lo) * rng.random((k, domain.dim))
        keep = rng.random(k) * bound < np.atleast_1d(pair.phi(cand if domain.dim > 1 else cand[:, 0])) ** 2
        out = np.vstack([out, cand[keep]])
    out = out[:n]
    if domain.dim == 1:
        out = out[:, 0]
    return out[0] if size is None else out


def simulate_killed(domain: Domain, x, t: float, n_paths: int, params: StepParams, rng: np.random.Generator):
    """Run n_paths killed paths from x up to time t. Returns (alive mask, positions at t)."""
    pos = np.repeat(as_points(domain, x), n_paths, axis=0)
    alive = np.ones(n_paths, bool)
    steps = int(round(t / params.h))
    if not math.isclose(steps * params.h, t, rel_tol=1e-9):
        raise ValueError("t must be a multiple of the step h")
    for _ in range(steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        new, absorbed, _ = step_killed_batch(domain, pos[idx], params, rng)
        pos[idx] = new
        alive[idx[absorbed]] = False
    return alive, pos


def conditioned_occupation(domain: Domain, x, params: StepParams, rng: np.random.Generator, n_chains: int,
                           horizon: float, burn_in: float, thin: float) -> np.ndarray:
    """Thinned positions of independent conditioned chains started at x.

    Each chain runs to `horizon`; positions are recorded every `thin` time units after `burn_in`.
    """
    pos = np.repeat(as_points(domain, x), n_chains, axis=0)
    pos = advance_conditioned_batch(domain, pos, burn_in, params, rng)
    out = [pos.copy()]
    t = burn_in
    while t + thin <= horizon + 1e-12:
        pos = advance_conditioned_batch(domain, pos, thin, params, rng)
        out.append(pos.copy())
        t += thin
    return np.concatenate(out)

