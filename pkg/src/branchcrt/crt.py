"""Reference laws for the limit objects.

Brownian excursions conditioned to reach a height, their tree distances,
and the half-normal marginals of reflected Brownian motion and local time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import stats

DEFAULT_MESH = 1e-4
MAX_STEPS = 10**8


class ExcursionHorizonExceeded(RuntimeError):
    """No return to zero within the step cap."""


class ExcursionCeilingExceeded(RuntimeError):
    """The excursion rose above the requested ceiling."""


@dataclass(frozen=True)
class ExcursionPath:
    samples: np.ndarray
    dt: float
    height_floor: float

    @property
    def length(self) -> float:
        return (len(self.samples) - 1) * self.dt

    @property
    def maximum(self) -> float:
        return float(self.samples.max())

    def scaled(self, space: float) -> "ExcursionPath":
        """The path multiplied by `space` (time mesh unchanged)."""
        return ExcursionPath(self.samples * space, self.dt, self.height_floor * space)

    def to_csv(self, path, header=None):
        from .io import write_csv
        t = np.arange(len(self.samples)) * self.dt
        return write_csv(path, ("time", "value"), zip(t.tolist(), self.samples.tolist()), header)


@njit(cache=True)
def _excursion(rng, h, dt, ceiling, max_steps):
    """Brownian motion from 0 until the first zero after |B| >= h.

    Returns (status, samples of |B| from the last zero before the hit to the next zero, steps used).
    status: 0 ok, 1 step cap, 2 ceiling exceeded.
    """
    sd = math.sqrt(dt)
    cap = 1024
    buf = np.zeros(cap)
    n = 1
    buf[0] = 0.0
    b = 0.0
    reached = False
    steps = 0
    while steps < max_steps:
        nb = b + sd * rng.standard_normal()
        steps += 1
        crossed = (b > 0.0 and nb <= 0.0) or (b < 0.0 and nb >= 0.0)
        if crossed:
            if reached:
                if n >= cap:
                    nbuf = np.zeros(2 * cap)
                    nbuf[:n] = buf[:n]
                    buf = nbuf
                    cap *= 2
                buf[n] = 0.0
                n += 1
                return 0, buf[:n], steps
            n = 1
            b = nb
            if b == 0.0:
                continue
        else:
            b = nb
        a = abs(b)
        if a >= ceiling:
            return 2, buf[:0], steps
        if a >= h:
            reached = True
        if n >= cap:
            nbuf = np.zeros(2 * cap)
            nbuf[:n] = buf[:n]
            buf = nbuf
            cap *= 2
        buf[n] = a
        n += 1
    return 1, buf[:0], steps


def sample_conditioned_excursion(h: float, dt: float, rng: np.random.Generator, ceiling: float = math.inf,
                                 max_steps: int = MAX_STEPS, retry_ceiling: bool = True) -> ExcursionPath:
    """Brownian excursion conditioned to reach height h, by the first-excursion construction.

    With a finite ceiling, excursions rising above it are discarded and
    redrawn, which conditions on max < ceiling.
    """
    if not (h > 0 and dt > 0):
        raise ValueError("need h > 0 and dt > 0")
    if not ceiling > h:
        raise ValueError("ceiling must exceed h")
    while True:
        status, samples, _ = _excursion(rng, float(h), float(dt), float(ceiling), int(max_steps))
        if status == 0:
            return ExcursionPath(samples.copy(), float(dt), float(h))
        if status == 1:
            raise ExcursionHorizonExceeded(f"no return to zero within {max_steps} steps")
        if not retry_ceiling:
            raise ExcursionCeilingExceeded("excursion exceeded the ceiling")


def excursion_distance(path: ExcursionPath, i: int, j: int) -> float:
    e = path.samples
    lo, hi = (i, j) if i <= j else (j, i)
    return float(e[i] + e[j] - 2.0 * e[lo:hi + 1].min())


def excursion_distance_matrix(path: ExcursionPath, k: int, rng: np.random.Generator,
                              times: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Tree distances d_e between k uniform times, minima taken over the grid. Returns (matrix, times)."""
    if times is None:
        times = rng.random(k) * path.length
    times = np.asarray(times, float)
    idx = np.minimum(np.floor(times / path.dt).astype(np.int64), len(path.samples) - 1)
    m = np.zeros((len(idx), len(idx)))
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            m[a, b] = m[b, a] = excursion_distance(path, idx[a], idx[b])
    return m, times


@dataclass(frozen=True)
class ReferenceLaws:
    """Limit marginals at time t: sigma B_t, sigma |B_t| and the local-time limit (same law)."""

    t: float
    sigma: float = 1.0

    @property
    def scale(self) -> float:
        return self.sigma * math.sqrt(self.t)

    def normal(self):
        return stats.norm(0.0, self.scale)

    def half_normal(self):
        return stats.halfnorm(0.0, self.scale)

    def sample_abs(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.scale * np.abs(rng.standard_normal(n))

    def sample_local_time(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Local time at zero by time t, via its equality in law with |B_t|."""
        return self.sample_abs(rng, n)

    def mean_abs(self) -> float:
        return self.scale * math.sqrt(2.0 / math.pi)


def reference_laws(t: float, sigma: float = 1.0) -> ReferenceLaws:
    if not t > 0:
        raise ValueError("t must be positive")
    return ReferenceLaws(float(t), float(sigma))


def reflected_bm_with_local_time(t: float, dt: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Grid paths (R, L) of reflected Brownian motion and its local time at 0 (Levy's construction R = M - B, L = M)."""
    n = int(round(t / dt))
    b = np.concatenate([[0.0], np.cumsum(math.sqrt(dt) * rng.standard_normal(n))])
    run_max = np.maximum.accumulate(b)
    return run_max - b, run_max
