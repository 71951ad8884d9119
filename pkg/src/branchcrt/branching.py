"""Branching diffusion killed at the boundary, as marked Ulam-Harris trees.

Trees are grown depth-first by the numba kernel; this module wraps the kernel
output as immutable `MarkedTree` objects and provides the spine (size-biased)
measure, the additive martingale and its Radon-Nikodym weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping

import numpy as np

from . import _kernels as K
from .diffusion import StepParams
from .spectral import Domain, ModelConstants, as_points, first_eigenpair
from .streams import map_replicas, stream

TERMINAL_NAMES = {K.BRANCH: "BRANCH", K.KILLED: "KILLED", K.CENSORED: "CENSORED"}
TERMINAL_CODES = {v: k for k, v in TERMINAL_NAMES.items()}
DEFAULT_PARTICLE_CAP = 10**6
PMF_TOL = 1e-12


class ParticleCapExceeded(RuntimeError):
    """The simulation stopped at the particle cap; the tree is truncated."""


class TreeValidationError(ValueError):
    """A tree violates the marked-tree axioms."""


@dataclass(frozen=True)
class OffspringDistribution:
    """Finite-support offspring law with mean m > 1."""

    pmf: Mapping[int, float]

    def __post_init__(self):
        items = {int(k): float(p) for k, p in self.pmf.items() if float(p) != 0.0}
        if not items:
            raise ValueError("offspring pmf is empty")
        if any(k < 0 for k in items) or any(p < 0 for p in items.values()):
            raise ValueError("offspring counts and probabilities must be nonnegative")
        if abs(sum(items.values()) - 1.0) > PMF_TOL:
            raise ValueError(f"offspring probabilities sum to {sum(items.values())}, not 1")
        object.__setattr__(self, "pmf", dict(sorted(items.items())))
        if not self.m > 1:
            raise ValueError(f"offspring mean {self.m} must exceed 1")

    @classmethod
    def constant(cls, k: int) -> "OffspringDistribution":
        return cls({k: 1.0})

    @property
    def m(self) -> float:
        return sum(k * p for k, p in self.pmf.items())

    @property
    def ea2(self) -> float:
        return sum(k * k * p for k, p in self.pmf.items())

    @property
    def centred_second_moment(self) -> float:
        """E[(A - 1)^2]."""
        return sum((k - 1) ** 2 * p for k, p in self.pmf.items())

    def G(self, s):
        """Generating function E[s^A]."""
        s = np.asarray(s, float)
        return sum(p * s**k for k, p in self.pmf.items())

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        vals = np.array(list(self.pmf), np.int64)
        cdf = np.cumsum(list(self.pmf.values()))
        cdf[-1] = 1.0
        return vals, cdf

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Inverse-CDF sampling."""
        vals, cdf = self.arrays()
        u = rng.random(size)
        return vals[np.minimum(np.searchsorted(cdf, u, side="left"), len(vals) - 1)]

    def size_biased(self) -> "SizeBiasedOffspring":
        return size_biased(self)


@dataclass(frozen=True)
class SizeBiasedOffspring:
    """P(A_hat = k) = k P(A = k) / m; never zero."""

    pmf: Mapping[int, float]

    def __post_init__(self):
        if 0 in self.pmf:
            raise ValueError("size-biased law cannot charge 0")
        if abs(sum(self.pmf.values()) - 1.0) > PMF_TOL:
            raise ValueError("size-biased probabilities must sum to 1")

    def cdf_on(self, values: np.ndarray) -> np.ndarray:
        cdf = np.cumsum([self.pmf.get(int(k), 0.0) for k in values])
        cdf[-1] = 1.0
        return cdf

    def sample(self, rng: np.random.Generator, size: int | None = None):
        vals = np.array(list(self.pmf), np.int64)
        cdf = self.cdf_on(vals)
        return vals[np.minimum(np.searchsorted(cdf, rng.random(size)), len(vals) - 1)]


def size_biased(dist: OffspringDistribution) -> SizeBiasedOffspring:
    m = dist.m
    return SizeBiasedOffspring({k: k * p / m for k, p in dist.pmf.items() if k > 0})


def sample_offspring(dist: OffspringDistribution, rng: np.random.Generator) -> int:
    return int(dist.sample(rng))


@dataclass(frozen=True)
class SimulationParams:
    domain: Domain
    offspring: OffspringDistribution
    beta: float
    horizon: float = math.inf
    particle_cap: int = DEFAULT_PARTICLE_CAP
    step: StepParams = field(default_factory=StepParams)
    seed: int = 0
    path_every: int = 10

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.particle_cap < 1 or self.path_every < 1:
            raise ValueError("caps must be positive")


@dataclass(frozen=True)
class KernelRun:
    """Raw output of one kernel call."""

    summary: np.ndarray
    real_obs: np.ndarray
    clock_obs: np.ndarray
    nodes: np.ndarray
    birth_pos: np.ndarray
    death_pos: np.ndarray
    paths: np.ndarray
    snaps: np.ndarray

    @property
    def status(self) -> int:
        return int(self.summary[K.S_STATUS])

    @property
    def extinct(self) -> bool:
        return bool(self.summary[K.S_EXTINCT])

    @property
    def total_length(self) -> float:
        return float(self.summary[K.S_CLOCK])

    @property
    def counts(self) -> np.ndarray:
        return self.real_obs[:, 0]

    @property
    def phi_sums(self) -> np.ndarray:
        return self.real_obs[:, 1]


def run_kernel(x, params: SimulationParams, rng: np.random.Generator, *, obs_times=(), clock_times=(),
               clock_limit: float = math.inf, forest: bool = False, spine: bool = False,
               record: bool = False, keep_paths: bool = False, snapshots: bool = False,
               integrals: bool = False) -> KernelRun:
    """Grow one tree (or a forest) depth-first and return the raw arrays."""
    domain = params.domain
    x0 = as_points(domain, x)[0].astype(float)
    if not domain.contains(x0)[0]:
        raise ValueError("starting point must be interior")
    vals, cdf = params.offspring.arrays()
    sb_cdf = size_biased(params.offspring).cdf_on(vals)
    obs_t = np.asarray(sorted(obs_times), float)
    obs_c = np.asarray(sorted(clock_times), float)
    if len(obs_t) and obs_t[-1] > params.horizon:
        raise ValueError("observation time beyond horizon")
    out = K.grow(
        rng, x0, np.asarray(domain.lower, float), np.asarray(domain.upper, float), domain.coefficients,
        float(params.beta), vals, cdf, sb_cdf, float(params.step.h), bool(params.step.bridge_correction),
        float(params.horizon), float(clock_limit), forest, spine, obs_t, obs_c, record, keep_paths and record,
        snapshots, integrals, int(params.path_every), int(params.particle_cap), int(params.step.substep_cap),
        float(params.step.delta),
    )
    run = KernelRun(*out)
    if run.status == K.STATUS_SUBSTEP:
        from .diffusion import SubstepCapExceeded
        raise SubstepCapExceeded("conditioned step halving exceeded substep_cap")
    return run


class MarkedTree:
    """Immutable marked Ulam-Harris tree with node arrays in depth-first order."""

    def __init__(self, domain: Domain, nodes: np.ndarray, birth_pos: np.ndarray, death_pos: np.ndarray,
                 paths: np.ndarray | None, *, horizon: float, beta: float, offspring: OffspringDistribution,
                 x0, truncated: bool = False, validate: bool = False):
        self.domain = domain
        self._nodes = np.array(nodes, dtype=float)
        self._nodes.setflags(write=False)
        self.birth_pos = np.array(birth_pos, float)
        self.death_pos = np.array(death_pos, float)
        self.birth_pos.setflags(write=False)
        self.death_pos.setflags(write=False)
        self._paths = None if paths is None or len(paths) == 0 else np.array(paths, float)
        if self._paths is not None:
            self._paths.setflags(write=False)
        self.horizon = float(horizon)
        self.beta = float(beta)
        self.offspring = offspring
        self.x0 = as_points(domain, x0)[0].copy()
        self.truncated = bool(truncated)
        if validate:
            self.validate()

    @classmethod
    def from_run(cls, run: KernelRun, params: SimulationParams, x) -> "MarkedTree":
        return cls(params.domain, run.nodes, run.birth_pos, run.death_pos, run.paths, horizon=params.horizon,
                   beta=params.beta, offspring=params.offspring, x0=x, truncated=run.status == K.STATUS_CAP)

    # columns
    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def parent(self) -> np.ndarray:
        return self._nodes[:, K.N_PARENT].astype(np.int64)

    @property
    def rank(self) -> np.ndarray:
        return self._nodes[:, K.N_RANK].astype(np.int64)

    @property
    def birth(self) -> np.ndarray:
        return self._nodes[:, K.N_BIRTH]

    @property
    def death(self) -> np.ndarray:
        return self._nodes[:, K.N_DEATH]

    @property
    def lifetime(self) -> np.ndarray:
        return self.death - self.birth

    @property
    def offspring_count(self) -> np.ndarray:
        return self._nodes[:, K.N_KIDS].astype(np.int64)

    @property
    def terminal(self) -> np.ndarray:
        return self._nodes[:, K.N_TERMINAL].astype(np.int64)

    @property
    def spine_flag(self) -> np.ndarray:
        return self._nodes[:, K.N_SPINE] > 0

    @property
    def has_paths(self) -> bool:
        return self._paths is not None

    @property
    def censored(self) -> bool:
        return bool(np.any(self.terminal == K.CENSORED))

    @property
    def extinct(self) -> bool:
        return not self.censored and not self.truncated

    @cached_property
    def labels(self) -> list[tuple[int, ...]]:
        out: list[tuple[int, ...]] = []
        par, rk = self.parent, self.rank
        for i in range(len(self)):
            out.append(() if par[i] < 0 else out[par[i]] + (int(rk[i]),))
        return out

    @cached_property
    def index_of(self) -> dict[tuple[int, ...], int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    @cached_property
    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(len(self))]
        for i, p in enumerate(self.parent):
            if p >= 0:
                kids[p].append(i)
        for k in kids:
            k.sort(key=lambda j: self.rank[j])
        return kids

    @property
    def spine(self) -> list[tuple[int, ...]]:
        return [self.labels[i] for i in np.flatnonzero(self.spine_flag)]

    def path(self, i: int) -> np.ndarray:
        """Stored (time, position...) samples of node i, birth to death."""
        if self._paths is None:
            return np.vstack([np.r_[self.birth[i], self.birth_pos[i]], np.r_[self.death[i], self.death_pos[i]]])
        start = int(self._nodes[i, K.N_PATH0])
        return self._paths[start:start + int(self._nodes[i, K.N_PATHLEN])]

    def alive_at(self, t: float) -> np.ndarray:
        """Indices of N_t: birth <= t < death, plus nodes censored at the horizon when t equals it."""
        b, dth = self.birth, self.death
        alive = (b <= t) & (t < dth)
        if t == self.horizon:
            alive |= (self.terminal == K.CENSORED) & (dth == t) & (b <= t)
        return np.flatnonzero(alive)

    def position_at(self, i: int, t: float) -> np.ndarray:
        """Position of node i at time t by linear interpolation on the stored path."""
        p = self.path(i)
        return np.array([np.interp(t, p[:, 0], p[:, 1 + k]) for k in range(self.domain.dim)])

    def positions_at(self, t: float) -> np.ndarray:
        idx = self.alive_at(t)
        return np.array([self.position_at(i, t) for i in idx]).reshape(len(idx), self.domain.dim)

    def restrict(self, T: float) -> "MarkedTree":
        """The tree observed up to time T (nodes born after T dropped, later deaths censored)."""
        keep = self.birth <= T
        if T == self.horizon:
            return self
        old_to_new = -np.ones(len(self), np.int64)
        old_to_new[keep] = np.arange(int(keep.sum()))
        nodes = self._nodes[keep].copy()
        par = nodes[:, K.N_PARENT].astype(np.int64)
        nodes[:, K.N_PARENT] = np.where(par >= 0, old_to_new[np.maximum(par, 0)], -1)
        late = nodes[:, K.N_DEATH] > T
        nodes[late, K.N_DEATH] = T
        nodes[late, K.N_KIDS] = 0
        nodes[late, K.N_TERMINAL] = K.CENSORED
        death_pos = self.death_pos[keep].copy()
        kept = np.flatnonzero(keep)
        for j in np.flatnonzero(late):
            death_pos[j] = self.position_at(kept[j], T)
        new_paths = None
        if self._paths is not None:
            chunks, start = [], 0
            for j, i in enumerate(kept):
                p = self.path(i)
                if late[j]:
                    p = np.vstack([p[p[:, 0] < T], np.r_[T, death_pos[j]]])
                nodes[j, K.N_PATH0] = start
                nodes[j, K.N_PATHLEN] = len(p)
                start += len(p)
                chunks.append(p)
            new_paths = np.vstack(chunks)
        return MarkedTree(self.domain, nodes, self.birth_pos[keep], death_pos, new_paths, horizon=T,
                          beta=self.beta, offspring=self.offspring, x0=self.x0, truncated=self.truncated)

    def validate(self) -> None:
        """Check the marked-tree axioms; raises TreeValidationError."""
        n = len(self)
        if n == 0:
            raise TreeValidationError("empty tree")
        labels = self.labels
        if labels[0] != ():
            raise TreeValidationError("first node must be the root")
        seen = set()
        for lab in labels:
            if lab in seen:
                raise TreeValidationError(f"duplicate label {lab}")
            seen.add(lab)
            if lab and lab[:-1] not in seen:
                raise TreeValidationError(f"label set not prefix-closed at {lab}")
        par, kids, term = self.parent, self.offspring_count, self.terminal
        for i in range(n):
            ch = self.children[i]
            if term[i] == K.BRANCH and not self.truncated:
                if [self.rank[j] for j in ch] != list(range(1, kids[i] + 1)):
                    raise TreeValidationError(f"children of {labels[i]} are not 1..{kids[i]}")
            elif ch:
                raise TreeValidationError(f"non-branching node {labels[i]} has children")
            if par[i] >= 0 and self.birth[i] != self.death[par[i]]:
                raise TreeValidationError(f"birth of {labels[i]} differs from parent death")
            if not self.death[i] >= self.birth[i]:
                raise TreeValidationError(f"negative lifetime at {labels[i]}")
            if term[i] == K.KILLED:
                if kids[i] != 0:
                    raise TreeValidationError(f"killed node {labels[i]} has offspring")
                if self.domain.contains(self.death_pos[i])[0]:
                    raise TreeValidationError(f"killed node {labels[i]} did not end on the boundary")
            if term[i] == K.CENSORED and self.death[i] > self.horizon:
                raise TreeValidationError(f"censored node {labels[i]} beyond horizon")
        if np.any(self.spine_flag):
            spine = sorted(np.flatnonzero(self.spine_flag), key=lambda j: len(labels[j]))
            for a, b in zip(spine, spine[1:]):
                if par[b] != a:
                    raise TreeValidationError("spine labels do not form an ancestry chain")
            for j in spine:
                if term[j] == K.BRANCH and kids[j] < 1:
                    raise TreeValidationError("spine node without offspring")
                if term[j] == K.KILLED:
                    raise TreeValidationError("spine node killed")

    # serialisation
    def to_jsonl_lines(self, header: dict | None = None, include_paths: bool = True) -> Iterable[str]:
        from .io import json_text
        meta = {
            "format": "marked-tree/1",
            "domain": {"kind": self.domain.kind, "lower": list(self.domain.lower), "upper": list(self.domain.upper),
                       "diffusion": [list(r) for r in self.domain.diffusion]},
            "offspring": {str(k): p for k, p in self.offspring.pmf.items()},
            "beta": self.beta, "horizon": self.horizon, "x0": list(self.x0), "truncated": self.truncated,
        }
        if header:
            meta.update(header)
        yield json_text({"header": meta})
        for i, lab in enumerate(self.labels):
            rec = {
                "label": list(lab), "birth": float(self.birth[i]), "death": float(self.death[i]),
                "offspring": int(self.offspring_count[i]), "terminal": TERMINAL_NAMES[int(self.terminal[i])],
                "spine_flag": bool(self.spine_flag[i]),
                "birth_position": list(map(float, self.birth_pos[i])),
                "death_position": list(map(float, self.death_pos[i])),
            }
            if include_paths and self.has_paths:
                rec["path"] = self.path(i).tolist()
            yield json_text(rec)

    def dump_jsonl(self, path, header: dict | None = None, include_paths: bool = True) -> None:
        with open(path, "w") as fh:
            for line in self.to_jsonl_lines(header, include_paths):
                fh.write(line + "\n")

    @classmethod
    def from_jsonl_lines(cls, lines: Iterable[str]) -> "MarkedTree":
        it = iter(lines)
        try:
            meta = json.loads(next(it))["header"]
        except (StopIteration, KeyError, json.JSONDecodeError) as exc:
            raise TreeValidationError("missing header line") from exc
        dom = meta["domain"]
        domain = Domain(dom["kind"], tuple(dom["lower"]), tuple(dom["upper"]), tuple(tuple(r) for r in dom["diffusion"]))
        offspring = OffspringDistribution({int(k): v for k, v in meta["offspring"].items()})
        recs = [json.loads(line) for line in it if line.strip()]
        order = sorted(range(len(recs)), key=lambda i: tuple(recs[i]["label"]))
        recs = [recs[i] for i in order]
        index = {tuple(r["label"]): i for i, r in enumerate(recs)}
        nodes = np.zeros((len(recs), K.NODE_COLS))
        paths, start = [], 0
        for i, r in enumerate(recs):
            lab = tuple(r["label"])
            if lab and lab[:-1] not in index:
                raise TreeValidationError(f"label set not prefix-closed at {lab}")
            nodes[i, K.N_PARENT] = index[lab[:-1]] if lab else -1
            nodes[i, K.N_RANK] = lab[-1] if lab else 0
            nodes[i, K.N_BIRTH] = r["birth"]
            nodes[i, K.N_DEATH] = r["death"]
            nodes[i, K.N_KIDS] = r["offspring"]
            nodes[i, K.N_TERMINAL] = TERMINAL_CODES[r["terminal"]]
            nodes[i, K.N_SPINE] = 1.0 if r["spine_flag"] else 0.0
            if "path" in r:
                p = np.asarray(r["path"], float)
                nodes[i, K.N_PATH0] = start
                nodes[i, K.N_PATHLEN] = len(p)
                start += len(p)
                paths.append(p)
        birth_pos = np.array([r["birth_position"] for r in recs], float)
        death_pos = np.array([r["death_position"] for r in recs], float)
        all_paths = np.vstack(paths) if paths else None
        return cls(domain, nodes, birth_pos, death_pos, all_paths, horizon=meta["horizon"], beta=meta["beta"],
                   offspring=offspring, x0=meta["x0"], truncated=meta.get("truncated", False), validate=True)

    @classmethod
    def load_jsonl(cls, path) -> "MarkedTree":
        with open(path) as fh:
            return cls.from_jsonl_lines(fh)


def simulate_tree(x, params: SimulationParams, rng: np.random.Generator, keep_paths: bool = True,
                  strict: bool = False) -> MarkedTree:
    """Marked tree under P^x up to the horizon.

    A tree stopped by the particle cap is returned flagged `truncated`; with
    strict=True the cap raises ParticleCapExceeded instead.
    """
    run = run_kernel(x, params, rng, record=True, keep_paths=keep_paths)
    if strict and run.status == K.STATUS_CAP:
        raise ParticleCapExceeded(f"particle cap {params.particle_cap} reached")
    return MarkedTree.from_run(run, params, x)


def simulate_spine_tree(x, params: SimulationParams, rng: np.random.Generator, keep_paths: bool = True,
                        strict: bool = False) -> MarkedTree:
    """Marked tree under the spine measure: the spine is conditioned, branches at rate m beta with size-biased offspring."""
    if not math.isfinite(params.horizon):
        raise ValueError("spine trees never go extinct; a finite horizon is required")
    run = run_kernel(x, params, rng, record=True, keep_paths=keep_paths, spine=True)
    if strict and run.status == K.STATUS_CAP:
        raise ParticleCapExceeded(f"particle cap {params.particle_cap} reached")
    return MarkedTree.from_run(run, params, x)


def martingale_M(tree: MarkedTree, t: float, constants: ModelConstants) -> float:
    """M_t = e^{(lambda - beta(m-1)) t} sum_{u in N_t} phi(X_u(t))."""
    if t > tree.horizon:
        raise ValueError("t beyond the tree horizon")
    pair = first_eigenpair(tree.domain)
    idx = tree.alive_at(t)
    if idx.size == 0:
        return 0.0
    pts = np.array([tree.position_at(i, t) for i in idx])
    total = float(np.sum(np.atleast_1d(pair.phi(pts if tree.domain.dim > 1 else pts[:, 0]))))
    return math.exp((constants.lam - tree.beta * (constants.m - 1.0)) * t) * total


def rn_weight(tree: MarkedTree, t: float, x, constants: ModelConstants) -> float:
    """dQ/dP on F_t: M_t / phi(x)."""
    return martingale_M(tree, t, constants) / float(np.squeeze(first_eigenpair(tree.domain).phi(x)))


def martingale_growth(constants: ModelConstants, beta: float, t: float) -> float:
    return math.exp((constants.lam - beta * (constants.m - 1.0)) * t)


@dataclass(frozen=True)
class PopulationSample:
    """Per-replica counts and phi-sums at observation times."""

    times: np.ndarray
    counts: np.ndarray
    phi_sums: np.ndarray
    capped: np.ndarray


def population_sample(x, params: SimulationParams, times, n_rep: int, seed: int, tag: str = "population",
                      threads: int = 1) -> PopulationSample:
    """|N_t| and sum_u phi(X_u(t)) for n_rep independent trees (fast mode, no node table)."""
    times = np.asarray(sorted(times), float)

    def one(rng, _i):
        run = run_kernel(x, params, rng, obs_times=times)
        return run.real_obs[:, 0].copy(), run.real_obs[:, 1].copy(), run.status == K.STATUS_CAP

    res = map_replicas(one, n_rep, seed, tag, threads)
    return PopulationSample(times, np.array([r[0] for r in res]), np.array([r[1] for r in res]),
                            np.array([r[2] for r in res]))


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int

    def ci(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return self.mean - z * self.se, self.mean + z * self.se


def _estimate(values) -> Estimate:
    v = np.asarray(values, float)
    n = len(v)
    return Estimate(float(v.mean()) if n else math.nan, float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf, n)


def _proportion(k: int, n: int) -> Estimate:
    if n == 0:
        return Estimate(math.nan, math.inf, 0)
    p = k / n
    return Estimate(p, math.sqrt(max(p * (1 - p), 1.0 / n) / n), n)


@dataclass(frozen=True)
class ConditionalCheck:
    conditioned: Estimate
    spine: Estimate
    survivors: int
    attempted: int

    @property
    def overlap(self) -> bool:
        a, b = self.conditioned.ci(), self.spine.ci()
        return a[0] <= b[1] and b[0] <= a[1]


def conditional_limit_check(x, params: SimulationParams, T: float, t: float,
                            event: Callable[[MarkedTree, float], bool], n_rep: int, seed: int,
                            threads: int = 1, min_survivors: int = 30) -> ConditionalCheck:
    """P^x(B | |N_t| > 0) by rejection against Q^x(B) from spine trees, for B measurable on [0, T]."""
    if not T < t:
        raise ValueError("need T < t")
    p_params = _with(params, horizon=t)
    q_params = _with(params, horizon=T)

    def p_one(rng, _i):
        run = run_kernel(x, p_params, rng, obs_times=[t], record=True)
        if run.real_obs[0, 0] == 0:
            return None
        tree = MarkedTree.from_run(run, p_params, x).restrict(T)
        return bool(event(tree, T))

    def q_one(rng, _i):
        return bool(event(simulate_spine_tree(x, q_params, rng, keep_paths=False), T))

    p_res = [r for r in map_replicas(p_one, n_rep, seed, "prop-P", threads) if r is not None]
    if len(p_res) < min_survivors:
        raise RuntimeError(f"only {len(p_res)} surviving trees out of {n_rep}")
    q_res = map_replicas(q_one, n_rep, seed, "prop-Q", threads)
    return ConditionalCheck(_proportion(sum(p_res), len(p_res)), _proportion(sum(q_res), len(q_res)),
                            len(p_res), n_rep)


def _with(params: SimulationParams, **changes) -> SimulationParams:
    from dataclasses import replace
    return replace(params, **changes)


def event_population_at_least(k: int) -> Callable[[MarkedTree, float], bool]:
    return lambda tree, T: len(tree.alive_at(T)) >= k


def tree_stream(seed: int, replica: int, tag: str = "simulate") -> np.random.Generator:
    return stream(seed, tag, replica)
