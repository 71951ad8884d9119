"""Depth-first exploration of marked trees and forests.

The exploration visits individuals in lexicographic label order and spends
time l_u at u. Along it we expose the height H, the position V, the
younger-sibling sum S_bold, the tree index Lambda and the martingale S_bar,
plus the sampled distance matrices used to compare H with S_bold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .branching import KernelRun, MarkedTree, SimulationParams, run_kernel
from .spectral import Domain, as_points, first_eigenpair
from .streams import map_replicas

Label = tuple[int, ...]


class CensoredTreeError(ValueError):
    """Exact exploration identities need a tree without censored individuals."""


def depth_first_order(tree: MarkedTree) -> list[Label]:
    """Labels in depth-first order, i.e. lexicographic order of Ulam-Harris words."""
    return sorted(tree.labels)


def mrca(a: Sequence[int], b: Sequence[int]) -> Label:
    """Longest common prefix of two labels."""
    out = []
    for x, y in zip(a, b):
        if x != y:
            break
        out.append(x)
    return tuple(out)


def is_ancestor(a: Sequence[int], b: Sequence[int]) -> bool:
    """a is a (non-strict) ancestor of b."""
    return len(a) <= len(b) and tuple(b[: len(a)]) == tuple(a)


class ExplorationPath:
    """Continuous depth-first exploration of one tree or of a concatenated forest.

    Visit arrays are in exploration order. `sbold` is computed from labels
    (younger siblings along the ancestry); `sbar_prime` is computed
    independently by accumulating offspring and birth contributions, so the
    identities relating them are genuine checks.
    """

    def __init__(self, domain: Domain, x0, nodes: np.ndarray, birth_pos: np.ndarray, death_pos: np.ndarray,
                 paths: np.ndarray | None, labels: list[Label], phi: Callable | None = None,
                 censored: bool = False, beta: float | None = None, offspring=None,
                 clock_obs: np.ndarray | None = None, clock_times: np.ndarray | None = None,
                 summary: np.ndarray | None = None):
        self.domain = domain
        self.x0 = as_points(domain, x0)[0].copy()
        self._nodes = nodes
        self.birth_pos = birth_pos
        self.death_pos = death_pos
        self._paths = None if paths is None or len(paths) == 0 else paths
        self.labels = labels
        self.eigen = first_eigenpair(domain)
        self._phi = phi if phi is not None else self._phi_eigen
        self.censored = censored
        self.beta = beta
        self.offspring = offspring
        self.clock_obs = clock_obs
        self.clock_times = clock_times
        self.summary = summary

        n = len(nodes)
        self.lifetime = nodes[:, K.N_DEATH] - nodes[:, K.N_BIRTH]
        self.birth = nodes[:, K.N_BIRTH].copy()
        self.death = nodes[:, K.N_DEATH].copy()
        self.kids = nodes[:, K.N_KIDS].astype(np.int64)
        self.terminal = nodes[:, K.N_TERMINAL].astype(np.int64)
        self.parent = nodes[:, K.N_PARENT].astype(np.int64)
        self.rank = nodes[:, K.N_RANK].astype(np.int64)
        self.tree_number = nodes[:, K.N_TREE].astype(np.int64) + 1
        self.start = np.concatenate([[0.0], np.cumsum(self.lifetime)[:-1]]) if n else np.zeros(0)
        self.total_length = float(np.sum(self.lifetime))
        self.phi_x = float(self._phi(self.x0))
        phi_b = np.array([float(self._phi(p)) for p in birth_pos])
        phi_d = np.array([float(self._phi(p)) for p in death_pos])
        self.phi_birth, self.phi_death = phi_b, phi_d

        sbold = np.zeros(n)
        for i in range(n):
            p = self.parent[i]
            if p >= 0:
                sbold[i] = sbold[p] + (self.kids[p] - self.rank[i]) * phi_d[p]
        self.sbold = sbold

        finished = np.concatenate([[0.0], np.cumsum(self.kids * phi_d)[:-1]]) if n else np.zeros(0)
        nonroot_births = np.cumsum(np.where(self.parent >= 0, phi_b, 0.0))
        self.sbar_prime = finished - nonroot_births - self.tree_number * self.phi_x
        self.ibar_prime = np.minimum.accumulate(self.sbar_prime) if n else np.zeros(0)

    def _phi_eigen(self, p) -> float:
        return float(self.eigen.phi(p if self.domain.dim > 1 else p[0]))

    # construction
    @classmethod
    def from_tree(cls, tree: MarkedTree, phi: Callable | None = None, exact: bool = True) -> "ExplorationPath":
        if exact and (tree.censored or tree.truncated):
            raise CensoredTreeError("tree has censored individuals; pass exact=False to explore it anyway")
        order = sorted(range(len(tree)), key=lambda i: tree.labels[i])
        pos_of = np.empty(len(order), np.int64)
        pos_of[order] = np.arange(len(order))
        nodes = tree._nodes[order].copy()
        par = nodes[:, K.N_PARENT].astype(np.int64)
        nodes[:, K.N_PARENT] = np.where(par >= 0, pos_of[np.maximum(par, 0)], -1)
        nodes[:, K.N_TREE] = 0
        paths = None
        if tree.has_paths:
            chunks, start = [], 0
            for j, i in enumerate(order):
                p = tree.path(i)
                nodes[j, K.N_PATH0] = start
                nodes[j, K.N_PATHLEN] = len(p)
                start += len(p)
                chunks.append(p)
            paths = np.vstack(chunks)
        return cls(tree.domain, tree.x0, nodes, tree.birth_pos[order], tree.death_pos[order], paths,
                   [tree.labels[i] for i in order], phi, censored=tree.censored, beta=tree.beta,
                   offspring=tree.offspring)

    @classmethod
    def from_run(cls, run: KernelRun, params: SimulationParams, x, clock_times=None) -> "ExplorationPath":
        nodes = run.nodes
        labels: list[Label] = []
        for i in range(len(nodes)):
            p = int(nodes[i, K.N_PARENT])
            labels.append(() if p < 0 else labels[p] + (int(nodes[i, K.N_RANK]),))
        return cls(params.domain, x, nodes, run.birth_pos, run.death_pos, run.paths, labels,
                   censored=bool(run.summary[K.S_CENSORED]), beta=params.beta, offspring=params.offspring,
                   clock_obs=run.clock_obs, clock_times=None if clock_times is None else np.asarray(clock_times),
                   summary=run.summary)

    # evaluators
    def __len__(self) -> int:
        return len(self.start)

    @property
    def n_trees(self) -> int:
        return int(self.tree_number[-1]) if len(self) else 0

    def visit_at(self, t) -> np.ndarray:
        """Index of v_t: the last visit with start <= t."""
        t = np.asarray(t, float)
        if np.any(t < 0) or np.any(t > self.total_length):
            raise ValueError("exploration time outside [0, L]")
        idx = np.searchsorted(self.start, t, side="right") - 1
        return np.clip(idx, 0, len(self) - 1)

    def kappa(self, t) -> np.ndarray:
        return self.start[self.visit_at(t)]

    def height(self, t) -> np.ndarray:
        """H_t = birth time of v_t + (t - kappa_t)."""
        idx = self.visit_at(t)
        return self.birth[idx] + (np.asarray(t, float) - self.start[idx])

    def position(self, t) -> np.ndarray:
        """V_t from the stored path of v_t; (N, d)."""
        ts = np.atleast_1d(np.asarray(t, float))
        idx = self.visit_at(ts)
        out = np.empty((len(ts), self.domain.dim))
        for k, (i, s) in enumerate(zip(idx, ts)):
            real = self.birth[i] + (s - self.start[i])
            p = self._path(i)
            out[k] = [np.interp(real, p[:, 0], p[:, 1 + c]) for c in range(self.domain.dim)]
        return out

    def _path(self, i: int) -> np.ndarray:
        if self._paths is None:
            return np.vstack([np.r_[self.birth[i], self.birth_pos[i]], np.r_[self.death[i], self.death_pos[i]]])
        s = int(self._nodes[i, K.N_PATH0])
        return self._paths[s:s + int(self._nodes[i, K.N_PATHLEN])]

    def phi_v(self, t) -> np.ndarray:
        return np.array([float(self._phi(p)) for p in self.position(t)])

    def s_bold(self, t) -> np.ndarray:
        return self.sbold[self.visit_at(t)]

    def s_single(self, t) -> np.ndarray:
        """Single-tree S_t = phi(V_t) + S_bold_t."""
        return self.phi_v(t) + self.s_bold(t)

    def index(self, t) -> np.ndarray:
        """Lambda_t, the 1-based number of the tree being visited."""
        return self.tree_number[self.visit_at(t)]

    def s_bar_prime(self, t) -> np.ndarray:
        return self.sbar_prime[self.visit_at(t)]

    def i_bar_prime(self, t) -> np.ndarray:
        return self.ibar_prime[self.visit_at(t)]

    def s_bar(self, t) -> np.ndarray:
        return self.phi_v(t) + self.s_bar_prime(t)

    # exports
    def rows(self, times) -> list[tuple]:
        times = np.asarray(times, float)
        idx = self.visit_at(times)
        phv = self.phi_v(times)
        return [
            (float(t), ".".join(map(str, self.labels[i])) or "root", float(self.birth[i] + t - self.start[i]),
             float(ph + self.sbold[i]), float(self.sbold[i]), int(self.tree_number[i]), float(ph))
            for t, i, ph in zip(times, idx, phv)
        ]

    CSV_COLUMNS = ("exploration_time", "label", "H", "S", "S_bold", "Lambda", "phi_of_V")

    def to_csv(self, path, times, header=None):
        from .io import write_csv
        return write_csv(path, self.CSV_COLUMNS, self.rows(times), header)

    def contour(self, convention: str = "traversal") -> tuple[np.ndarray, np.ndarray]:
        """Breakpoints (time, value) of the contour function of a single tree.

        "traversal": after visiting u_j climb back down to the birth height of
        u_{j+1}. "as_written": the backtracking lengths r_j, r'_j with the
        subscripts exactly as printed in the source definition.
        """
        if self.n_trees != 1:
            raise ValueError("contour is defined for a single tree")
        times, vals = [0.0], [0.0]
        t, c = 0.0, 0.0
        n = len(self)
        for j in range(n):
            t += self.lifetime[j]
            c += self.lifetime[j]
            times.append(t), vals.append(c)
            if j + 1 == n:
                break
            a, b = self.labels[j], self.labels[j + 1]
            if is_ancestor(a, b):
                continue
            w = mrca(a, b)
            iw = self._index_of(w)
            w_birth = self.death[iw] - self.lifetime[iw]
            if convention == "traversal":
                r, r2 = self.death[j] - self.birth[j + 1], 0.0
            elif convention == "as_written":
                r, r2 = self.death[j] - w_birth, self.lifetime[j + 1] - w_birth
            else:
                raise ValueError(f"unknown convention {convention!r}")
            t += r
            c -= r
            times.append(t), vals.append(c)
            if r2:
                t += r2
                c += r2
                times.append(t), vals.append(c)
        back = c
        t += back
        times.append(t), vals.append(0.0)
        return np.asarray(times), np.asarray(vals)

    def _index_of(self, label: Label) -> int:
        if not hasattr(self, "_label_index"):
            self._label_index = {lab: i for i, lab in enumerate(self.labels)}
        return self._label_index[label]

    def jump_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """At each visit end: (exploration time, predicted jump (A-1)phi(death), jump from the left limit).

        The left limit uses the last stored path sample strictly before death,
        so boundary deaths show the discretisation gap.
        """
        ends = self.start + self.lifetime
        predicted = (self.kids - 1) * self.phi_death
        observed = np.full(len(self), np.nan)
        for q in range(len(self) - 1):
            p = self._path(q)
            before = p[p[:, 0] < self.death[q]]
            left = float(self._phi(before[-1, 1:])) if len(before) else self.phi_birth[q]
            after = self.phi_birth[q + 1] + self.sbar_prime[q + 1]
            observed[q] = after - (left + self.sbar_prime[q])
        return ends[:-1], predicted[:-1], observed[:-1]


def explore(tree: MarkedTree, phi: Callable | None = None, exact: bool = True) -> ExplorationPath:
    return ExplorationPath.from_tree(tree, phi, exact)


def explore_forest(x, params: SimulationParams, n_time: float, rng: np.random.Generator, keep_paths: bool = False,
                   clock_times: Sequence[float] = (), integrals: bool = False) -> ExplorationPath:
    """Explore i.i.d. trees from x, concatenated, until the exploration clock reaches n_time.

    Only the explored part of the last tree is simulated.
    """
    from dataclasses import replace
    p = replace(params, horizon=math.inf)
    clock_times = np.asarray(sorted(clock_times), float)
    run = run_kernel(x, p, rng, clock_times=clock_times, clock_limit=n_time, forest=True, record=True,
                     keep_paths=keep_paths, integrals=integrals)
    if run.status == K.STATUS_CAP:
        from .branching import ParticleCapExceeded
        raise ParticleCapExceeded(f"particle cap {params.particle_cap} reached during forest exploration")
    return ExplorationPath.from_run(run, p, x, clock_times)


def qv_integrand(domain: Domain, beta: float, centred_second_moment: float) -> Callable:
    """beta E[(A-1)^2] phi^2 + a|grad phi|^2 as a function of position."""
    pair = first_eigenpair(domain)

    def f(x):
        return beta * centred_second_moment * np.asarray(pair.phi(x)) ** 2 + np.asarray(pair.energy_density(x))

    return f


def quadratic_variation_slope(path: ExplorationPath, t_window: tuple[float, float],
                              integrand: Callable | None = None, grid: int = 20001) -> float:
    """(1/|window|) * integral over the window of the predictable quadratic variation integrand at V_s."""
    a, b = map(float, t_window)
    if not b > a:
        raise ValueError("empty window")
    if integrand is None:
        integrand = qv_integrand(path.domain, path.beta, path.offspring.centred_second_moment)
    s = np.linspace(a, b, grid)
    pts = path.position(s)
    vals = np.atleast_1d(integrand(pts if path.domain.dim > 1 else pts[:, 0])).astype(float)
    vals = np.broadcast_to(vals, s.shape)
    return float(np.trapezoid(vals, s) / (b - a))


def qv_slope_from_integrals(path: ExplorationPath) -> float:
    """Slope over [0, clock] from the kernel's running integrals of phi^2 and a|grad phi|^2."""
    if path.summary is None:
        raise ValueError("path carries no running integrals")
    s = path.summary
    c2 = path.offspring.centred_second_moment
    total = path.beta * c2 * s[K.S_INT_PHI2] + s[K.S_INT_ENERGY]
    return float(total / s[K.S_CLOCK])


def separation_height(path: ExplorationPath, i: int, j: int, hi: float, hj: float) -> tuple[float, int]:
    """Height at which the lineages of visits i, j (at heights hi, hj) separate, and the MRCA visit index.

    For distinct, non-nested vertices this is the death time of their MRCA;
    when one vertex is an ancestor of the other (or they coincide) it is the
    height of the earlier point, so D^H equals d* exactly.
    """
    li, lj = path.labels[i], path.labels[j]
    w = mrca(li, lj)
    iw = path._index_of(w)
    if i == j:
        return min(hi, hj), iw
    if w == li:
        return hi, iw
    if w == lj:
        return hj, iw
    return float(path.death[iw]), iw


def distance_matrices(path: ExplorationPath | MarkedTree, k: int, t: float, rng: np.random.Generator,
                      times: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(D^H, D^S, sample times) for k uniform exploration times on [0, L)."""
    if isinstance(path, MarkedTree):
        path = explore(path, exact=False)
    if k < 2:
        raise ValueError("need k >= 2")
    if not t > 0:
        raise ValueError("t must be positive")
    if not path.total_length > 0:
        raise ValueError("tree has zero total length")
    if path.n_trees != 1:
        raise ValueError("distance matrices are defined on a single tree")
    if times is None:
        times = rng.random(k) * path.total_length
    times = np.asarray(times, float)
    idx = path.visit_at(times)
    h = path.height(times)
    sb = path.sbold[idx]
    dh = np.zeros((k, k))
    ds = np.zeros((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            split, iw = separation_height(path, idx[a], idx[b], h[a], h[b])
            dh[a, b] = dh[b, a] = (h[a] + h[b] - 2.0 * split) / t
            ds[a, b] = ds[b, a] = (sb[a] + sb[b] - 2.0 * path.sbold[iw]) / t
    return dh, ds, times


def d_star_grid(path: ExplorationPath, r: float, w: float, cell: float, centred: bool = False) -> float:
    """d*(r, w) with the infimum of H taken by brute force over a grid of mesh `cell`.

    H rises at unit slope between downward jumps, so the true infimum lies within one mesh
    below the grid minimum. `centred` shifts the minimum down by half a mesh, which bounds
    the error of d* by one mesh instead of two.
    """
    lo, hi = min(r, w), max(r, w)
    n = max(int(math.ceil((hi - lo) / cell)), 1)
    grid = np.linspace(lo, hi, n + 1)
    low = path.height(grid).min()
    if centred:
        low -= (hi - lo) / n / 2.0
    return float(path.height(r) + path.height(w) - 2.0 * low)


@dataclass(frozen=True)
class SPathMeans:
    times: np.ndarray
    means: np.ndarray
    ses: np.ndarray
    target: float
    n: int

    def covers(self, z: float = 3.0) -> np.ndarray:
        return np.abs(self.means - self.target) <= z * self.ses


def single_tree_s_values(x, params: SimulationParams, ts: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """S_t at exploration times ts for one lazily explored tree (0 once the tree is exhausted)."""
    from dataclasses import replace
    ts = np.asarray(ts, float)
    p = replace(params, horizon=math.inf)
    run = run_kernel(x, p, rng, clock_times=ts, clock_limit=float(ts.max()))
    obs = run.clock_obs
    taken = obs[:, K.C_TAKEN] > 0
    return np.where(taken, obs[:, K.C_PHI] + obs[:, K.C_SBOLD], 0.0)


def s_path_mean_test(x, params: SimulationParams, ts: Sequence[float], n_rep: int, seed: int,
                     threads: int = 1) -> SPathMeans:
    """MC means of the single-tree S_t at exploration times ts; the target is phi(x)."""
    ts = np.asarray(ts, float)
    vals = np.array(map_replicas(lambda rng, _i: single_tree_s_values(x, params, ts, rng), n_rep, seed,
                                 "s-path", threads))
    target = float(np.squeeze(first_eigenpair(params.domain).phi(x)))
    return SPathMeans(ts, vals.mean(0), vals.std(0, ddof=1) / math.sqrt(n_rep), target, n_rep)


@dataclass(frozen=True)
class ForestEndpoint:
    """Values of the forest processes at the final exploration time."""

    s_bar: float
    s_bold: float
    trees: int
    phi_v: float
    clock_obs: np.ndarray
    int_phi: float
    int_phi2: float
    int_energy: float


def forest_endpoint(x, params: SimulationParams, n_time: float, rng: np.random.Generator,
                    clock_times: Sequence[float] | None = None, integrals: bool = True) -> ForestEndpoint:
    """Fast forest exploration up to n_time without a node table."""
    from dataclasses import replace
    p = replace(params, horizon=math.inf)
    ct = np.asarray(sorted(clock_times) if clock_times is not None else [n_time], float)
    run = run_kernel(x, p, rng, clock_times=ct, clock_limit=n_time, forest=True, integrals=integrals)
    if run.status == K.STATUS_CAP:
        from .branching import ParticleCapExceeded
        raise ParticleCapExceeded("particle cap reached during forest exploration")
    phx = float(np.squeeze(first_eigenpair(params.domain).phi(x)))
    last = run.clock_obs[-1]
    s = run.summary
    return ForestEndpoint(
        s_bar=float(last[K.C_PHI] + last[K.C_SBOLD] - last[K.C_TREES] * phx),
        s_bold=float(last[K.C_SBOLD]), trees=int(last[K.C_TREES]), phi_v=float(last[K.C_PHI]),
        clock_obs=run.clock_obs, int_phi=float(s[K.S_INT_PHI]), int_phi2=float(s[K.S_INT_PHI2]),
        int_energy=float(s[K.S_INT_ENERGY]),
    )
