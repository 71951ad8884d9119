import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from branchcrt import _kernels as K
from branchcrt.branching import (MarkedTree, OffspringDistribution, ParticleCapExceeded, SimulationParams,
                                 TreeValidationError, conditional_limit_check, event_population_at_least,
                                 martingale_M, population_sample, rn_weight, sample_offspring, simulate_spine_tree,
                                 simulate_tree, size_biased, tree_stream)
from branchcrt.spectral import Domain, expected_count, model_constants, second_moment_phi
from branchcrt.streams import map_replicas
from conftest import rng

PI = math.pi
BINARY = OffspringDistribution.constant(2)


def critical(horizon=math.inf, **kw):
    return SimulationParams(Domain.interval(), BINARY, 0.5, horizon=horizon, **kw)


@pytest.fixture(scope="module")
def consts():
    return model_constants(Domain.interval(), BINARY)


# offspring laws

def test_size_biased_examples():
    assert size_biased(BINARY).pmf == {2: 1.0}
    assert size_biased(OffspringDistribution({0: 0.25, 2: 0.75})).pmf == {2: 1.0}
    sb = size_biased(OffspringDistribution({1: 0.5, 3: 0.5}))
    assert sb.pmf == pytest.approx({1: 0.25, 3: 0.75})


def test_offspring_moments_and_generating_function():
    d = OffspringDistribution({0: 0.25, 2: 0.75})
    assert d.m == 1.5 and d.ea2 == 3.0
    assert d.G(0.5) == pytest.approx(0.25 + 0.75 * 0.25)
    assert d.G(1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("pmf", [{2: 0.5}, {1: 1.0}, {0: 0.5, 2: 0.5}, {-1: 0.5, 3: 0.5}])
def test_offspring_guards(pmf):
    with pytest.raises(ValueError):
        OffspringDistribution(pmf)


def test_offspring_sampling_frequencies():
    d = OffspringDistribution({0: 0.2, 1: 0.1, 3: 0.7})
    draws = d.sample(rng(1), 200000)
    counts = np.array([(draws == k).sum() for k in (0, 1, 3)])
    assert stats.chisquare(counts, 200000 * np.array([0.2, 0.1, 0.7])).pvalue > 0.01
    assert sample_offspring(BINARY, rng(2)) == 2
    sb = size_biased(d).sample(rng(3), 100000)
    assert not np.any(sb == 0)


def test_params_guards():
    with pytest.raises(ValueError):
        SimulationParams(Domain.interval(), BINARY, -1.0)
    with pytest.raises(ValueError):
        critical(horizon=0.0)
    with pytest.raises(ValueError):
        critical(particle_cap=0)


# simulate_tree

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**63), st.floats(0.5, 8.0), st.sampled_from([{2: 1.0}, {0: 0.3, 3: 0.7}, {1: 0.5, 3: 0.5}]))
def test_tree_axioms(seed, horizon, pmf):
    off = OffspringDistribution(pmf)
    beta = 0.5 / (off.m - 1)
    p = SimulationParams(Domain.interval(), off, beta, horizon=horizon, step=replace(critical().step, h=1e-2))
    tree = simulate_tree(PI / 2, p, rng(seed))
    tree.validate()
    assert tree.labels == sorted(tree.labels)
    assert np.allclose(tree.lifetime, tree.death - tree.birth)
    for i in np.flatnonzero(tree.terminal == K.KILLED):
        assert tree.path(i)[-1, 0] == tree.death[i]


def test_box_tree_axioms():
    p = SimulationParams(Domain.box([(0, PI), (0, PI)]), BINARY, 1.0, horizon=3.0)
    tree = simulate_tree([1.0, 2.0], p, rng(4))
    tree.validate()
    assert tree.birth_pos.shape[1] == 2


def test_determinism():
    p = critical(horizon=6.0)
    a = simulate_tree(PI / 2, p, tree_stream(11, 3))
    b = simulate_tree(PI / 2, p, tree_stream(11, 3))
    assert list(a.to_jsonl_lines()) == list(b.to_jsonl_lines())
    c = simulate_tree(PI / 2, p, tree_stream(11, 4))
    assert list(a.to_jsonl_lines()) != list(c.to_jsonl_lines())


def test_no_branching_gives_single_killed_root():
    tree = simulate_tree(PI / 2, SimulationParams(Domain.interval(), BINARY, 0.0), rng(5))
    assert len(tree) == 1
    assert tree.terminal[0] == K.KILLED
    assert tree.lifetime[0] == tree.death[0] > 0
    assert not Domain.interval().contains(tree.death_pos[0])[0]


def test_interior_start_required():
    with pytest.raises(ValueError):
        simulate_tree(0.0, critical(5.0), rng(6))


def test_particle_cap():
    p = SimulationParams(Domain.interval(), BINARY, 5.0, horizon=20.0, particle_cap=500)
    # supercritical trees can still die out early; this seed survives
    tree = simulate_tree(PI / 2, p, rng(0))
    assert tree.truncated and len(tree) <= 500
    with pytest.raises(ParticleCapExceeded):
        simulate_tree(PI / 2, p, rng(0), strict=True)


def test_jsonl_round_trip(tmp_path):
    tree = simulate_tree(PI / 2, critical(5.0, path_every=3), rng(8))
    f = tmp_path / "tree.jsonl"
    tree.dump_jsonl(f, {"seed": 8})
    back = MarkedTree.load_jsonl(f)
    assert list(back.to_jsonl_lines({"seed": 8})) == list(tree.to_jsonl_lines({"seed": 8}))
    assert back.labels == tree.labels
    assert np.array_equal(back.death, tree.death)


def test_jsonl_loader_rejects_broken_trees(tmp_path):
    tree = simulate_tree(PI / 2, critical(5.0), rng(9))
    lines = list(tree.to_jsonl_lines())
    with pytest.raises(TreeValidationError):
        MarkedTree.from_jsonl_lines(lines[1:])
    seed = 100
    while len(lines) < 3:
        seed += 1
        lines = list(simulate_tree(PI / 2, critical(5.0), rng(seed)).to_jsonl_lines())
    # drop the root: every other label loses its prefix
    with pytest.raises(TreeValidationError):
        MarkedTree.from_jsonl_lines([lines[0]] + lines[2:])


def test_half_open_lifetimes():
    tree = simulate_tree(PI / 2, critical(5.0), rng(10))
    kids = np.flatnonzero(tree.parent >= 0)
    if len(kids):
        i = kids[0]
        t = tree.birth[i]
        alive = tree.alive_at(t)
        assert i in alive and tree.parent[i] not in alive
    censored = np.flatnonzero(tree.terminal == K.CENSORED)
    assert set(censored) <= set(tree.alive_at(5.0))


def test_restrict():
    tree = simulate_tree(PI / 2, critical(6.0), rng(12))
    r = tree.restrict(2.0)
    r.validate()
    assert r.horizon == 2.0 and np.all(r.death <= 2.0)
    assert len(r.alive_at(2.0)) == len(tree.alive_at(2.0))


# martingale and moments

def test_martingale_edge_cases(consts):
    tree = simulate_tree(PI / 2, critical(4.0), rng(13))
    assert martingale_M(tree, 0.0, consts) == pytest.approx(0.797885, abs=1e-6)
    with pytest.raises(ValueError):
        martingale_M(tree, 5.0, consts)
    dead = simulate_tree(PI / 2, SimulationParams(Domain.interval(), BINARY, 0.0, horizon=50.0), rng(14))
    assert martingale_M(dead, 50.0, consts) == 0.0


def test_martingale_mean_smoke(consts):
    n = 20000
    s = population_sample(PI / 2, critical(2.0), [1.0, 2.0], n, 15)
    m = s.phi_sums  # critical rate: growth factor is 1
    for j in range(2):
        se = m[:, j].std(ddof=1) / math.sqrt(n)
        assert abs(m[:, j].mean() - 0.797885) < 3 * se


@pytest.mark.parametrize("beta", [0.3, 0.5, 0.7])
def test_many_to_one(beta):
    n = 20000
    d = Domain.interval()
    s = population_sample(1.0, SimulationParams(d, BINARY, beta, horizon=2.0), [2.0], n, 16)
    c = s.counts[:, 0]
    assert abs(c.mean() - expected_count(d, 2, beta, 2.0, 1.0)) < 3 * c.std(ddof=1) / math.sqrt(n)


def test_many_to_two_smoke():
    n = 20000
    s = population_sample(PI / 2, critical(2.0), [1.0, 2.0], n, 17)
    for j, t in enumerate((1.0, 2.0)):
        sq = s.phi_sums[:, j] ** 2
        target = second_moment_phi(Domain.interval(), 2, 4, 0.5, t, PI / 2)
        assert abs(sq.mean() - target) < 3 * sq.std(ddof=1) / math.sqrt(n)


def test_subcritical_survival_decreases():
    s = population_sample(PI / 2, SimulationParams(Domain.interval(), BINARY, 0.25, horizon=10.0), [2.0, 10.0],
                          5000, 18)
    alive = (s.counts > 0).mean(axis=0)
    assert alive[1] < alive[0]


def test_rn_weight_normalisation(consts):
    n = 20000
    s = population_sample(PI / 2, critical(2.0), [2.0], n, 19)
    w = s.phi_sums[:, 0] / 0.7978845608028654
    assert abs(w.mean() - 1) < 3 * w.std(ddof=1) / math.sqrt(n)
    assert np.all(w[s.counts[:, 0] == 0] == 0)
    tree = simulate_tree(PI / 2, critical(2.0), rng(20))
    assert rn_weight(tree, 2.0, PI / 2, consts) == pytest.approx(martingale_M(tree, 2.0, consts) / 0.7978845608028654)


def test_rn_weight_links_p_and_q():
    n, t = 20000, 2.0
    s = population_sample(PI / 2, critical(t), [t], n, 21)
    lhs = s.phi_sums[:, 0] / 0.7978845608028654 * np.minimum(s.counts[:, 0], 100)

    def q_one(g, _i):
        tree = simulate_spine_tree(PI / 2, critical(t), g, keep_paths=False)
        return min(len(tree.alive_at(t)), 100)
    rhs = np.array(map_replicas(q_one, n // 4, 22, "q"), float)
    se = math.hypot(lhs.std(ddof=1) / math.sqrt(n), rhs.std(ddof=1) / math.sqrt(len(rhs)))
    assert abs(lhs.mean() - rhs.mean()) < 3 * se


# spine measure

def test_spine_requires_horizon():
    with pytest.raises(ValueError):
        simulate_spine_tree(PI / 2, critical(), rng(23))


def test_spine_structure_and_clock():
    t, n = 5.0, 2000
    counts, ends = [], []
    for i in range(n):
        tree = simulate_spine_tree(PI / 2, critical(t), tree_stream(24, i), keep_paths=False)
        if i < 50:
            tree.validate()
        spine = np.flatnonzero(tree.spine_flag)
        assert np.all(tree.terminal[spine] != K.KILLED)
        assert np.all(tree.offspring_count[spine[tree.terminal[spine] == K.BRANCH]] >= 1)
        assert len(tree.alive_at(t)) >= 1
        counts.append(int(np.sum(tree.terminal[spine] == K.BRANCH)))
    counts = np.array(counts)
    # spine branch events form a Poisson process of rate m beta = 1
    assert abs(counts.mean() - 5.0) < 3 * math.sqrt(5.0 / n)


def test_spine_position_equilibrium():
    t, n = 10.0, 1500

    def one(g, _i):
        tree = simulate_spine_tree(PI / 2, critical(t), g, keep_paths=True)
        j = [i for i in tree.alive_at(t) if tree.spine_flag[i]]
        assert len(j) == 1
        return float(tree.position_at(j[0], t)[0])
    pos = np.array(map_replicas(one, n, 25, "spine-eq"))
    assert stats.kstest(pos, lambda y: (y - np.sin(2 * y) / 2) / PI).pvalue > 0.01


# conditioning on survival

def test_conditional_limit_check():
    res = conditional_limit_check(PI / 2, critical(), 1.0, 20.0, event_population_at_least(2), 4000, 26)
    assert res.survivors >= 100
    assert res.overlap


def test_conditional_limit_trivial_events():
    full = conditional_limit_check(PI / 2, critical(), 1.0, 5.0, lambda tree, T: True, 400, 27)
    null = conditional_limit_check(PI / 2, critical(), 1.0, 5.0, lambda tree, T: False, 400, 27)
    assert full.conditioned.mean == 1.0 and full.spine.mean == 1.0
    assert null.conditioned.mean == 0.0 and null.spine.mean == 0.0
    with pytest.raises(ValueError):
        conditional_limit_check(PI / 2, critical(), 5.0, 5.0, lambda tree, T: True, 10, 27)
