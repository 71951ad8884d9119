"""Numba kernels: killed and conditioned Euler steps and depth-first growth of marked trees.

Trees are grown on a stack, so individuals are visited in depth-first
(lexicographic Ulam-Harris) order and the running sum of phi over the stack is
the younger-sibling sum of the individual being visited. The same loop serves
real-time censored trees, lazily explored forests and spine trees.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

BRANCH = 0
KILLED = 1
CENSORED = 2

STATUS_OK = 0
STATUS_CAP = 1
STATUS_SUBSTEP = 2

# node table columns
N_PARENT, N_RANK, N_TREE, N_BIRTH, N_DEATH, N_KIDS, N_TERMINAL, N_SPINE, N_PATH0, N_PATHLEN, N_CLOCK = range(11)
NODE_COLS = 11
# clock observation columns (positions follow)
C_PHI, C_SBOLD, C_HEIGHT, C_TREES, C_NODE, C_INT_PHI, C_INT_PHI2, C_INT_ENERGY, C_TAKEN = range(9)
CLOCK_COLS = 9
# per-run summary
(S_STATUS, S_NODES, S_TREES, S_CLOCK, S_EXTINCT, S_MAXDEATH, S_PATHS, S_SNAPS,
 S_INT_PHI, S_INT_PHI2, S_INT_ENERGY, S_CENSORED) = range(12)
SUMMARY_COLS = 12

_BRIDGE_CUTOFF = 40.0


@njit(cache=True, inline="always")
def phi_at(pos, lo, ell, norm):
    v = norm
    for i in range(pos.shape[0]):
        v *= math.sin(math.pi * (pos[i] - lo[i]) / ell[i])
    return v if v > 0.0 else 0.0


@njit(cache=True)
def energy_at(pos, lo, ell, acoef, norm):
    """sum_i a_i (d_i phi)^2 for the product-of-sines eigenfunction."""
    d = pos.shape[0]
    total = 0.0
    for i in range(d):
        g = norm * (math.pi / ell[i]) * math.cos(math.pi * (pos[i] - lo[i]) / ell[i])
        for j in range(d):
            if j != i:
                g *= math.sin(math.pi * (pos[j] - lo[j]) / ell[j])
        total += acoef[i] * g * g
    return total


@njit(cache=True)
def grow(rng, x0, lo, hi, acoef, beta, off_vals, off_cdf, sb_cdf, h, bridge,
         horizon, clock_limit, forest, spine, obs_t, obs_c, record, keep_paths, snap,
         integrals, path_every, node_cap, substep_cap, delta):
    d = x0.shape[0]
    ell = hi - lo
    norm = 1.0
    for i in range(d):
        norm *= math.sqrt(2.0 / ell[i])
    sd = np.sqrt(acoef)
    m = 0.0
    for k in range(off_vals.shape[0]):
        pk = off_cdf[k] - (off_cdf[k - 1] if k > 0 else 0.0)
        m += pk * off_vals[k]

    n_obs_t = obs_t.shape[0]
    n_obs_c = obs_c.shape[0]
    real_obs = np.zeros((n_obs_t, 3))
    clock_obs = np.full((n_obs_c, CLOCK_COLS + d), np.nan)
    clock_obs[:, C_TAKEN] = 0.0
    summary = np.zeros(SUMMARY_COLS)

    node_capacity = 64 if record else 1
    nodes = np.zeros((node_capacity, NODE_COLS))
    birth_pos = np.zeros((node_capacity, d))
    death_pos = np.zeros((node_capacity, d))
    path_capacity = 256 if keep_paths else 1
    paths = np.zeros((path_capacity, 1 + d))
    n_paths = 0
    snap_capacity = 64 if snap else 1
    snaps = np.zeros((snap_capacity, 2 + d))
    n_snaps = 0

    st_cap = 64
    st_birth = np.zeros(st_cap)
    st_pos = np.zeros((st_cap, d))
    st_parent = np.zeros(st_cap, np.int64)
    st_rank = np.zeros(st_cap, np.int64)
    st_spine = np.zeros(st_cap, np.bool_)
    st_phi = np.zeros(st_cap)
    top = 0

    st_birth[0] = 0.0
    st_pos[0, :] = x0
    st_parent[0] = -1
    st_rank[0] = 0
    st_spine[0] = spine
    st_phi[0] = phi_at(x0, lo, ell, norm)
    top = 1

    status = STATUS_OK
    n_nodes = 0
    n_trees = 1
    clock = 0.0
    jc = 0
    max_death = 0.0
    censored_any = False
    int_phi = 0.0
    int_phi2 = 0.0
    int_energy = 0.0
    pos = np.zeros(d)
    new = np.zeros(d)
    stop = False

    while not stop:
        if top == 0:
            if forest and clock < clock_limit:
                st_birth[0] = 0.0
                st_pos[0, :] = x0
                st_parent[0] = -1
                st_rank[0] = 0
                st_spine[0] = spine
                st_phi[0] = phi_at(x0, lo, ell, norm)
                top = 1
                n_trees += 1
            else:
                break
        if n_nodes >= node_cap:
            status = STATUS_CAP
            break
        top -= 1
        birth = st_birth[top]
        for i in range(d):
            pos[i] = st_pos[top, i]
        parent = st_parent[top]
        rank = st_rank[top]
        on_spine = st_spine[top]
        idx = n_nodes
        n_nodes += 1

        rate = beta * m if on_spine else beta
        life = rng.standard_exponential() / rate if rate > 0.0 else np.inf
        terminal = BRANCH
        if birth + life >= horizon:
            life = horizon - birth
            terminal = CENSORED
        if clock + life >= clock_limit:
            life = clock_limit - clock
            terminal = CENSORED
            stop = True
        horizon_inclusive = terminal == CENSORED and not stop

        if record:
            if idx >= nodes.shape[0]:
                grown = np.zeros((2 * nodes.shape[0], NODE_COLS))
                grown[:idx] = nodes[:idx]
                nodes = grown
                gb = np.zeros((2 * birth_pos.shape[0], d))
                gb[:idx] = birth_pos[:idx]
                birth_pos = gb
                gd = np.zeros((2 * death_pos.shape[0], d))
                gd[:idx] = death_pos[:idx]
                death_pos = gd
            nodes[idx, N_PARENT] = parent
            nodes[idx, N_RANK] = rank
            nodes[idx, N_TREE] = n_trees - 1
            nodes[idx, N_BIRTH] = birth
            nodes[idx, N_SPINE] = 1.0 if on_spine else 0.0
            nodes[idx, N_PATH0] = n_paths
            nodes[idx, N_CLOCK] = clock
            birth_pos[idx, :] = pos

        # exploration observations falling at (or numerically just before) this start
        while jc < n_obs_c and obs_c[jc] - clock <= 0.0:
            ph = phi_at(pos, lo, ell, norm)
            sb = 0.0
            for q in range(top):
                sb += st_phi[q]
            row = clock_obs[jc]
            row[C_PHI] = ph
            row[C_SBOLD] = sb
            row[C_HEIGHT] = birth
            row[C_TREES] = n_trees
            row[C_NODE] = idx
            row[C_INT_PHI] = int_phi
            row[C_INT_PHI2] = int_phi2
            row[C_INT_ENERGY] = int_energy
            row[C_TAKEN] = 1.0
            for i in range(d):
                row[CLOCK_COLS + i] = pos[i]
            jc += 1

        jt = np.searchsorted(obs_t, birth)
        age = 0.0
        steps = 0
        ph_prev = phi_at(pos, lo, ell, norm) if integrals else 0.0
        en_prev = energy_at(pos, lo, ell, acoef, norm) if integrals else 0.0
        if keep_paths:
            if n_paths >= paths.shape[0]:
                gp = np.zeros((2 * paths.shape[0], 1 + d))
                gp[:n_paths] = paths[:n_paths]
                paths = gp
            paths[n_paths, 0] = birth
            paths[n_paths, 1:] = pos
            n_paths += 1

        absorbed = False
        while True:
            # real-time observations at the current instant
            while jt < n_obs_t and obs_t[jt] - birth <= age:
                if obs_t[jt] - birth == age and (age < life or horizon_inclusive):
                    real_obs[jt, 0] += 1.0
                    real_obs[jt, 1] += phi_at(pos, lo, ell, norm)
                    if snap:
                        if n_snaps >= snaps.shape[0]:
                            gs = np.zeros((2 * snaps.shape[0], 2 + d))
                            gs[:n_snaps] = snaps[:n_snaps]
                            snaps = gs
                        snaps[n_snaps, 0] = jt
                        snaps[n_snaps, 1] = idx
                        snaps[n_snaps, 2:] = pos
                        n_snaps += 1
                jt += 1
            while jc < n_obs_c and obs_c[jc] - clock <= age:
                if obs_c[jc] - clock < age:
                    jc += 1
                    continue
                ph = phi_at(pos, lo, ell, norm)
                sb = 0.0
                for q in range(top):
                    sb += st_phi[q]
                row = clock_obs[jc]
                row[C_PHI] = ph
                row[C_SBOLD] = sb
                row[C_HEIGHT] = birth + age
                row[C_TREES] = n_trees
                row[C_NODE] = idx
                row[C_INT_PHI] = int_phi
                row[C_INT_PHI2] = int_phi2
                row[C_INT_ENERGY] = int_energy
                row[C_TAKEN] = 1.0
                for i in range(d):
                    row[CLOCK_COLS + i] = pos[i]
                jc += 1
            if age >= life:
                break

            target = life
            if jt < n_obs_t and obs_t[jt] - birth < target:
                target = obs_t[jt] - birth
            if jc < n_obs_c and obs_c[jc] - clock < target:
                target = obs_c[jc] - clock
            dt = target - age
            full = True
            if dt > h:
                dt = h
                full = False

            if on_spine:
                # conditioned step with drift a grad(phi)/phi, halved near the boundary
                halvings = 0
                while True:
                    ok = True
                    for i in range(d):
                        u = math.pi * (pos[i] - lo[i]) / ell[i]
                        drift = acoef[i] * (math.pi / ell[i]) * math.cos(u) / math.sin(u)
                        dist = min(pos[i] - lo[i], hi[i] - pos[i])
                        if abs(drift) * dt > delta * dist:
                            ok = False
                            break
                    if ok:
                        break
                    dt *= 0.5
                    full = False
                    halvings += 1
                    if halvings > substep_cap:
                        status = STATUS_SUBSTEP
                        break
                if status == STATUS_SUBSTEP:
                    stop = True
                    break
                for i in range(d):
                    u = math.pi * (pos[i] - lo[i]) / ell[i]
                    drift = acoef[i] * (math.pi / ell[i]) * math.cos(u) / math.sin(u)
                    y = pos[i] + drift * dt + sd[i] * math.sqrt(dt) * rng.standard_normal()
                    if y <= lo[i]:
                        y = 2.0 * lo[i] - y
                    if y >= hi[i]:
                        y = 2.0 * hi[i] - y
                    if y <= lo[i] or y >= hi[i]:
                        y = 0.5 * (pos[i] + (lo[i] if y <= lo[i] else hi[i]))
                    new[i] = y
                age_new = target if full else age + dt
            else:
                for i in range(d):
                    new[i] = pos[i] + sd[i] * math.sqrt(dt) * rng.standard_normal()
                age_new = target if full else age + dt
                frac = 2.0
                axis = -1
                exit_face = 0.0
                for i in range(d):
                    if new[i] <= lo[i]:
                        f = (pos[i] - lo[i]) / (pos[i] - new[i])
                        if f < frac:
                            frac = f
                            axis = i
                            exit_face = lo[i]
                    elif new[i] >= hi[i]:
                        f = (hi[i] - pos[i]) / (new[i] - pos[i])
                        if f < frac:
                            frac = f
                            axis = i
                            exit_face = hi[i]
                if axis < 0 and bridge:
                    for i in range(d):
                        for face in range(2):
                            if face == 0:
                                din = pos[i] - lo[i]
                                dout = new[i] - lo[i]
                            else:
                                din = hi[i] - pos[i]
                                dout = hi[i] - new[i]
                            expo = 2.0 * din * dout / (acoef[i] * dt)
                            if expo < _BRIDGE_CUTOFF:
                                if rng.random() < math.exp(-expo):
                                    if axis < 0:
                                        axis = i + d * face
                                        frac = 0.5
                    if axis >= 0:
                        face = axis // d
                        axis = axis % d
                        for i in range(d):
                            new[i] = 0.5 * (pos[i] + new[i])
                        new[axis] = lo[axis] if face == 0 else hi[axis]
                elif axis >= 0:
                    for i in range(d):
                        new[i] = pos[i] + frac * (new[i] - pos[i])
                    new[axis] = exit_face
                if axis >= 0:
                    absorbed = True
                    age_new = age + frac * dt
                    if age_new > life:
                        age_new = life

            if integrals:
                ph_new = phi_at(new, lo, ell, norm)
                en_new = energy_at(new, lo, ell, acoef, norm)
                step = age_new - age
                int_phi += 0.5 * step * (ph_prev + ph_new)
                int_phi2 += 0.5 * step * (ph_prev * ph_prev + ph_new * ph_new)
                int_energy += 0.5 * step * (en_prev + en_new)
                ph_prev = ph_new
                en_prev = en_new
            for i in range(d):
                pos[i] = new[i]
            age = age_new
            steps += 1
            if absorbed:
                life = age
                terminal = KILLED
                if stop:
                    # absorption before the exploration clock limit: exploration continues
                    stop = False
                break
            if keep_paths and steps % path_every == 0 and age < life:
                if n_paths >= paths.shape[0]:
                    gp = np.zeros((2 * paths.shape[0], 1 + d))
                    gp[:n_paths] = paths[:n_paths]
                    paths = gp
                paths[n_paths, 0] = birth + age
                paths[n_paths, 1:] = pos
                n_paths += 1

        if status == STATUS_SUBSTEP:
            break
        death = birth + life
        clock += life
        if death > max_death:
            max_death = death
        if terminal == CENSORED:
            censored_any = True

        kids = 0
        spine_kid = -1
        if terminal == BRANCH:
            u = rng.random()
            cdf = sb_cdf if on_spine else off_cdf
            k = 0
            while k < off_vals.shape[0] - 1 and u > cdf[k]:
                k += 1
            kids = off_vals[k]
            if on_spine and kids > 0:
                spine_kid = 1 + int(rng.random() * kids)
                if spine_kid > kids:
                    spine_kid = kids
        if record:
            nodes[idx, N_DEATH] = death
            nodes[idx, N_KIDS] = kids
            nodes[idx, N_TERMINAL] = terminal
            death_pos[idx, :] = pos
            if keep_paths:
                if n_paths >= paths.shape[0]:
                    gp = np.zeros((2 * paths.shape[0], 1 + d))
                    gp[:n_paths] = paths[:n_paths]
                    paths = gp
                paths[n_paths, 0] = death
                paths[n_paths, 1:] = pos
                n_paths += 1
            nodes[idx, N_PATHLEN] = n_paths - nodes[idx, N_PATH0]
        if kids > 0:
            if top + kids > st_cap:
                new_cap = 2 * (top + kids)
                gb1 = np.zeros(new_cap)
                gb1[:top] = st_birth[:top]
                st_birth = gb1
                gp1 = np.zeros((new_cap, d))
                gp1[:top] = st_pos[:top]
                st_pos = gp1
                gi1 = np.zeros(new_cap, np.int64)
                gi1[:top] = st_parent[:top]
                st_parent = gi1
                gr1 = np.zeros(new_cap, np.int64)
                gr1[:top] = st_rank[:top]
                st_rank = gr1
                gs1 = np.zeros(new_cap, np.bool_)
                gs1[:top] = st_spine[:top]
                st_spine = gs1
                gf1 = np.zeros(new_cap)
                gf1[:top] = st_phi[:top]
                st_phi = gf1
                st_cap = new_cap
            ph = phi_at(pos, lo, ell, norm)
            for r in range(kids, 0, -1):
                st_birth[top] = death
                st_pos[top, :] = pos
                st_parent[top] = idx
                st_rank[top] = r
                st_spine[top] = r == spine_kid
                st_phi[top] = ph
                top += 1

    summary[S_STATUS] = status
    summary[S_NODES] = n_nodes
    summary[S_TREES] = n_trees
    summary[S_CLOCK] = clock
    summary[S_EXTINCT] = 1.0 if (top == 0 and not censored_any and status == STATUS_OK) else 0.0
    summary[S_MAXDEATH] = max_death
    summary[S_PATHS] = n_paths
    summary[S_SNAPS] = n_snaps
    summary[S_INT_PHI] = int_phi
    summary[S_INT_PHI2] = int_phi2
    summary[S_INT_ENERGY] = int_energy
    summary[S_CENSORED] = 1.0 if censored_any else 0.0
    n_rec = n_nodes if record else 0
    return (summary, real_obs, clock_obs, nodes[:n_rec], birth_pos[:n_rec], death_pos[:n_rec],
            paths[:n_paths], snaps[:n_snaps])
