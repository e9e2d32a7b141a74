"""Compiled core of the contaminated-cell tree simulation.

Layout of one generation
------------------------
Cells are stored in parent-major order (daughter 0 before daughter 1). Each
cell owns a contiguous run of *entries* ``(tag, cls, cnt)`` in CSR form:
``estart[c]:estart[c+1]``. ``cnt`` parasites of one entry share a tag (the
generation-``tag_from`` parasite they descend from, or 0 before tagging,
-1 once a saturated cell lost track) and a class:

* FREE: an ordinary parasite.
* DOOMED: a parasite whose line must die before the conditioning horizon.
* SPINE: the single parasite per replicate whose line must survive.

Only the conditioned sampler uses DOOMED and SPINE. A parasite's children
are drawn from a law that depends on its class and generation (row
``law_row[cls, g]`` of the alias tables).
"""

import math

import numpy as np
from numba import njit, prange

from ._rng import binomial, seed_stream, stochastic_round, uniform

FREE, DOOMED, SPINE = 0, 1, 2
INT64_MAX = np.iinfo(np.int64).max


@njit(cache=True)
def _draw_alias(s, aprob, aidx, row):
    n = aprob.shape[1]
    u = uniform(s) * n
    i = int(u)
    if i >= n:
        i = n - 1
    if u - i < aprob[row, i]:
        return i
    return aidx[row, i]


@njit(cache=True)
def _allocate(s, cnt, row, k0s, k1s, lawp, aprob, aidx, last_pos, crossover):
    """Children in each daughter of ``cnt`` parasites drawn from law ``row``."""
    z0 = np.int64(0)
    z1 = np.int64(0)
    if cnt <= crossover:
        for _ in range(cnt):
            j = _draw_alias(s, aprob, aidx, row)
            z0 += k0s[j]
            z1 += k1s[j]
        return z0, z1
    # multinomial over the support by successive conditional binomials
    rem = cnt
    remp = 1.0
    last = last_pos[row]
    for j in range(last + 1):
        pj = lawp[row, j]
        if pj <= 0.0:
            continue
        if j == last or pj >= remp:
            nj = rem
        else:
            nj = binomial(s, rem, pj / remp)
        rem -= nj
        remp -= pj
        z0 += nj * k0s[j]
        z1 += nj * k1s[j]
        if rem == 0:
            break
    return z0, z1


@njit(cache=True)
def _spine_children(s, g, k0s, k1s, spine_cdf, spine_q):
    """Offspring of the spine parasite and the position of its surviving child.

    Children are ordered daughter-0 first. Returns (k0, k1, J) with J the
    1-based index of the first child whose line survives.
    """
    u = uniform(s) * spine_cdf[g, -1]
    j = np.searchsorted(spine_cdf[g], u, side="right")
    if j >= spine_cdf.shape[1]:
        j = spine_cdf.shape[1] - 1
    k0 = k0s[j]
    k1 = k1s[j]
    k = k0 + k1
    q = spine_q[g]
    # P(J = i) proportional to q^(i-1) (1 - q), i = 1..k
    if q <= 0.0:
        return k0, k1, 1
    u = uniform(s) * -math.expm1(k * math.log(q))
    acc = 0.0
    qi = 1.0
    for i in range(1, k + 1):
        acc += qi * (1.0 - q)
        if u < acc:
            return k0, k1, i
        qi *= q
    return k0, k1, k


@njit(cache=True)
def _add(btag, bcls, bcnt, lo, hi, tag, cls, cnt):
    """Add ``cnt`` to the (tag, cls) entry of buffer run [lo, hi); returns new hi."""
    if cnt <= 0:
        return hi
    for e in range(lo, hi):
        if btag[e] == tag and bcls[e] == cls:
            bcnt[e] += cnt
            return hi
    btag[hi] = tag
    bcls[hi] = cls
    bcnt[hi] = cnt
    return hi + 1


@njit(cache=True)
def advance(s, g, cnt, sat, anc_a, anc_t, estart, etag, ecls, ecnt,
            k0s, k1s, lawp, aprob, aidx, last_pos, law_row,
            spine_cdf, spine_q, m0, m1, cap, crossover):
    """One generation of division. Returns the new cell/entry arrays and leaves."""
    C = cnt.shape[0]
    E = ecnt.shape[0]
    maxe = 0
    for c in range(C):
        if estart[c + 1] - estart[c] > maxe:
            maxe = estart[c + 1] - estart[c]
    ncnt = np.empty(2 * C, dtype=np.int64)
    nsat = np.empty(2 * C, dtype=np.bool_)
    nanc_a = np.empty(2 * C, dtype=np.int64)
    nanc_t = np.empty(2 * C, dtype=np.int64)
    nparent = np.empty(2 * C, dtype=np.int64)
    nestart = np.empty(2 * C + 1, dtype=np.int64)
    cap_e = 2 * E + 6 * C + 4
    netag = np.empty(cap_e, dtype=np.int64)
    necls = np.empty(cap_e, dtype=np.int8)
    necnt = np.empty(cap_e, dtype=np.int64)
    # daughter-1 entries are staged here while daughter 0 is written in place
    stag = np.empty(maxe + 4, dtype=np.int64)
    scls = np.empty(maxe + 4, dtype=np.int8)
    scnt = np.empty(maxe + 4, dtype=np.int64)
    nc = 0
    ne = 0
    leaves = 0
    nestart[0] = 0
    for c in range(C):
        if sat[c]:
            # mean-field propagation of a saturated cell
            made = 0
            for a in range(2):
                y = stochastic_round(s, cnt[c] * (m0 if a == 0 else m1))
                if y <= 0:
                    continue
                made += 1
                if y >= cap:
                    y = cap
                ncnt[nc] = y
                nsat[nc] = y >= cap
                nanc_a[nc] = anc_a[c]
                nanc_t[nc] = anc_t[c]
                nparent[nc] = c
                netag[ne] = -1
                necls[ne] = FREE
                necnt[ne] = y
                ne += 1
                nc += 1
                nestart[nc] = ne
            if made == 0:
                leaves += 1
            continue
        lo0 = ne
        hi0 = ne
        hi1 = 0
        for e in range(estart[c], estart[c + 1]):
            tag = etag[e]
            cls = ecls[e]
            x = ecnt[e]
            if cls == SPINE:
                k0, k1, J = _spine_children(s, g, k0s, k1s, spine_cdf, spine_q)
                d0_doom = min(J - 1, k0)
                d1_doom = J - 1 - d0_doom
                sp0 = 1 if J <= k0 else 0
                sp1 = 1 - sp0
                hi0 = _add(netag, necls, necnt, lo0, hi0, tag, DOOMED, d0_doom)
                hi0 = _add(netag, necls, necnt, lo0, hi0, tag, SPINE, sp0)
                hi0 = _add(netag, necls, necnt, lo0, hi0, tag, FREE, k0 - d0_doom - sp0)
                hi1 = _add(stag, scls, scnt, 0, hi1, tag, DOOMED, d1_doom)
                hi1 = _add(stag, scls, scnt, 0, hi1, tag, SPINE, sp1)
                hi1 = _add(stag, scls, scnt, 0, hi1, tag, FREE, k1 - d1_doom - sp1)
                # a parasite with x > 1 in the SPINE class never occurs
                continue
            row = law_row[cls, g]
            z0, z1 = _allocate(s, x, row, k0s, k1s, lawp, aprob, aidx, last_pos, crossover)
            hi0 = _add(netag, necls, necnt, lo0, hi0, tag, cls, z0)
            hi1 = _add(stag, scls, scnt, 0, hi1, tag, cls, z1)
        # finalize daughter 0
        tot0 = np.int64(0)
        for e in range(lo0, hi0):
            tot0 += necnt[e]
        made = 0
        if tot0 > 0:
            made += 1
            ncnt[nc] = tot0
            nsat[nc] = False
            nanc_a[nc] = anc_a[c]
            nanc_t[nc] = anc_t[c]
            nparent[nc] = c
            ne = hi0
            if tot0 >= cap:
                ncnt[nc] = cap
                nsat[nc] = True
                netag[lo0] = -1
                necls[lo0] = FREE
                necnt[lo0] = cap
                ne = lo0 + 1
            nc += 1
            nestart[nc] = ne
        # finalize daughter 1 from the staging buffer
        tot1 = np.int64(0)
        for e in range(hi1):
            tot1 += scnt[e]
        if tot1 > 0:
            made += 1
            ncnt[nc] = tot1
            nsat[nc] = False
            nanc_a[nc] = anc_a[c]
            nanc_t[nc] = anc_t[c]
            nparent[nc] = c
            if tot1 >= cap:
                ncnt[nc] = cap
                nsat[nc] = True
                netag[ne] = -1
                necls[ne] = FREE
                necnt[ne] = cap
                ne += 1
            else:
                for e in range(hi1):
                    netag[ne] = stag[e]
                    necls[ne] = scls[e]
                    necnt[ne] = scnt[e]
                    ne += 1
            nc += 1
            nestart[nc] = ne
        if made == 0:
            leaves += 1
    return (ncnt[:nc].copy(), nsat[:nc].copy(), nanc_a[:nc].copy(), nanc_t[:nc].copy(),
            nparent[:nc].copy(), nestart[:nc + 1].copy(), netag[:ne].copy(),
            necls[:ne].copy(), necnt[:ne].copy(), leaves)


@njit(cache=True)
def expand_tags(cnt, sat, estart, etag, ecls, ecnt):
    """Give every parasite of every unsaturated cell its own tag."""
    total = 0
    for c in range(cnt.shape[0]):
        if sat[c]:
            total += 1
        else:
            total += cnt[c]
    nestart = np.empty(cnt.shape[0] + 1, dtype=np.int64)
    netag = np.empty(total, dtype=np.int64)
    necls = np.empty(total, dtype=np.int8)
    necnt = np.empty(total, dtype=np.int64)
    ne = 0
    nextag = 0
    nestart[0] = 0
    for c in range(cnt.shape[0]):
        for e in range(estart[c], estart[c + 1]):
            if sat[c]:
                netag[ne] = -1
                necls[ne] = ecls[e]
                necnt[ne] = ecnt[e]
                ne += 1
                continue
            for _ in range(ecnt[e]):
                netag[ne] = nextag
                necls[ne] = ecls[e]
                necnt[ne] = 1
                nextag += 1
                ne += 1
        nestart[c + 1] = ne
    return nestart, netag[:ne].copy(), necls[:ne].copy(), necnt[:ne].copy()


@njit(cache=True)
def _record(g, cnt, sat, k_top, nc_out, zt_out, zsat_out, maxc_out, hist_out):
    C = cnt.shape[0]
    nc_out[g] = C
    z = np.int64(0)
    flag = False
    mx = np.int64(0)
    for c in range(C):
        x = cnt[c]
        if sat[c]:
            flag = True
        if z > INT64_MAX - x:
            z = INT64_MAX
            flag = True
        else:
            z += x
        if x > mx:
            mx = x
        if x > k_top:
            hist_out[g, k_top] += 1
        else:
            hist_out[g, x - 1] += 1
    zt_out[g] = z
    zsat_out[g] = flag
    maxc_out[g] = mx


@njit(cache=True)
def _distinct_tags(etag, lo, hi):
    n = 0
    for e in range(lo, hi):
        seen = False
        for f in range(lo, e):
            if etag[f] == etag[e]:
                seen = True
                break
        if not seen:
            n += 1
    return n


@njit(cache=True)
def simulate_one(rid, master_seed, horizon, k0s, k1s, lawp, aprob, aidx, last_pos,
                 law_row, spine_cdf, spine_q, spine_on, m0, m1, cap, crossover, k_top,
                 n0_anc, p_anc, tag_from, n_top, accept_mode, accept_q, max_cells,
                 nc_out, zt_out, zsat_out, leaves_out, maxc_out, hist_out,
                 anc_out, mult_out):
    """Simulate replicate ``rid`` into the given output rows.

    accept_mode: 0 keep all, 1 keep iff alive at the horizon, 2 keep with
    probability 1 - accept_q^Z_horizon (survival of the margin).
    Returns (accepted, extinction generation or -1, excluded tagged cells,
    cell-limit flag).
    """
    s = seed_stream(master_seed, rid)
    cnt = np.ones(1, dtype=np.int64)
    sat = np.zeros(1, dtype=np.bool_)
    anc_a = np.zeros(1, dtype=np.int64)
    anc_t = np.zeros(1, dtype=np.int64)
    estart = np.array([0, 1], dtype=np.int64)
    etag = np.zeros(1, dtype=np.int64)
    ecls = np.zeros(1, dtype=np.int8)
    if spine_on:
        ecls[0] = SPINE
    ecnt = np.ones(1, dtype=np.int64)
    ext_gen = -1
    excluded = 0
    too_big = False
    leaves_out[0] = 0
    for g in range(horizon + 1):
        if g > 0:
            if cnt.shape[0] == 0:
                nc_out[g] = 0
                zt_out[g] = 0
                zsat_out[g] = False
                leaves_out[g] = leaves_out[g - 1]
                maxc_out[g] = 0
                continue
            if cnt.shape[0] > max_cells // 2:
                too_big = True
                break
            (cnt, sat, anc_a, anc_t, _parent, estart, etag, ecls, ecnt,
             lv) = advance(s, g - 1, cnt, sat, anc_a, anc_t, estart, etag, ecls, ecnt,
                           k0s, k1s, lawp, aprob, aidx, last_pos, law_row,
                           spine_cdf, spine_q, m0, m1, cap, crossover)
            leaves_out[g] = leaves_out[g - 1] + lv
        if g == tag_from:
            estart, etag, ecls, ecnt = expand_tags(cnt, sat, estart, etag, ecls, ecnt)
            for c in range(cnt.shape[0]):
                anc_t[c] = cnt[c]
        if g == n0_anc:
            for c in range(cnt.shape[0]):
                anc_a[c] = cnt[c]
        _record(g, cnt, sat, k_top, nc_out, zt_out, zsat_out, maxc_out, hist_out)
        if cnt.shape[0] == 0 and ext_gen < 0:
            ext_gen = g
        if n0_anc >= 0 and g == n0_anc + p_anc:
            for c in range(cnt.shape[0]):
                a = anc_a[c]
                if a > k_top:
                    anc_out[k_top] += 1
                else:
                    anc_out[a - 1] += 1
        if tag_from >= 0 and g == horizon:
            for c in range(cnt.shape[0]):
                lo = estart[c]
                hi = estart[c + 1]
                untracked = False
                for e in range(lo, hi):
                    if etag[e] < 0:
                        untracked = True
                if untracked:
                    excluded += 1
                    continue
                nn = _distinct_tags(etag, lo, hi)
                a = anc_t[c]
                ai = k_top if a > k_top else a - 1
                ni = n_top if nn > n_top else nn - 1
                mult_out[ai, ni] += 1
    accepted = True
    if accept_mode == 1:
        accepted = zt_out[horizon] > 0
    elif accept_mode == 2:
        z = zt_out[horizon]
        if z <= 0:
            accepted = False
        elif accept_q <= 0.0:
            accepted = True
        else:
            accepted = uniform(s) < -math.expm1(z * math.log(accept_q))
    return accepted, ext_gen, excluded, too_big


@njit(cache=True, parallel=True)
def simulate_batch(first_id, count, master_seed, horizon, k0s, k1s, lawp, aprob, aidx,
                   last_pos, law_row, spine_cdf, spine_q, spine_on, m0, m1, cap,
                   crossover, k_top, n0_anc, p_anc, tag_from, n_top, accept_mode,
                   accept_q, max_cells):
    """Replicates ``first_id .. first_id + count - 1``, one output row each."""
    G = horizon + 1
    nc = np.zeros((count, G), dtype=np.int64)
    zt = np.zeros((count, G), dtype=np.int64)
    zsat = np.zeros((count, G), dtype=np.bool_)
    leaves = np.zeros((count, G), dtype=np.int64)
    maxc = np.zeros((count, G), dtype=np.int64)
    hist = np.zeros((count, G, k_top + 1), dtype=np.int32)
    anc = np.zeros((count, k_top + 1), dtype=np.int64)
    mult = np.zeros((count, k_top + 1, n_top + 1), dtype=np.int32)
    accepted = np.zeros(count, dtype=np.bool_)
    ext_gen = np.zeros(count, dtype=np.int64)
    excluded = np.zeros(count, dtype=np.int64)
    too_big = np.zeros(count, dtype=np.bool_)
    for i in prange(count):
        acc, eg, ex, tb = simulate_one(
            first_id + i, master_seed, horizon, k0s, k1s, lawp, aprob, aidx, last_pos,
            law_row, spine_cdf, spine_q, spine_on, m0, m1, cap, crossover, k_top,
            n0_anc, p_anc, tag_from, n_top, accept_mode, accept_q, max_cells,
            nc[i], zt[i], zsat[i], leaves[i], maxc[i], hist[i], anc[i], mult[i])
        accepted[i] = acc
        ext_gen[i] = eg
        excluded[i] = ex
        too_big[i] = tb
    return nc, zt, zsat, leaves, maxc, hist, anc, mult, accepted, ext_gen, excluded, too_big


@njit(cache=True)
def allocate_many(s, x, n, k0s, k1s, lawp, aprob, aidx, last_pos, crossover):
    """``n`` independent daughter splits of a cell holding ``x`` free parasites."""
    out = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        z0, z1 = _allocate(s, x, 0, k0s, k1s, lawp, aprob, aidx, last_pos, crossover)
        out[i, 0] = z0
        out[i, 1] = z1
    return out
