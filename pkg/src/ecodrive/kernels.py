"""Compiled transition, interpolation and sweep kernels shared by DP, oracle and plant.

Axes are passed as 4-vectors ``(origin, step, offset, n)`` with node ``i`` at
``origin + (offset + i) * step``; local axes (MPC horizons) keep the origin
of the global grid so that their nodes are bitwise identical to it.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .vehicle import P_AUX, P_CAP, P_KBATT, P_LHV, _advance, _ocv, _stage_cost
from .world import _phase

INF = np.inf
MODE_LINEAR = 0
MODE_NEAREST = 1
MODE_STRICT = 2  # linear weights, but any infeasible corner with weight makes the result infeasible

# per-node route table columns
C_X = 0
C_VBASE = 1
C_LIGHT = 2
C_CYCLE = 3
C_GREEN = 4
C_OFFSET = 5
C_LEAD = 6
N_COLS = 7


@njit(cache=True)
def axis_value(ax, i):
    return ax[0] + (ax[2] + i) * ax[1]


@njit(cache=True)
def _locate(ax, x, mode):
    """Return (i, w): lower node and weight of the upper node; i = -1 off the hull."""
    n = int(ax[3])
    lo = ax[0] + ax[2] * ax[1]
    hi = ax[0] + (ax[2] + n - 1) * ax[1]
    if x < lo or x > hi:
        return -1, 0.0
    f = (x - ax[0]) / ax[1] - ax[2]
    r = math.floor(f + 0.5)
    if mode == MODE_NEAREST:
        i = int(r)
        if i > n - 1:
            i = n - 1
        return i, 0.0
    if abs(f - r) < 1e-9:
        f = r
    i = int(math.floor(f))
    if i >= n - 1:
        i = n - 2
    if i < 0:
        i = 0
    w = f - i
    if w < 0.0:
        w = 0.0
    elif w > 1.0:
        w = 1.0
    return i, w


@njit(cache=True)
def interp3(J, vax, sax, tax, v, soc, t, mode):
    """Multilinear value with +inf corners dropped and the remaining weights renormalized."""
    iv, wv = _locate(vax, v, mode)
    if iv < 0:
        return INF
    js, ws = _locate(sax, soc, mode)
    if js < 0:
        return INF
    return _interp_t(J, iv, wv, js, ws, tax, t, mode)


@njit(cache=True)
def _interp_t(J, iv, wv, js, ws, tax, t, mode):
    kt, wt = _locate(tax, t, mode)
    if kt < 0:
        return INF
    if mode == MODE_NEAREST:
        return J[iv, js, kt]
    tot = 0.0
    wsum = 0.0
    for a in range(2):
        wa = wv if a == 1 else 1.0 - wv
        if wa == 0.0:
            continue
        for b in range(2):
            wb = ws if b == 1 else 1.0 - ws
            if wb == 0.0:
                continue
            for c in range(2):
                wc = wt if c == 1 else 1.0 - wt
                if wc == 0.0:
                    continue
                val = J[iv + a, js + b, kt + c]
                if val == INF:
                    if mode == MODE_STRICT:
                        return INF
                    continue
                w = wa * wb * wc
                tot += w * val
                wsum += w
    if wsum == 0.0:
        return INF
    return tot / wsum


@njit(cache=True)
def interp_many(J, vax, sax, tax, v, soc, t, mode):
    out = np.empty(v.shape[0])
    for i in range(v.shape[0]):
        out[i] = interp3(J, vax, sax, tax, v[i], soc[i], t[i], mode)
    return out


@njit(cache=True)
def speed_limit(vbase, x, t, jams, vmin):
    lim = vbase
    for j in range(jams.shape[0]):
        if jams[j, 0] <= x < jams[j, 1] and jams[j, 2] <= t < jams[j, 3]:
            if jams[j, 4] < lim:
                lim = jams[j, 4]
    if lim < vmin:
        lim = vmin
    return lim


@njit(cache=True)
def arrive(p, v1, soc1, dt, cost, mf, mfeq, t, row, jams, vmin, gap, gamma):
    """Apply the clock, signal, jam and lead constraints at the next node.

    Returns (ok, t_arrive, t_depart, soc, stage_cost, eq_fuel_g, fuel_g).
    A vehicle reaching a light node at standstill dwells until green; the
    dwell draws the auxiliary load from the battery at open-circuit voltage.
    """
    t_arr = t + dt
    bad = (False, t_arr, t_arr, soc1, cost, 0.0, 0.0)
    lim = speed_limit(row[C_VBASE], row[C_X], t_arr, jams, vmin)
    if v1 > lim:
        return bad
    lead_t = row[C_LEAD]
    if lead_t == lead_t and t_arr < lead_t + gap:
        return bad
    m_eq = mfeq * dt
    m_f = mf * dt
    if row[C_LIGHT] > 0.0:
        green, t_rg = _phase(t_arr, row[C_CYCLE], row[C_GREEN], row[C_OFFSET])
        if v1 == 0.0:
            if t_rg > 0.0:
                voc = _ocv(p, soc1)
                cur = p[P_AUX] / voc
                mfeq_w = p[P_KBATT] * (voc * cur) / p[P_LHV]
                soc_w = soc1 - t_rg * cur / p[P_CAP]
                return (True, t_arr, t_arr + t_rg, soc_w, cost + _stage_cost(p, mfeq_w, t_rg, gamma),
                        m_eq + mfeq_w * t_rg, m_f)
        elif not green:
            return bad
    elif v1 < vmin:
        return bad
    return (True, t_arr, t_arr, soc1, cost, m_eq, m_f)


@njit(cache=True)
def transition(p, v, soc, t, accel, engine, ds, gamma, row, jams, vmin, gap):
    """Full successor of (v, soc, t) under one control.

    Returns (ok, v1, soc1, t_depart, cost, t_arrive, eq_fuel_g, fuel_g,
    f_tr, p_batt, mf, mfeq, overbrake).
    """
    ph = _advance(p, v, soc, accel, engine, ds, gamma)
    if not ph[0]:
        return (False, 0.0, soc, t, 0.0, t, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, False)
    ar = arrive(p, ph[1], ph[2], ph[3], ph[4], ph[9], ph[10], t, row, jams, vmin, gap, gamma)
    return (ar[0], ph[1], ar[3], ar[2], ar[4], ar[1], ar[5], ar[6], ph[5], ph[7], ph[9], ph[10], ph[11])


@njit(cache=True)
def sweep_layer(p, controls, ds, gamma, vax, sax, tax, vbase_here, row_next, jams, vmin, gap,
                tax_next, J_next, mode):
    """One backward Bellman sweep over every node of a layer.

    The clock-independent part of the transition is hoisted out of the time
    loop; ties keep the lowest control index.
    """
    nv = int(vax[3])
    ns = int(sax[3])
    nt = int(tax[3])
    nc = controls.shape[0]
    J = np.full((nv, ns, nt), INF)
    pol = np.full((nv, ns, nt), -1, dtype=np.int16)
    for iv in range(nv):
        v = axis_value(vax, iv)
        if v > vbase_here + 1e-9:
            continue
        for js in range(ns):
            soc = axis_value(sax, js)
            for ic in range(nc):
                ph = _advance(p, v, soc, controls[ic, 0], controls[ic, 1] > 0.5, ds, gamma)
                if not ph[0]:
                    continue
                # velocity and (unless a stop dwell drains it) SoC lookups do not depend on the clock
                iv1, wv1 = _locate(vax, ph[1], mode)
                if iv1 < 0:
                    continue
                js1, ws1 = _locate(sax, ph[2], mode)
                for kt in range(nt):
                    t = axis_value(tax, kt)
                    ar = arrive(p, ph[1], ph[2], ph[3], ph[4], ph[9], ph[10], t, row_next, jams, vmin, gap, gamma)
                    if not ar[0]:
                        continue
                    if ar[3] == ph[2]:
                        if js1 < 0:
                            continue
                        val = ar[4] + _interp_t(J_next, iv1, wv1, js1, ws1, tax_next, ar[2], mode)
                    else:
                        val = ar[4] + interp3(J_next, vax, sax, tax_next, ph[1], ar[3], ar[2], mode)
                    if val < J[iv, js, kt]:
                        J[iv, js, kt] = val
                        pol[iv, js, kt] = ic
    return J, pol


@njit(cache=True)
def lookahead(p, controls, ds, gamma, v, soc, t, row_next, jams, vmin, gap, vax, sax, tax_next, J_next, mode):
    """Best control from a continuous state against the next layer's values.

    Returns (index, value); index -1 when nothing is admissible.
    """
    best = INF
    arg = -1
    for ic in range(controls.shape[0]):
        tr = transition(p, v, soc, t, controls[ic, 0], controls[ic, 1] > 0.5, ds, gamma,
                        row_next, jams, vmin, gap)
        if not tr[0]:
            continue
        val = tr[4] + interp3(J_next, vax, sax, tax_next, tr[1], tr[2], tr[3], mode)
        if val < best:
            best = val
            arg = ic
    return arg, best


@njit(cache=True)
def oracle_search(p, controls, ds, gamma, vax, sax, taxes, table, jams, vmin, gap, J_term,
                  v0, soc0, t0, n_steps):
    """Exhaustive search over control sequences with nearest-node snapping.

    Stage costs are folded right to left so the total matches the DP
    recursion bit for bit.  Returns (best_total, best_sequence).
    """
    nc = controls.shape[0]
    best = INF
    best_seq = np.full(n_steps, -1, dtype=np.int64)
    ci = np.full(n_steps, -1, dtype=np.int64)
    sv = np.empty(n_steps + 1)
    ss = np.empty(n_steps + 1)
    st = np.empty(n_steps + 1)
    cost = np.empty(n_steps)
    sv[0] = v0
    ss[0] = soc0
    st[0] = t0
    d = 0
    while d >= 0:
        ci[d] += 1
        if ci[d] >= nc:
            d -= 1
            continue
        row = table[d + 1]
        tr = transition(p, sv[d], ss[d], st[d], controls[ci[d], 0], controls[ci[d], 1] > 0.5, ds, gamma,
                        row, jams, vmin, gap)
        if not tr[0]:
            continue
        iv, _w = _locate(vax, tr[1], MODE_NEAREST)
        js, _w = _locate(sax, tr[2], MODE_NEAREST)
        kt, _w = _locate(taxes[d + 1], tr[3], MODE_NEAREST)
        if iv < 0 or js < 0 or kt < 0:
            continue
        vn = axis_value(vax, iv)
        if vn > row[C_VBASE] + 1e-9:
            continue
        cost[d] = tr[4]
        if d + 1 == n_steps:
            total = J_term[iv, js, kt]
            if total == INF:
                continue
            for k in range(n_steps - 1, -1, -1):
                total = cost[k] + total
            if total < best:
                best = total
                best_seq[:] = ci
            continue
        sv[d + 1] = vn
        ss[d + 1] = axis_value(sax, js)
        st[d + 1] = axis_value(taxes[d + 1], kt)
        d += 1
        ci[d] = -1
    return best, best_seq


@njit(cache=True)
def bellman_node(p, controls, ds, gamma, vax, sax, tax, vbase_here, row_next, jams, vmin, gap,
                 tax_next, J_next, mode, iv, js, kt):
    """Recompute one node's Bellman backup straight from ``transition``; returns (value, index)."""
    v = axis_value(vax, iv)
    if v > vbase_here + 1e-9:
        return INF, -1
    arg, best = lookahead(p, controls, ds, gamma, v, axis_value(sax, js), axis_value(tax, kt),
                          row_next, jams, vmin, gap, vax, sax, tax_next, J_next, mode)
    return best, arg


@njit(cache=True)
def bellman_residual_layer(p, controls, ds, gamma, vax, sax, tax, vbase_here, row_next, jams, vmin, gap,
                           tax_next, J_next, mode, J_here):
    """Max |J - backup| over a layer (inf-inf counts as zero, inf-finite as inf)."""
    worst = 0.0
    for iv in range(int(vax[3])):
        for js in range(int(sax[3])):
            for kt in range(int(tax[3])):
                b, _ = bellman_node(p, controls, ds, gamma, vax, sax, tax, vbase_here, row_next, jams, vmin,
                                    gap, tax_next, J_next, mode, iv, js, kt)
                a = J_here[iv, js, kt]
                if a == INF and b == INF:
                    continue
                r = abs(a - b)
                if r > worst:
                    worst = r
    return worst


@njit(cache=True)
def lookahead_all(p, controls, ds, gamma, v, soc, t, row_next, jams, vmin, gap, vax, sax, tax_next, J_next, mode):
    """Stage cost plus interpolated cost-to-go for every control (inf when inadmissible)."""
    out = np.full(controls.shape[0], INF)
    for ic in range(controls.shape[0]):
        tr = transition(p, v, soc, t, controls[ic, 0], controls[ic, 1] > 0.5, ds, gamma,
                        row_next, jams, vmin, gap)
        if tr[0]:
            out[ic] = tr[4] + interp3(J_next, vax, sax, tax_next, tr[1], tr[2], tr[3], mode)
    return out
