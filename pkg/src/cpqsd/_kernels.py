"""Hot loops shared by the simulation modules.

Every kernel is written once as a plain numpy function and compiled with
numba when available.  Set CPQSD_NUMBA=0 to force the interpreted fallback
(used by the benchmark and as a safety net on machines without a working
numba).  Both paths execute the same source, so results are bit-identical.

Conventions:
  * marks are struct-of-arrays: times f8, kinds i1 (0=recovery, 1=arrow),
    src i4, dst i4 (dst==src for recoveries), sorted by time;
  * occupancy arrays are int8 over window sites, index = site - lo;
  * in-kernel randomness is splitmix64 seeded from a uint64 per replica,
    state passed as a one-element uint64 array so calls can mutate it.
"""

from __future__ import annotations

import functools
import os

import numpy as np

USE_NUMBA = os.environ.get("CPQSD_NUMBA", "1") != "0"
if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba = None
        USE_NUMBA = False

if USE_NUMBA:
    _threads = os.environ.get("CPQSD_THREADS")
    if _threads:
        try:
            numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
        except (ValueError, RuntimeError):
            pass


def _jit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)

    # interpreted path: uint64 scalar arithmetic overflows by design
    @functools.wraps(fn)
    def wrapper(*args):
        with np.errstate(over="ignore"):
            return fn(*args)

    return wrapper


# ===== splitmix64 =====

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)
_U53 = np.float64(1.0 / 9007199254740992.0)  # 2**-53


def _u64_py(state):
    state[0] = state[0] + _SM_GAMMA
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _SM_M1
    z = (z ^ (z >> np.uint64(27))) * _SM_M2
    return z ^ (z >> np.uint64(31))


u64 = _jit(_u64_py)


def _unit_py(state):
    # uniform on (0, 1]; never 0 so log() is safe
    return (np.float64(u64(state) >> np.uint64(11)) + 1.0) * _U53


unit = _jit(_unit_py)


def _exponential_py(state, rate):
    return -np.log(unit(state)) / rate


exponential = _jit(_exponential_py)


# ===== mark generation =====

def _gen_marks_py(lo, hi, t0, t1, lam, state, times, kinds, src, dst):
    """Per-line exponential interarrivals, fixed line order, unsorted output.

    Line order: recovery lines lo..hi, right arrows x->x+1 for x<hi, left
    arrows x->x-1 for x>lo.  Returns mark count, or -1 if capacity is too
    small (caller grows the buffers and calls again; the stream restarts,
    so the result is still a pure function of the seed).
    """
    cap = times.shape[0]
    n = 0
    for x in range(lo, hi + 1):
        t = t0 + exponential(state, 1.0)
        while t <= t1:
            if n >= cap:
                return -1
            times[n] = t
            kinds[n] = 0
            src[n] = x
            dst[n] = x
            n += 1
            t += exponential(state, 1.0)
    if lam > 0.0:
        for x in range(lo, hi):
            t = t0 + exponential(state, lam)
            while t <= t1:
                if n >= cap:
                    return -1
                times[n] = t
                kinds[n] = 1
                src[n] = x
                dst[n] = x + 1
                n += 1
                t += exponential(state, lam)
        for x in range(lo + 1, hi + 1):
            t = t0 + exponential(state, lam)
            while t <= t1:
                if n >= cap:
                    return -1
                times[n] = t
                kinds[n] = 1
                src[n] = x
                dst[n] = x - 1
                n += 1
                t += exponential(state, lam)
    return n


gen_marks = _jit(_gen_marks_py)


def _sort_marks_py(times, kinds, src, dst, n, times_s, kinds_s, src_s, dst_s):
    order = np.argsort(times[:n])
    for i in range(n):
        j = order[i]
        times_s[i] = times[j]
        kinds_s[i] = kinds[j]
        src_s[i] = src[j]
        dst_s[i] = dst[j]


sort_marks = _jit(_sort_marks_py)


# ===== forward / backward sweeps =====

def _evolve_sweep_py(times, kinds, src, dst, n, occ, lo, hi, s, t):
    """Apply marks with s < time <= t to occupancy occ (int8, index site-lo).

    Returns 1 if the occupied set ever included a window boundary site
    while marks were pending (truncation may matter), else 0.
    """
    touched = 0
    if occ[0] != 0 or occ[hi - lo] != 0:
        touched = 1
    i = np.searchsorted(times[:n], s, side="right")
    while i < n and times[i] <= t:
        x = src[i] - lo
        if kinds[i] == 0:
            occ[x] = 0
        else:
            if occ[x] != 0:
                y = dst[i] - lo
                if occ[y] == 0:
                    occ[y] = 1
                    if y == 0 or y == hi - lo:
                        touched = 1
        i += 1
    return touched


evolve_sweep = _jit(_evolve_sweep_py)


def _backward_sweep_py(times, kinds, src, dst, n, b, lo, record, delta_site, delta_above):
    """Backward reachability to the top line.

    On entry b must be all ones (state on the interval above the last mark).
    On exit b[x] == 1 iff (x, s) reaches the top line for s just below the
    first mark (equivalently: for s = 0 when the log starts at 0).

    With record != 0, stores per-event replay deltas: crossing event k
    upward in time, set b[delta_site[k]] = delta_above[k] (site -1 = none).
    """
    for k in range(n - 1, -1, -1):
        x = src[k] - lo
        if kinds[k] == 0:
            if record != 0:
                if b[x] != 0:
                    delta_site[k] = x
                    delta_above[k] = 1
                else:
                    delta_site[k] = -1
            b[x] = 0
        else:
            y = dst[k] - lo
            if b[x] == 0 and b[y] != 0:
                if record != 0:
                    delta_site[k] = x
                    delta_above[k] = 0
                b[x] = 1
            elif record != 0:
                delta_site[k] = -1
    return 0


backward_sweep = _jit(_backward_sweep_py)


# ===== jump-count dynamic program =====

def _jump_dp_py(times, kinds, src, dst, n, J, lo, hi, z, s, t):
    """Max jumps over lambda-paths from (z, s) by each site within (s, t].

    J must be int32, all -1; J[z-lo] is set to 0 here.  Returns
    (max_jumps, censored) with censored = 1 when the reached cloud touched
    the window boundary.
    """
    J[z - lo] = 0
    best = 0
    i = np.searchsorted(times[:n], s, side="right")
    while i < n and times[i] <= t:
        if kinds[i] == 1:
            x = src[i] - lo
            if J[x] >= 0:
                y = dst[i] - lo
                v = J[x] + 1
                if v > J[y]:
                    J[y] = v
                    if v > best:
                        best = v
        i += 1
    censored = 0
    if J[0] >= 0 or J[hi - lo] >= 0:
        censored = 1
    return best, censored


jump_dp = _jit(_jump_dp_py)


# ===== rightmost path and break scan =====

def _range_count_py(occ, a, b, lo_idx, hi_idx):
    """Occupied count on site-index range [a, b] clipped to [lo_idx, hi_idx]."""
    if a < lo_idx:
        a = lo_idx
    if b > hi_idx:
        b = hi_idx
    c = 0
    for i in range(a, b + 1):
        c += occ[i]
    return c


_range_count = _jit(_range_count_py)


def _gamma_break_scan_py(times, kinds, src, dst, n, lo, hi, x_start, w,
                         delta_site, delta_above, b, f, o,
                         gamma_out, o_at_break):
    """Rightmost-path scan with the break predicate, one sweep over the log.

    Inputs: sorted marks on [0, t]; b prefilled by backward_sweep (state on
    the interval below the first mark) with replay deltas; f, o zeroed.
    f tracks occupancy from (x_start, 0), o from the fully occupied line.
    w = break interval width in sites.

    gamma_out[k] (int32, length n+1) gets the rightmost site reachable from
    (x_start,0) and reaching the top line, on the k-th inter-mark interval.
    Returns (status, break_k, y_break, max_gamma):
      status 0 ok, 1 = x_start does not reach the top line, 2 = the
      rightmost-site scan fell off the window (window too small).
    break_k = first interval index on which (gamma, gamma+w] held no
    full-line-reachable site (-1 if none); o restricted state at that moment
    is copied into o_at_break.  The caller translates break_k to a time and
    applies the censoring rule via max_gamma.
    """
    nsites = hi - lo + 1
    for i in range(nsites):
        o[i] = 1
        f[i] = 0
    xs = x_start - lo
    f[xs] = 1
    if b[xs] == 0:
        return 1, -1, 0, 0
    cur = xs
    # count of full-line-occupied sites in (cur, cur+w]
    cnt = _range_count(o, cur + 1, cur + w, 0, nsites - 1)
    gamma_out[0] = cur + lo
    max_cur = cur
    break_k = -1
    y_break = 0
    for k in range(n):
        x = src[k] - lo
        if kinds[k] == 0:
            # full-line occupancy loses x
            if o[x] != 0:
                o[x] = 0
                if cur < x <= cur + w:
                    cnt -= 1
            f[x] = 0
        else:
            y = dst[k] - lo
            if o[x] != 0 and o[y] == 0:
                o[y] = 1
                if cur < y <= cur + w:
                    cnt += 1
            if f[x] != 0:
                f[y] = 1
        ds = delta_site[k]
        if ds >= 0:
            b[ds] = delta_above[k]
        # repair the rightmost reachable site: an arrow may extend it upward
        # (by one, though the shift below handles any distance), then a lost
        # f or b at the current site forces a downward rescan
        new = cur
        if kinds[k] == 1:
            y = dst[k] - lo
            if y > new and f[y] != 0 and b[y] != 0:
                new = y
        if f[new] == 0 or b[new] == 0:
            j = new - 1
            while j >= 0 and (f[j] == 0 or b[j] == 0):
                j -= 1
            if j < 0:
                return 2, -1, 0, 0
            new = j
        if new != cur:
            # shift the break window from cur to new
            if new > cur:
                if new - cur >= w:
                    cnt = _range_count(o, new + 1, new + w, 0, nsites - 1)
                else:
                    cnt -= _range_count(o, cur + 1, new, 0, nsites - 1)
                    cnt += _range_count(o, cur + w + 1, new + w, 0, nsites - 1)
            else:
                if cur - new >= w:
                    cnt = _range_count(o, new + 1, new + w, 0, nsites - 1)
                else:
                    cnt += _range_count(o, new + 1, cur, 0, nsites - 1)
                    cnt -= _range_count(o, new + w + 1, cur + w, 0, nsites - 1)
            cur = new
            if cur > max_cur:
                max_cur = cur
        gamma_out[k + 1] = cur + lo
        if break_k < 0 and cnt == 0:
            break_k = k + 1
            y_break = cur + lo
            for i in range(nsites):
                o_at_break[i] = o[i]
    return 0, break_k, y_break, max_cur + lo


gamma_break_scan = _jit(_gamma_break_scan_py)


# ===== barrier-to-target reach (staircase source) =====

def _staircase_reach_py(times, kinds, src, dst, marku, n, keep, lo, hi,
                        sqrt_t, four_beta, flat_from, c_lo, c_hi, occ):
    """Reachability from the descending staircase source to the target row.

    Shifted clock: runs on [0, sqrt_t]; at clock s the staircase sits at
    floor(four_beta * (sqrt_t - s)).  Sites >= flat_from start occupied.
    Arrow marks with marku[i] > keep are thinned out (coupled monotonicity
    in lambda).  occ is int8 scratch.  Returns 1 if any site in [c_lo, c_hi]
    is occupied at clock sqrt_t.
    """
    nsites = hi - lo + 1
    for i in range(nsites):
        occ[i] = 0
    for x in range(flat_from, hi + 1):
        occ[x - lo] = 1
    fence = flat_from  # floor(four_beta * sqrt_t) at s=0
    occ[fence - lo] = 1
    i = 0
    while i <= n:
        if i < n:
            tm = times[i]
        else:
            tm = sqrt_t
        # advance the fence through its change times up to tm
        while fence > 0:
            s_change = sqrt_t - fence / four_beta  # time fence drops to fence-1
            if s_change <= tm:
                fence -= 1
                occ[fence - lo] = 1
            else:
                break
        if i == n:
            break
        x = src[i] - lo
        if kinds[i] == 0:
            if src[i] != fence:  # the staircase column cannot be vacated
                occ[x] = 0
        else:
            if marku[i] <= keep and occ[x] != 0:
                occ[dst[i] - lo] = 1
        i += 1
    hit = 0
    for x in range(c_lo, c_hi + 1):
        if occ[x - lo] != 0:
            hit = 1
            break
    return hit


staircase_reach = _jit(_staircase_reach_py)


# ===== contact process, direct event simulation =====

def _gillespie_free_py(sites, n, lam, t_now, t_end, state):
    """Contact process on Z from a sorted site list, run on (t_now, t_end].

    Mutates sites in place.  Returns (n', t'):
      n' >= 0  survived to t_end (t' = t_end) or died (n' = 0, t' = death time)
      n' = -2  site buffer full (caller must treat as an error).
    """
    cap = sites.shape[0]
    while n > 0:
        adj = 0
        for i in range(n - 1):
            if sites[i + 1] - sites[i] == 1:
                adj += 1
        slots = 2 * n - 2 * adj
        total = n + lam * slots
        t_now += exponential(state, total)
        if t_now > t_end:
            return n, t_end
        r = unit(state) * total
        if r < n:
            idx = int(r)
            if idx >= n:
                idx = n - 1
            for i in range(idx, n - 1):
                sites[i] = sites[i + 1]
            n -= 1
        else:
            k = int((r - n) / lam)
            if k >= slots:
                k = slots - 1
            target = 0
            found = 0
            for i in range(n):
                if found == 0 and (i == 0 or sites[i - 1] != sites[i] - 1):
                    if k == 0:
                        target = sites[i] - 1
                        found = 1
                    else:
                        k -= 1
                if found == 0 and (i == n - 1 or sites[i + 1] != sites[i] + 1):
                    if k == 0:
                        target = sites[i] + 1
                        found = 1
                    else:
                        k -= 1
                if found != 0:
                    break
            if n >= cap:
                return -2, t_now
            j = n
            while j > 0 and sites[j - 1] > target:
                sites[j] = sites[j - 1]
                j -= 1
            sites[j] = target
            n += 1
    return 0, t_now


gillespie_free = _jit(_gillespie_free_py)


def _gillespie_free_batch_py(sites2d, counts, tnows, lam, t_end, states):
    """Advance every replica with counts[i] > 0 to t_end (or death)."""
    npop = counts.shape[0]
    for i in range(npop):
        if counts[i] > 0:
            st = states[i:i + 1]
            n2, t2 = gillespie_free(sites2d[i], counts[i], lam, tnows[i], t_end, st)
            counts[i] = n2
            tnows[i] = t2
    return 0


gillespie_free_batch = _jit(_gillespie_free_batch_py)


# ===== truncated-chain walks (CSR) =====

def _row_sums_py(indptr, rates, out):
    """Sequential per-row sums, same accumulation order as _chain_step."""
    for s in range(indptr.shape[0] - 1):
        acc = 0.0
        for k in range(indptr[s], indptr[s + 1]):
            acc += rates[k]
        out[s] = acc
    return 0


row_sums = _jit(_row_sums_py)


def _chain_step_py(indptr, indices, rates, exits, s, state):
    """One jump from state index s.  Returns target index, -1 if absorbed."""
    r = unit(state) * exits[s]
    acc = 0.0
    for k in range(indptr[s], indptr[s + 1]):
        acc += rates[k]
        if r < acc:
            return indices[k]
    return -1


_chain_step = _jit(_chain_step_py)


def _gillespie_chain_py(indptr, indices, rates, exits, s, t_now, t_end, state):
    """Continuous-time walk on a CSR-encoded chain with absorption.

    exits[s] = total exit rate of s including absorption; row entries are the
    non-absorbing rates.  Returns (state', t') with state' = -1 if absorbed
    (t' = absorption time), else t' = t_end.
    """
    while True:
        t_now += exponential(state, exits[s])
        if t_now > t_end:
            return s, t_end
        s = _chain_step(indptr, indices, rates, exits, s, state)
        if s < 0:
            return -1, t_now


gillespie_chain = _jit(_gillespie_chain_py)


def _gillespie_chain_batch_py(indptr, indices, rates, exits, idxs, tnows, t_end, states):
    npop = idxs.shape[0]
    for i in range(npop):
        if idxs[i] >= 0:
            st = states[i:i + 1]
            s2, t2 = gillespie_chain(indptr, indices, rates, exits,
                                     idxs[i], tnows[i], t_end, st)
            idxs[i] = s2
            tnows[i] = t2
    return 0


gillespie_chain_batch = _jit(_gillespie_chain_batch_py)


def _occupation_run_py(indptr, indices, rates, exits, s, n_jumps, state, occ_time):
    """Jump n_jumps times on an honest chain, accumulating holding times."""
    for _ in range(n_jumps):
        occ_time[s] += exponential(state, exits[s])
        s2 = _chain_step(indptr, indices, rates, exits, s, state)
        if s2 < 0:
            return -1
        s = s2
    return s


occupation_run = _jit(_occupation_run_py)


# ===== jump-count growth process (good-point tail) =====

def _jump_level_advance_py(J, bounds, t_now, t_end, lam, target, state):
    """Advance the max-jump-count growth process until the running maximum
    reaches target or time passes t_end.

    J is int32 over the tube (index = site + m), J[site 0] = 0 initially,
    -1 elsewhere.  bounds = int32[3]: reached lo index, reached hi index,
    current max.  Returns (hit, t').
    """
    rlo = bounds[0]
    rhi = bounds[1]
    cmax = bounds[2]
    width = J.shape[0]
    while True:
        nact = 2 * (rhi - rlo + 1)
        t_now += exponential(state, lam * nact)
        if t_now > t_end:
            bounds[0] = rlo
            bounds[1] = rhi
            bounds[2] = cmax
            return 0, t_end
        u = int(unit(state) * nact)
        if u >= nact:
            u = nact - 1
        x = rlo + (u >> 1)
        if u & 1 == 0:
            y = x + 1
        else:
            y = x - 1
        if y < 0 or y >= width:
            continue
        v = J[x] + 1
        if v > J[y]:
            J[y] = v
            if y < rlo:
                rlo = y
            elif y > rhi:
                rhi = y
            if v > cmax:
                cmax = v
                if cmax >= target:
                    bounds[0] = rlo
                    bounds[1] = rhi
                    bounds[2] = cmax
                    return 1, t_now


jump_level_advance = _jit(_jump_level_advance_py)
