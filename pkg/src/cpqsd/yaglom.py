"""Monte Carlo estimation of conditioned laws and the decay triple.

The estimators here are the stochastic counterparts of the exact spectral
module: the conditioned law of the edge configuration given survival, the
decay rate from log-survival slopes, the survival-scaled h values, and the
h-transformed (honest) chain.  Survival to large times is exponentially
rare, so the default machinery is multilevel splitting: the population is
advanced between checkpoints, extinct replicas are resampled uniformly from
the survivors, and a shared weight keeps the product of stage survival
fractions, which is itself the survival-probability estimate.

Randomness discipline: every kernel stream is derived from a seed tuple, the
resampler has its own stream, and resampling is done by a single generator
in replica order, so results are reproducible and independent of threading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels as K
from .edge import EmpiricalDistribution, clip_key, recenter
from .errors import ParameterError, ResolutionError
from .spectral import build_generator, dominant_eigenpair, index_to_key, key_to_index


@dataclass(frozen=True)
class Rejection:
    """Keep simulating fresh replicas until enough survive.  Cost grows
    like exp(alpha * t); intended for short horizons and sanity checks."""


@dataclass(frozen=True)
class Splitting:
    """Checkpointed multilevel splitting.  checkpoint_dt = None picks the
    rough guess 1/alpha from a small spectral solve; whenever a stage keeps
    less than a fifth of the population the spacing is halved."""

    checkpoint_dt: float | None = None


_MIN_STAGE_FRACTION = 0.2
_ROUGH_ALPHA = {}


def _rough_alpha(lam):
    if lam not in _ROUGH_ALPHA:
        _ROUGH_ALPHA[lam] = dominant_eigenpair(build_generator(8, lam)).alpha
    return _ROUGH_ALPHA[lam]


def _words(seed_tuple, n):
    return np.random.SeedSequence(seed_tuple).generate_state(n, np.uint64)


# ===== populations =====

class _FreePopulation:
    """N replicas of the contact process on Z from one finite configuration,
    as sorted site buffers advanced by the direct event kernel."""

    def __init__(self, sites, lam, n, words):
        base = np.asarray(sorted(sites), np.int32)
        cap = 64
        while cap < 2 * base.size + 16:
            cap *= 2
        self.sites = np.zeros((n, cap), np.int32)
        self.sites[:, :base.size] = base
        self.counts = np.full(n, base.size, np.int64)
        self.tnows = np.zeros(n)
        self.states = words.copy()
        self.lam = float(lam)

    def advance_to(self, t_end):
        K.gillespie_free_batch(self.sites, self.counts, self.tnows,
                               self.lam, float(t_end), self.states)
        while True:
            flagged = np.nonzero(self.counts == -2)[0]
            if flagged.size == 0:
                return
            old_cap = self.sites.shape[1]
            bigger = np.zeros((self.sites.shape[0], 2 * old_cap), np.int32)
            bigger[:, :old_cap] = self.sites
            self.sites = bigger
            for i in flagged:
                n2, t2 = K.gillespie_free(self.sites[i], old_cap, self.lam,
                                          self.tnows[i], float(t_end),
                                          self.states[i:i + 1])
                self.counts[i] = n2
                self.tnows[i] = t2

    def alive_mask(self):
        return self.counts > 0

    def copy(self, src, dst):
        self.sites[dst] = self.sites[src]
        self.counts[dst] = self.counts[src]
        self.tnows[dst] = self.tnows[src]

    def final_key(self, i, depth):
        n = self.counts[i]
        row = self.sites[i, :n]
        return clip_key((row - row[n - 1]).tolist(), depth)


def _chain_arrays(gen):
    coo = gen.Q.tocoo()
    off = coo.row != coo.col
    Qoff = sp.csr_matrix((coo.data[off], (coo.row[off], coo.col[off])),
                         shape=gen.Q.shape)
    exits = np.zeros(gen.nstates)
    K.row_sums(Qoff.indptr, Qoff.data, exits)
    exits += gen.absorption
    return Qoff.indptr, Qoff.indices.astype(np.int64), Qoff.data, exits


class _ChainPopulation:
    """N replicas of the depth-L truncated chain, walked on its CSR rows."""

    def __init__(self, gen, start_key, n, words):
        self.gen = gen
        self.indptr, self.indices, self.rates, self.exits = _chain_arrays(gen)
        self.idxs = np.full(n, key_to_index(start_key), np.int64)
        self.tnows = np.zeros(n)
        self.states = words.copy()

    def advance_to(self, t_end):
        K.gillespie_chain_batch(self.indptr, self.indices, self.rates,
                                self.exits, self.idxs, self.tnows,
                                float(t_end), self.states)

    def alive_mask(self):
        return self.idxs >= 0

    def copy(self, src, dst):
        self.idxs[dst] = self.idxs[src]
        self.tnows[dst] = self.tnows[src]

    def final_key(self, i, depth):
        key = index_to_key(int(self.idxs[i]))
        clipped = bin(key >> depth).count("1")
        return key & ((1 << depth) - 1), clipped


def _make_population(init_sites, lam, n, words, gen, start_key):
    if gen is not None:
        return _ChainPopulation(gen, start_key, n, words)
    return _FreePopulation(init_sites, lam, n, words)


# ===== splitting core =====

def _grouped_ess(members):
    """Conservative effective size: replicas sharing an ancestor since the
    last resampling count as one cluster, (sum m)^2 / sum m^2."""
    m = np.bincount(members)
    m = m[m > 0].astype(float)
    return float(m.sum() ** 2 / np.square(m).sum())


def _run_splitting(pop, n, t, dt0, resample_rng, record_times=()):
    """Advance a population of size n to time t with resampling checkpoints.

    Returns (alive indices, log weight, stage times, survivor counts,
    records, final ess).  records[t_k] = (survival estimate, accumulated
    delta-method variance of its log, ess at t_k) for each requested time.
    """
    ancestors = np.arange(n)
    log_w = 0.0
    var_acc = 0.0
    stages = []
    survivor_counts = []
    records = {}
    pending = sorted(rt for rt in record_times if 0.0 < rt <= t)
    dt = dt0
    t_now = 0.0
    while t_now < t:
        t_next = min(t_now + dt, t)
        while pending and pending[0] <= t_now + 1e-12:
            pending.pop(0)
        if pending and pending[0] < t_next:
            t_next = pending[0]
        ess_pop = _grouped_ess(ancestors)
        pop.advance_to(t_next)
        mask = pop.alive_mask()
        alive = np.nonzero(mask)[0]
        if alive.size == 0:
            raise ResolutionError(
                f"population collapse: 0 of {n} replicas survive the stage "
                f"ending at t={t_next:.6g}; increase population")
        frac = alive.size / n
        log_w += math.log(frac)
        var_acc += (1.0 - frac) / (frac * ess_pop)
        stages.append(t_next)
        survivor_counts.append(int(alive.size))
        if pending and pending[0] == t_next:
            pending.pop(0)
            records[t_next] = (math.exp(log_w), var_acc,
                               _grouped_ess(ancestors[alive]))
        if t_next < t:
            dead = np.nonzero(~mask)[0]
            ancestors = np.arange(n)
            if dead.size:
                src = alive[resample_rng.integers(0, alive.size, dead.size)]
                for d, s in zip(dead, src):
                    pop.copy(s, d)
                    ancestors[d] = s
            if frac < _MIN_STAGE_FRACTION:
                dt = max(dt / 2.0, t / 1024.0)
        t_now = t_next
    ess = _grouped_ess(ancestors[alive])
    return alive, log_w, stages, survivor_counts, records, ess


def _init_site_list(init):
    sites = sorted(int(x) for x in init)
    if not sites:
        raise ParameterError("initial configuration must be nonempty")
    return sites


# ===== conditioned-law estimation =====

def yaglom_estimate(init, lam, t, target_survivors, strategy, depth, seed,
                    gen=None):
    """Empirical law of the depth-truncated edge configuration at time t,
    conditioned on survival.

    init is a finite set of sites (free process on Z); passing a
    TruncatedGenerator via gen runs the depth-L chain instead, with init
    read as a canonical key.  Returns (EmpiricalDistribution, diagnostics);
    diagnostics carry the stage layout, survivor counts, the survival
    estimate (`weight`), and a conservative effective sample size that
    counts replicas sharing an ancestor since the last resampling as one.
    """
    if not lam > 0:
        raise ParameterError(f"lambda must be > 0, got {lam}")
    if t < 0:
        raise ParameterError(f"duration must be >= 0, got {t}")
    if target_survivors < 1:
        raise ParameterError(f"target_survivors must be >= 1, got {target_survivors}")
    if depth < 1:
        raise ParameterError(f"depth must be >= 1, got {depth}")
    if not isinstance(strategy, (Rejection, Splitting)):
        raise ParameterError(f"unknown strategy {strategy!r}")
    if gen is not None:
        start_key = int(init)
        sites = sorted(-i for i in range(gen.L) if start_key >> i & 1)
    else:
        sites = _init_site_list(init)
        start_key = None

    if t == 0:
        zeta, _ = recenter(sites)
        key, clipped = clip_key(zeta, depth)
        dist = EmpiricalDistribution(depth, {key: float(target_survivors)},
                                     replica_count=target_survivors,
                                     meta={"lambda": lam, "t": t, "seed": seed})
        diag = {"strategy": _strategy_name(strategy), "stages": [],
                "survivor_counts": [], "weight": 1.0,
                "ess": float(target_survivors),
                "clipped": clipped * target_survivors}
        return dist, diag

    if isinstance(strategy, Rejection):
        return _rejection_estimate(sites, lam, t, target_survivors, depth,
                                   seed, gen, start_key)

    n = int(target_survivors)
    dt0 = strategy.checkpoint_dt
    if dt0 is None:
        dt0 = 1.0 / _rough_alpha(lam)
    if not dt0 > 0:
        raise ParameterError(f"checkpoint_dt must be > 0, got {dt0}")
    pop = _make_population(sites, lam, n, _words((seed, 0, 0), n), gen,
                           start_key)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0, 1)))
    alive, log_w, stages, counts, _, ess = _run_splitting(pop, n, t, dt0, rng)
    dist = EmpiricalDistribution(depth, replica_count=n,
                                 meta={"lambda": lam, "t": t, "seed": seed})
    clipped = 0
    for i in alive:
        key, c = pop.final_key(i, depth)
        dist.add(key)
        clipped += c > 0
    diag = {"strategy": _strategy_name(strategy), "stages": stages,
            "survivor_counts": counts, "weight": math.exp(log_w),
            "ess": ess, "clipped": clipped}
    return dist, diag


def _strategy_name(strategy):
    if isinstance(strategy, Rejection):
        return "Rejection"
    if isinstance(strategy, Splitting):
        dt = strategy.checkpoint_dt
        return f"Splitting(checkpoint_dt={dt if dt is not None else 'auto'})"
    return repr(strategy)


def _rejection_estimate(sites, lam, t, target, depth, seed, gen, start_key):
    ss = np.random.SeedSequence((seed, 0, 0))
    dist = EmpiricalDistribution(depth,
                                 meta={"lambda": lam, "t": t, "seed": seed})
    total = 0
    got = 0
    clipped = 0
    while got < target:
        batch = max(1024, 2 * (target - got))
        words = ss.generate_state(total + batch, np.uint64)[total:]
        pop = _make_population(sites, lam, batch, words, gen, start_key)
        pop.advance_to(t)
        for i in np.nonzero(pop.alive_mask())[0]:
            key, c = pop.final_key(i, depth)
            dist.add(key)
            clipped += c > 0
        got = int(dist.total)
        total += batch
        if (got == 0 and total >= 2_000_000) or total >= 50_000_000:
            raise ResolutionError(
                f"{got} survivors to t={t:g} after {total} replicas; "
                "rejection is hopeless here, use Splitting")
    dist.replica_count = total
    diag = {"strategy": "Rejection", "stages": [float(t)],
            "survivor_counts": [got], "weight": got / total,
            "ess": float(got), "clipped": clipped}
    return dist, diag


# ===== decay-rate estimation =====

def alpha_estimate(init, lam, t_grid, replicas, seed, gen=None,
                   checkpoint_dt=None):
    """(alpha_hat, stderr) from the slope of -log P(tau > t) over the grid.

    Survival probabilities come from one splitting run with checkpoints at
    the grid times.  The grid points share their population, so their log
    estimates form a random walk; differencing whitens it, and the slope is
    the variance-weighted least squares fit over the increments between
    consecutive grid points.  The first segment [0, t_1] is excluded (it
    carries the transient), which is why at least 3 grid points are needed.
    """
    grid = [float(x) for x in t_grid]
    if len(grid) < 3:
        raise ParameterError(f"t_grid needs >= 3 points, got {len(grid)}")
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] <= 0:
        raise ParameterError("t_grid must be positive and increasing")
    if replicas < 2:
        raise ParameterError(f"replicas must be >= 2, got {replicas}")
    if not lam > 0:
        raise ParameterError(f"lambda must be > 0, got {lam}")
    if gen is not None:
        start_key = int(init)
        sites = None
    else:
        sites = _init_site_list(init)
        start_key = None
    n = int(replicas)
    dt0 = checkpoint_dt if checkpoint_dt is not None else 1.0 / _rough_alpha(lam)
    pop = _make_population(sites, lam, n, _words((seed, 1, 0), n), gen,
                           start_key)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1, 1)))
    _, _, _, _, records, _ = _run_splitting(pop, n, grid[-1], dt0, rng,
                                            record_times=grid)
    pts = [records[tk] for tk in grid]
    num = 0.0
    den = 0.0
    usable = 0
    for k in range(1, len(grid)):
        w_prev, v_prev, _ = pts[k - 1]
        w_k, v_k, _ = pts[k]
        dv = v_k - v_prev
        if not (w_k > 0 and w_prev > 0 and dv > 0):
            continue
        dy = math.log(w_prev) - math.log(w_k)
        dt_seg = grid[k] - grid[k - 1]
        num += dy * dt_seg / dv
        den += dt_seg * dt_seg / dv
        usable += 1
    if usable < 2:
        raise ResolutionError(
            f"degenerate fit: only {usable} usable increments on the grid")
    return num / den, math.sqrt(1.0 / den)


# ===== h estimation =====

def h_estimate(states, alpha, t, replicas, *, lam=None, depth=None, seed=0,
               gen=None, nu=None):
    """h_hat(A) = exp(alpha t) P_hat(tau^A > t) for each canonical key.

    Survival probabilities come from splitting runs (one per state, each on
    its own stream).  With the exact alpha the raw values already sit in the
    nu.h = 1 normalization; passing nu (a probability over keys covering
    `states`) rescales so that sum nu(A) h_hat(A) = sum nu(A), removing the
    exp((alpha - alpha_true) t) scale error of an estimated alpha.
    """
    if gen is not None:
        lam = gen.lam
        depth = gen.L
    if lam is None or depth is None:
        raise ParameterError("free-process h_estimate needs lam and depth")
    if t < 0:
        raise ParameterError(f"duration must be >= 0, got {t}")
    keys = [int(k) for k in states]
    out = np.zeros(len(keys))
    for j, key in enumerate(keys):
        if t == 0:
            out[j] = 1.0
            continue
        sites = sorted(-i for i in range(depth) if key >> i & 1)
        if not sites:
            raise ParameterError(f"key {key} is empty")
        n = int(replicas)
        pop = _make_population(sites, lam, n, _words((seed, 2, j, 0), n),
                               gen, key)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 2, j, 1)))
        _, log_w, _, _, _, _ = _run_splitting(pop, n, float(t),
                                              1.0 / _rough_alpha(lam), rng)
        out[j] = math.exp(alpha * t + log_w)
    if nu is not None:
        lookup = nu.normalized() if hasattr(nu, "normalized") else dict(nu)
        mass = np.array([lookup.get(k, 0.0) for k in keys])
        if mass.sum() <= 0:
            raise ParameterError("nu puts no mass on the given states")
        scale = float(mass @ out) / float(mass.sum())
        if scale <= 0:
            raise ResolutionError("all survival estimates vanished")
        out /= scale
    return out


# ===== h-transformed chain =====

def q_process_simulate(spectral, gen, n_steps, seed):
    """Occupation measure of the h-transformed jump chain after n_steps.

    The transform q(x,y) = Q(x,y) h(y) / h(x) with the diagonal shifted by
    +alpha is an honest chain whose stationary law is nu.h renormalized;
    holding times are sampled, so the returned weights are time-weighted.
    """
    if max(spectral.residual_left, spectral.residual_right) > 1e-8:
        raise ParameterError(
            "spectral residuals too large for a trustworthy h-transform: "
            f"{spectral.residual_left:.2e}, {spectral.residual_right:.2e}")
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    if spectral.L != gen.L or spectral.policy != gen.policy:
        raise ParameterError("spectral result and generator disagree")
    h = spectral.h
    coo = gen.Q.tocoo()
    off = coo.row != coo.col
    qdata = coo.data[off] * h[coo.col[off]] / h[coo.row[off]]
    if np.any(~np.isfinite(qdata)) or np.any(qdata < 0):
        raise ResolutionError("negative transformed rate; h is not positive "
                              "to working precision")
    Qh = sp.csr_matrix((qdata, (coo.row[off], coo.col[off])),
                       shape=gen.Q.shape)
    exits = np.zeros(gen.nstates)
    K.row_sums(Qh.indptr, Qh.data, exits)
    if np.any(exits <= 0):
        raise ResolutionError("transformed chain has a rateless state; the "
                              "truncated chain admits no surviving motion")
    start = int(np.argmax(spectral.nu * h))
    occ = np.zeros(gen.nstates)
    state = _words((seed, 3, 0), 1)
    final = K.occupation_run(Qh.indptr, Qh.indices.astype(np.int64), Qh.data,
                             exits, start, int(n_steps), state, occ)
    if final < 0:
        raise ResolutionError("transformed chain absorbed; rounding broke "
                              "row conservation")
    weights = {index_to_key(i): float(w) for i, w in enumerate(occ) if w > 0}
    return EmpiricalDistribution(gen.L, weights, replica_count=1,
                                 meta={"lambda": gen.lam, "policy": gen.policy,
                                       "n_steps": int(n_steps), "seed": seed,
                                       "start_key": index_to_key(start)})
