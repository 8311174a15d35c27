"""The contact process seen from its rightmost infected site.

An edge configuration is a finite set of nonpositive offsets containing 0
(or the empty set after extinction).  Depth-L configurations are encoded as
canonical integer keys: bit i set means site -i is infected, so every
nonempty key is odd and 0 is reserved for the empty set.  Trajectories are
simulated on the graphical construction, recentered at read-off time, and
aggregated into empirical distributions that serialize to CSV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ParameterError, ResolutionError
from .graphical import SiteWindow, ceil_beta_t, evolve, _sorted_kernel_marks


def default_beta(lam):
    """Smallest integer jump-rate slope strictly above the good-point
    threshold 12*lambda*e."""
    return float(math.ceil(12.0 * lam * math.e) + 1)


# ===== domain types =====

class EdgeConfiguration(frozenset):
    """Offsets of infected sites relative to the rightmost one: all <= 0,
    containing 0 unless empty."""

    def __new__(cls, offsets=()):
        obj = super().__new__(cls, offsets)
        if obj and max(obj) != 0:
            raise ParameterError(
                f"edge configuration must have max offset 0, got {sorted(obj)}")
        return obj

    def __repr__(self):
        return f"EdgeConfiguration({{{', '.join(str(x) for x in sorted(self))}}})"


@dataclass(frozen=True)
class Finite:
    """Finite initial configuration, arbitrary integer sites."""

    sites: frozenset

    def __init__(self, sites):
        object.__setattr__(self, "sites", frozenset(int(x) for x in sites))


@dataclass(frozen=True)
class FullInterval:
    """All of [-M, 0]: the finite stand-in for an infinite initial
    configuration A with A ∩ -N infinite."""

    M: int

    def __post_init__(self):
        if self.M < 0:
            raise ParameterError(f"FullInterval depth must be >= 0, got {self.M}")


def geometric_gaps(M):
    """Sparse preset {0} ∪ {-2^k : 2^k <= M}; stresses the full-interval
    approximation, offered for experiments without any guarantee."""
    sites = {0}
    p = 1
    while p <= M:
        sites.add(-p)
        p *= 2
    return Finite(sites)


def full_interval_depth(beta, t):
    """Default FullInterval depth 4*ceil(beta*t): sites deeper than the
    lambda-path range cannot influence the edge view by time t."""
    return 4 * ceil_beta_t(beta, t)


def _init_sites(init):
    if isinstance(init, FullInterval):
        return list(range(-init.M, 1))
    if isinstance(init, Finite):
        return sorted(init.sites)
    return sorted(int(x) for x in init)


# ===== canonical keys =====

def recenter(eta):
    """(edge configuration, shift): offsets eta - max(eta), or (∅, 0)."""
    sites = [int(x) for x in eta]
    if not sites:
        return EdgeConfiguration(), 0
    m = max(sites)
    return EdgeConfiguration(x - m for x in sites), m


def encode_key(cfg, depth):
    """Canonical key of a depth-limited edge configuration.  Raises if any
    offset lies at or beyond -depth; use clip_key when truncation is meant."""
    key = 0
    for x in cfg:
        i = -int(x)
        if i < 0:
            raise ParameterError(f"positive offset {x} in edge configuration")
        if i >= depth:
            raise ParameterError(
                f"offset {x} beyond depth {depth}; clip_key handles truncation")
        key |= 1 << i
    if key and not key & 1:
        raise ParameterError("nonempty edge configuration must contain 0")
    return key


def clip_key(cfg, depth):
    """(key of cfg ∩ (-depth, 0], number of clipped offsets)."""
    key = 0
    clipped = 0
    for x in cfg:
        i = -int(x)
        if i >= depth:
            clipped += 1
        else:
            key |= 1 << i
    return key, clipped


def decode_key(key, depth):
    if key == 0:
        return EdgeConfiguration()
    if key < 0 or key >= 1 << depth:
        raise ParameterError(f"key {key} outside [0, 2^{depth})")
    if not key & 1:
        raise ParameterError(f"nonempty key {key} must be odd (bit 0 = site 0)")
    return EdgeConfiguration(-i for i in range(depth) if key >> i & 1)


# ===== empirical distributions =====

class EmpiricalDistribution:
    """Weighted counts over canonical keys at one depth.

    Weights are nonnegative reals (importance sampling and splitting produce
    fractional weights); merging is associative and commutative, so replica
    batches can be aggregated in any order.
    """

    def __init__(self, depth, weights=None, replica_count=0, meta=None):
        self.depth = int(depth)
        self.weights = {int(k): float(v) for k, v in (weights or {}).items()}
        self.replica_count = int(replica_count)
        self.meta = dict(meta or {})

    @property
    def total(self):
        return sum(self.weights.values())

    def add(self, key, weight=1.0):
        self.weights[key] = self.weights.get(key, 0.0) + weight

    def merge(self, other):
        if other.depth != self.depth:
            raise ParameterError(
                f"depth mismatch: {self.depth} vs {other.depth}")
        out = EmpiricalDistribution(self.depth, self.weights,
                                    self.replica_count + other.replica_count,
                                    self.meta)
        for k, v in other.weights.items():
            out.add(k, v)
        return out

    def normalized(self):
        tot = self.total
        if tot <= 0:
            raise ResolutionError("distribution has no mass to normalize")
        return {k: v / tot for k, v in self.weights.items() if v > 0}

    def __repr__(self):
        return (f"EmpiricalDistribution(depth={self.depth}, "
                f"{len(self.weights)} keys, total={self.total:g}, "
                f"replicas={self.replica_count})")


def tv_distance(p, q):
    """Total variation distance between two normalized distributions on the
    same depth: (1/2) sum |p - q| over keys."""
    if p.depth != q.depth:
        raise ParameterError(f"depth mismatch: {p.depth} vs {q.depth}")
    pn = p.normalized()
    qn = q.normalized()
    keys = set(pn) | set(qn)
    return 0.5 * sum(abs(pn.get(k, 0.0) - qn.get(k, 0.0)) for k in keys)


def cylinder_restrict(dist, m):
    """Pushforward onto the depth-m cylinder: mask all bits >= m."""
    if m > dist.depth:
        raise ParameterError(f"restriction depth {m} exceeds {dist.depth}")
    mask = (1 << m) - 1
    out = EmpiricalDistribution(m, replica_count=dist.replica_count,
                                meta=dist.meta)
    for k, v in dist.weights.items():
        out.add(k & mask, v)
    return out


def distribution_to_csv(dist, path):
    """CSV serialization: `# key=value ...` header, then key,count rows."""
    meta = dict(dist.meta)
    meta["depth"] = dist.depth
    meta["replicas"] = dist.replica_count
    fields = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(meta.items()))
    with open(path, "w") as fh:
        fh.write(f"# {fields}\n")
        fh.write("key,count\n")
        for k in sorted(dist.weights):
            fh.write(f"{k},{_fmt(dist.weights[k])}\n")


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def distribution_from_csv(path):
    meta = {}
    weights = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for item in line[1:].split():
                    k, _, v = item.partition("=")
                    try:
                        meta[k] = int(v)
                    except ValueError:
                        try:
                            meta[k] = float(v)
                        except ValueError:
                            meta[k] = v
                continue
            if line == "key,count":
                continue
            ks, _, vs = line.partition(",")
            weights[int(ks)] = float(vs)
    if "depth" not in meta:
        raise ParameterError(f"{path} has no depth in its header")
    depth = meta.pop("depth")
    replicas = meta.pop("replicas", 0)
    return EmpiricalDistribution(depth, weights, replicas, meta)


# ===== trajectory simulation =====

@dataclass(frozen=True)
class EdgeTrajectory:
    final: EdgeConfiguration
    survived: bool
    censored: bool
    clipped: int


def _stream_state(seed, stream):
    return np.random.SeedSequence((seed, stream)).generate_state(1, np.uint64)


def simulate_edge_trajectory(init, lam, t, depth, seed, stream=0, beta=None):
    """One replica of the edge process: evolve init on a fresh log to time
    t, recenter, truncate to depth.

    The window is sized so each side extends 2*ceil(beta*t) beyond the
    initial configuration; `censored` reports whether the occupied set ever
    touched it.  Offsets falling at or below -depth are counted in
    `clipped` rather than silently dropped.
    """
    if not lam > 0:
        raise ParameterError(f"lambda must be > 0, got {lam}")
    if t < 0:
        raise ParameterError(f"duration must be >= 0, got {t}")
    if depth < 1:
        raise ParameterError(f"depth must be >= 1, got {depth}")
    sites = _init_sites(init)
    if not sites:
        return EdgeTrajectory(EdgeConfiguration(), False, False, 0)
    if t == 0:
        zeta, _ = recenter(sites)
        key, clipped = clip_key(zeta, depth)
        return EdgeTrajectory(decode_key(key, depth), True, False, clipped)
    if beta is None:
        beta = default_beta(lam)
    guard = 2 * ceil_beta_t(beta, t)
    lo = sites[0] - guard
    hi = sites[-1] + guard
    state = _stream_state(seed, stream)
    ts, ks, ss, ds, n = _sorted_kernel_marks(lo, hi, 0.0, float(t), lam, state)
    occ = np.zeros(hi - lo + 1, np.int8)
    for x in sites:
        occ[x - lo] = 1
    touched = K.evolve_sweep(ts, ks, ss, ds, n, occ, lo, hi, 0.0, float(t))
    idx = np.nonzero(occ)[0]
    if idx.size == 0:
        return EdgeTrajectory(EdgeConfiguration(), False, bool(touched), 0)
    offsets = idx - idx[-1]
    clipped = int(np.count_nonzero(offsets <= -depth))
    final = EdgeConfiguration(int(o) for o in offsets if o > -depth)
    return EdgeTrajectory(final, True, bool(touched), clipped)


def edge_evolve(zeta, offset, log, s, t):
    """Edge-view step on an existing log: place zeta at absolute position
    `offset`, evolve over (s, t], recenter.  Returns (zeta', offset',
    censored); offset' is the new absolute rightmost site, so successive
    steps compose exactly like one long step."""
    eta = {x + offset for x in zeta}
    out = evolve(eta, log, s, t)
    zeta2, shift = recenter(out)
    return zeta2, shift, out.censored


def sample_edge_distribution(init, lam, t, depth, seed, replicas, beta=None):
    """Empirical law of the depth-truncated edge configuration at time t.

    Runs `replicas` independent trajectories (stream = replica index) and
    counts canonical keys, the empty set landing on key 0.  Returns the
    distribution plus per-batch diagnostics in meta: censored and clipped
    replica counts.
    """
    dist = EmpiricalDistribution(depth)
    censored = 0
    clipped = 0
    for r in range(replicas):
        traj = simulate_edge_trajectory(init, lam, t, depth, seed,
                                        stream=r, beta=beta)
        dist.add(encode_key(traj.final, depth))
        censored += traj.censored
        clipped += traj.clipped > 0
    dist.replica_count = replicas
    dist.meta = {"lambda": lam, "t": t, "seed": seed,
                 "censored": censored, "clipped": clipped}
    if isinstance(init, FullInterval):
        dist.meta["M"] = init.M
    return dist
