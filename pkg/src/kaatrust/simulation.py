"""Meeting simulator on a power-law social graph.

A community ``C`` lives inside a larger group ``G``.  Degrees are drawn from
truncated continuous power laws, wired with a configuration model that keeps
most of ``C``'s stubs inside ``C``.  Meetings then happen along social edges;
each one runs the common-history proof with threshold ``p`` and, if it
passes, a full service interaction.  The question is how far trust spreads
and how many outsiders it reaches.

Two engines produce identical decisions: one runs the real protocol with
signatures, the other keeps only the peer identifiers of each history.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from statistics import mean, median
from typing import Iterable, Mapping, Sequence

import numpy as np

from .che import Node, Phase, exchange_and_prove, force_pairing, open_session, run_service_interaction
from .identity import imprint, station_setup
from .policy import PolicyConfig, Role, decide, required_common

__all__ = [
    "CommunitySpec",
    "SocialGraph",
    "GraphConstructionError",
    "RoundMetrics",
    "SimMetrics",
    "SweepResult",
    "SimConfig",
    "DEFAULT_COMMUNITY",
    "DEFAULT_WORLD",
    "degree_sequence",
    "build_graph",
    "neighborhood",
    "distances_from",
    "run_meetings",
    "p_sweep",
    "cluster_rings",
    "metrics_csv",
    "rings_csv",
]

DEFAULT_MIX = 0.8
DEFAULT_BOOTSTRAP_PROB = 0.5
OUTSIDER_DISTANCE = 4
SIM_EPOCH = 1_700_000_000


class GraphConstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class CommunitySpec:
    size: int
    d_min: int
    d_max: int
    alpha: float

    def __post_init__(self):
        if not 1 <= self.d_min <= self.d_max < self.size:
            raise ValueError(f"need 1 <= d_min <= d_max < size, got {self}")
        if self.alpha <= 1:
            raise ValueError("power-law exponent must exceed 1")


DEFAULT_COMMUNITY = CommunitySpec(30, 6, 12, 2.4)
DEFAULT_WORLD = CommunitySpec(100, 5, 10, 2.4)


def _draw_degrees(spec: CommunitySpec, count: int, rng: np.random.Generator) -> list[int]:
    # inverse CDF of density ~ x^-alpha on [d_min, d_max]
    e = 1.0 - spec.alpha
    lo, hi = spec.d_min ** e, spec.d_max ** e
    u = rng.random(count)
    degrees = np.floor((lo + u * (hi - lo)) ** (1.0 / e)).astype(int)
    degrees = np.clip(degrees, spec.d_min, spec.d_max).tolist()
    if sum(degrees) % 2:
        room = [i for i, d in enumerate(degrees) if d < spec.d_max]
        if room:
            degrees[room[int(rng.integers(len(room)))]] += 1
        else:
            degrees[int(rng.integers(len(degrees)))] -= 1
    return degrees


def degree_sequence(spec: CommunitySpec, rng_seed) -> list[int]:
    """``spec.size`` degrees with an even sum, deterministic per seed."""
    return _draw_degrees(spec, spec.size, np.random.default_rng(rng_seed))


@dataclass
class SocialGraph:
    nodes: list[int]
    adj: dict[int, set[int]]
    community: frozenset
    target_degree: dict[int, int] = field(default_factory=dict)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted((u, v) for u in self.adj for v in self.adj[u] if u < v)

    def degree(self, x: int) -> int:
        return len(self.adj[x])

    def degree_deviation(self) -> dict[int, int]:
        return {x: self.degree(x) - t for x, t in self.target_degree.items() if self.degree(x) != t}

    def intra_share(self) -> float:
        """Mean fraction of a community node's edges that stay in the community."""
        shares = [len(self.adj[x] & self.community) / len(self.adj[x])
                  for x in self.community if self.adj[x]]
        return mean(shares) if shares else 0.0


def _match_stubs(stubs: list[int], adj: dict[int, set[int]], rng: np.random.Generator,
                 retries: int) -> list[int]:
    """Pair stubs into simple edges, rewiring around collisions.

    Returns the stubs left unmatched once the retry budget is spent.
    """
    pool_edges: list[tuple[int, int]] = []
    pending = list(stubs)
    if len(pending) % 2:
        pending.pop(int(rng.integers(len(pending))))
    for _ in range(retries):
        if not pending:
            break
        order = rng.permutation(len(pending))
        shuffled = [pending[i] for i in order]
        pending = []
        for u, v in zip(shuffled[::2], shuffled[1::2]):
            if u != v and v not in adj[u]:
                adj[u].add(v)
                adj[v].add(u)
                pool_edges.append((u, v))
                continue
            # double-edge swap with a random edge of this pool
            if pool_edges:
                j = int(rng.integers(len(pool_edges)))
                x, y = pool_edges[j]
                if len({u, v, x, y}) == 4 and x not in adj[u] and y not in adj[v]:
                    adj[x].discard(y)
                    adj[y].discard(x)
                    adj[u].add(x)
                    adj[x].add(u)
                    adj[v].add(y)
                    adj[y].add(v)
                    pool_edges[j] = (u, x)
                    pool_edges.append((v, y))
                    continue
            pending.extend((u, v))
    return pending


def build_graph(community: CommunitySpec, world: CommunitySpec, rng_seed,
                mix: float = DEFAULT_MIX, retries: int = 200) -> SocialGraph:
    """Community nodes are ``0..c-1``; the rest of the world follows.

    A community node keeps ``round(mix * degree)`` stubs for community
    partners; its other stubs join the world pool with every outsider's stubs.
    """
    if community.size > world.size:
        raise ValueError("community cannot be larger than the world")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    c_deg = _draw_degrees(community, community.size, rng)
    outsiders = world.size - community.size
    w_deg = _draw_degrees(world, outsiders, rng) if outsiders else []
    nodes = list(range(world.size))
    adj: dict[int, set[int]] = {x: set() for x in nodes}
    targets = dict(enumerate(c_deg + w_deg))

    intra, cross = [], []
    for x, d in enumerate(c_deg):
        k = math.floor(mix * d + 0.5)
        intra += [x] * k
        cross += [x] * (d - k)
    for offset, d in enumerate(w_deg):
        cross += [community.size + offset] * d

    left = _match_stubs(intra, adj, rng, retries) + _match_stubs(cross, adj, rng, retries)
    total = sum(targets.values())
    if len(left) > max(4, 0.02 * total):
        raise GraphConstructionError(
            f"{len(left)} of {total} stubs unmatched after {retries} rewiring rounds "
            f"(community={community}, world={world}, mix={mix})")
    return SocialGraph(nodes, adj, frozenset(range(community.size)), targets)


def neighborhood(graph, x, i: int) -> set:
    """Nodes within ``i`` hops of ``x`` (``x`` itself excluded)."""
    adj = graph.adj if isinstance(graph, SocialGraph) else graph
    if x not in adj:
        raise KeyError(f"unknown node {x!r}")
    if i < 1:
        raise ValueError("ring index starts at 1")
    return set(distances_from(adj, [x], i)) - {x}


def distances_from(adj: Mapping, sources: Iterable, max_depth: int) -> dict:
    """Multi-source BFS; returns node -> hop distance for distances <= max_depth."""
    dist = {s: 0 for s in sources}
    queue = deque(dist)
    while queue:
        u = queue.popleft()
        if dist[u] == max_depth:
            continue
        for v in adj.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


# -- meeting engines ----------------------------------------------------------

class _LedgerEngine:
    """Trusted bookkeeping: histories reduced to FIFO lists of peer ids."""

    def __init__(self, nodes: Sequence[int], capacity: int, seed):
        self.histories = {x: deque(maxlen=capacity) for x in nodes}

    def history_size(self, x) -> int:
        return len(self.histories[x])

    def pair(self, u, v, now) -> None:
        self.histories[u].append(v)
        self.histories[v].append(u)

    def prove(self, u, v, now) -> int:
        return len(set(self.histories[u]) & set(self.histories[v]))

    def serve(self, u, v, now) -> None:
        # u receives, v provides; all decisions yes
        self.histories[v].append(u)
        self.histories[u].append(v)


class _CryptoEngine:
    """Full protocol: IBE channels, signatures and proof verification."""

    def __init__(self, nodes: Sequence[int], capacity: int, seed):
        station = station_setup("sim-station", seed=int(seed))
        self.now = SIM_EPOCH
        policy = PolicyConfig(p_receiver=0, p_provider=0, history_size=capacity)
        self.nodes = {x: Node.create(imprint(station, f"n{x}"), policy, seed=(int(seed) << 32) | x,
                                     clock=lambda: self.now) for x in nodes}
        self.sessions = None

    def history_size(self, x) -> int:
        return len(self.nodes[x].history)

    def pair(self, u, v, now) -> None:
        self.now = now
        a, b = self.nodes[u], self.nodes[v]
        a.pairing_confirmed = b.pairing_confirmed = True
        force_pairing(*open_session(a, b), now=now)

    def prove(self, u, v, now) -> int:
        self.now = now
        a, b = open_session(self.nodes[u], self.nodes[v])
        exchange_and_prove(a, b, policy_p=0, now=now)
        if a.phase is not Phase.PROVEN or b.phase is not Phase.PROVEN or a.common_set != b.common_set:
            raise RuntimeError(f"honest sessions n{u}/n{v} failed the proof phase")
        self.sessions = (a, b)
        return a.verified_count

    def serve(self, u, v, now) -> None:
        a, b = self.sessions
        run_service_interaction(a, b, "sim", True, True, True, now=now)
        self.sessions = None


@dataclass
class RoundMetrics:
    round: int
    meetings: int
    trust_edges: int
    mean_common: float
    outsiders_lt4: int
    ring_sizes: dict  # sampled x -> [|V_1|, ..., |V_r|] in the community trust graph


@dataclass
class SimMetrics:
    config: dict
    rounds: list[RoundMetrics]
    bootstrap_edges: set
    auto_edges: set
    formations: list  # (round, u, v, verified_common, threshold) per successful meeting
    degree_deviation: dict

    def trust_adjacency(self, include_bootstrap: bool = True) -> dict:
        adj: dict = {}
        edges = self.auto_edges | self.bootstrap_edges if include_bootstrap else self.auto_edges
        for u, v in edges:
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
        return adj

    @property
    def outsiders_lt4(self) -> int:
        return self.rounds[-1].outsiders_lt4 if self.rounds else 0


def _outsiders(community: frozenset, auto_adj: dict, distance: int) -> int:
    reached = distances_from(auto_adj, community, distance - 1)
    return sum(1 for x in reached if x not in community)


def _induced(adj: dict, members: frozenset) -> dict:
    return {u: adj.get(u, set()) & members for u in members}


def _ring_sizes(adj: dict, x, max_ring: int) -> list[int]:
    dist = distances_from(adj, [x], max_ring)
    return [sum(1 for y, d in dist.items() if 0 < d <= i) for i in range(1, max_ring + 1)]


def run_meetings(g: SocialGraph, policy: PolicyConfig, rounds: int, rng_seed,
                 full_crypto: bool = False, bootstrap_prob: float = DEFAULT_BOOTSTRAP_PROB,
                 ring_samples: int = 5, max_ring: int = 4) -> SimMetrics:
    """Simulate ``rounds`` rounds of meetings along the social edges.

    Before round 1 every social edge is hand-paired with probability
    ``bootstrap_prob``.  Each round samples ceil(|E|/4) distinct edges; the
    sampler's random stream never depends on meeting outcomes, so runs with
    different thresholds see the same meetings.
    """
    sampler_seq, crypto_seq = np.random.SeedSequence(rng_seed).spawn(2)
    sampler = np.random.default_rng(sampler_seq)
    crypto_seed = int(crypto_seq.generate_state(1)[0])
    engine = (_CryptoEngine if full_crypto else _LedgerEngine)(g.nodes, policy.history_size, crypto_seed)
    p_star = max(required_common(policy, Role.RECEIVER, True), required_common(policy, Role.PROVIDER, True))

    edges = g.edges
    community_sorted = sorted(g.community)
    picks = min(ring_samples, len(community_sorted))
    sampled_x = sorted(int(x) for x in sampler.choice(community_sorted, size=picks, replace=False)) if picks else []

    bootstrap: set = set()
    coins = sampler.random(len(edges))
    for (u, v), coin in zip(edges, coins):
        if coin < bootstrap_prob:
            engine.pair(u, v, SIM_EPOCH)
            bootstrap.add((u, v))

    config = {
        "rounds": rounds, "seed": rng_seed, "p": p_star, "mode": policy.mode.value,
        "history_size": policy.history_size, "bootstrap_prob": bootstrap_prob,
        "full_crypto": full_crypto, "nodes": len(g.nodes), "community": len(g.community),
        "edges": len(edges), "ring_samples": sampled_x,
    }
    auto: set = set()
    formations = []
    history = []
    per_round = math.ceil(len(edges) / 4) if edges else 0
    for rnd in range(1, rounds + 1):
        now = SIM_EPOCH + rnd * 3600
        chosen = sampler.choice(len(edges), size=per_round, replace=False) if per_round else []
        flips = sampler.random(per_round)
        formed = 0
        commons = []
        for idx, flip in zip(chosen, flips):
            u, v = edges[int(idx)]
            if flip < 0.5:
                u, v = v, u
            verified = engine.prove(u, v, now)
            commons.append(verified)
            allowed = all(
                decide(policy, role, verified, True, policy.min_score, False,
                       history_size=engine.history_size(x)).allowed
                for role, x in ((Role.RECEIVER, u), (Role.PROVIDER, v)))
            if not allowed:
                continue
            engine.serve(u, v, now)
            formed += 1
            formations.append((rnd, u, v, verified, p_star))
            key = (min(u, v), max(u, v))
            if key not in bootstrap:
                auto.add(key)
        auto_adj = _adjacency(auto)
        trust_adj = _induced(_adjacency(auto | bootstrap), g.community)
        history.append(RoundMetrics(
            rnd, per_round, formed, mean(commons) if commons else 0.0,
            _outsiders(g.community, auto_adj, OUTSIDER_DISTANCE),
            {x: _ring_sizes(trust_adj, x, max_ring) for x in sampled_x}))
    return SimMetrics(config, history, bootstrap, auto, formations, g.degree_deviation())


def _adjacency(edges: Iterable[tuple]) -> dict:
    adj: dict = {}
    for u, v in edges:
        adj.setdefault(u, set()).add(v)
        adj.setdefault(v, set()).add(u)
    return adj


def cluster_rings(g: SocialGraph, metrics: SimMetrics, max_ring: int) -> list[float]:
    """Mean |V_i(x)| over every community node x.

    Rings live in the final trust graph restricted to the community.
    """
    adj = _induced(metrics.trust_adjacency(), g.community)
    sizes = [_ring_sizes(adj, x, max_ring) for x in sorted(g.community)]
    return [mean(s[i] for s in sizes) for i in range(max_ring)]


@dataclass
class SweepResult:
    rows: list  # (p, i, mean_size, seed)
    curve: list  # (p, i, mean over seeds)
    cluster_median: dict  # p -> median over seeds of mean |V_max_ring|


def p_sweep(g: SocialGraph | None, p_values: Sequence[int], rounds: int, seeds: Sequence[int],
            base_policy: PolicyConfig | None = None, max_ring: int = 4,
            community: CommunitySpec = DEFAULT_COMMUNITY, world: CommunitySpec = DEFAULT_WORLD,
            mix: float = DEFAULT_MIX, bootstrap_prob: float = DEFAULT_BOOTSTRAP_PROB) -> SweepResult:
    """Ring growth around community nodes as a function of the threshold.

    With ``g`` given every seed reuses that graph; with ``None`` each seed
    builds its own graph from ``community``/``world``.
    """
    base_policy = base_policy or PolicyConfig()
    rows = []
    for seed in seeds:
        graph = g if g is not None else build_graph(community, world, seed, mix)
        for p in p_values:
            policy = base_policy.replace(p_receiver=p, p_provider=p)
            metrics = run_meetings(graph, policy, rounds, seed, bootstrap_prob=bootstrap_prob)
            for i, size in enumerate(cluster_rings(graph, metrics, max_ring), 1):
                rows.append((p, i, size, seed))
    curve = []
    cluster_median = {}
    for p in p_values:
        for i in range(1, max_ring + 1):
            curve.append((p, i, mean(r[2] for r in rows if r[0] == p and r[1] == i)))
        cluster_median[p] = median(r[2] for r in rows if r[0] == p and r[1] == max_ring)
    return SweepResult(rows, curve, cluster_median)


def _comment_block(config: Mapping) -> list[str]:
    return [f"# {key}={config[key]}" for key in config]


def metrics_csv(runs: Sequence[SimMetrics], extra: Mapping | None = None) -> str:
    """metrics.csv: one row per (seed, round); config echoed as '#' lines."""
    extra = dict(extra or {})
    lines = _comment_block(extra)
    for run in runs:
        lines += _comment_block({f"seed{run.config['seed']}.{k}": v for k, v in run.config.items()
                                 if k not in extra and k != "seed"})
    lines.append("round,trust_edges,mean_common,outsiders_lt4,seed")
    for run in runs:
        for r in run.rounds:
            lines.append(f"{r.round},{r.trust_edges},{r.mean_common:.6f},{r.outsiders_lt4},{run.config['seed']}")
    return "\n".join(lines) + "\n"


def rings_csv(sweep: SweepResult, config: Mapping | None = None) -> str:
    lines = _comment_block(dict(config or {}))
    lines.append("p,i,mean_size,seed")
    for p, i, size, seed in sweep.rows:
        lines.append(f"{p},{i},{size:.6f},{seed}")
    return "\n".join(lines) + "\n"


@dataclass
class SimConfig:
    """Everything ``simulate`` needs, loadable from key=value text."""

    community: CommunitySpec = DEFAULT_COMMUNITY
    world: CommunitySpec = DEFAULT_WORLD
    p: int = 4
    rounds: int = 20
    seeds: int = 20
    history_size: int = 22
    mix: float = DEFAULT_MIX
    bootstrap_prob: float = DEFAULT_BOOTSTRAP_PROB
    p_values: tuple = (0, 1, 2, 3, 4, 5, 6)
    max_ring: int = 4
    full_crypto: bool = False

    @classmethod
    def from_text(cls, text: str) -> SimConfig:
        from .policy import parse_key_values

        values = parse_key_values(text)
        cfg = cls()
        try:
            for key, raw in values.items():
                if key in ("community", "world"):
                    size, d_min, d_max, alpha = (s.strip() for s in raw.split(","))
                    setattr(cfg, key, CommunitySpec(int(size), int(d_min), int(d_max), float(alpha)))
                elif key == "p_values":
                    cfg.p_values = tuple(int(s) for s in raw.split(",") if s.strip())
                elif key in ("mix", "bootstrap_prob"):
                    setattr(cfg, key, float(raw))
                elif key == "full_crypto":
                    cfg.full_crypto = raw.lower() in ("1", "true", "yes")
                elif key in ("p", "rounds", "seeds", "history_size", "max_ring"):
                    setattr(cfg, key, int(raw))
                else:
                    raise ValueError(f"unknown simulation key {key!r}")
        except ValueError as exc:
            raise ValueError(f"bad simulation config: {exc}") from None
        return cfg

    def as_dict(self) -> dict:
        c, w = self.community, self.world
        return {
            "community": f"{c.size},{c.d_min},{c.d_max},{c.alpha}",
            "world": f"{w.size},{w.d_min},{w.d_max},{w.alpha}",
            "p": self.p, "rounds": self.rounds, "seeds": self.seeds,
            "history_size": self.history_size, "mix": self.mix,
            "bootstrap_prob": self.bootstrap_prob,
            "p_values": ",".join(map(str, self.p_values)), "max_ring": self.max_ring,
            "full_crypto": self.full_crypto,
        }
