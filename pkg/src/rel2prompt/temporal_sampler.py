"""Leakage-free layered neighbor sampling around a seed entity at a seed time."""
import logging
from dataclasses import dataclass, field

from .errors import ConfigError
from .utils import Utils

logger = logging.getLogger('rel2prompt')

STRATEGIES = ('uniform', 'last')


@dataclass(frozen=True)
class SamplerConfig:
    fanouts: tuple = (16, 16)
    strategy: str = 'last'
    strict_time: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'fanouts', tuple(int(f) for f in self.fanouts))
        if not self.fanouts:
            raise ConfigError("Sampler fanouts must not be empty")
        if any(f < 0 for f in self.fanouts):
            raise ConfigError(f"Sampler fanouts must be >= 0, got {list(self.fanouts)}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"Unknown temporal strategy '{self.strategy}', expected one of {STRATEGIES}")

    @classmethod
    def from_pipeline_config(cls, pipeline_config):
        section = pipeline_config['sampler']
        return cls(tuple(section['fanouts']), section['strategy'], bool(section['strict_time']), int(section['rng_seed']))


@dataclass
class SampledSubgraph:
    seed: int
    seed_time: int
    hops: dict
    edges: list
    node_ids: list = field(default_factory=list)
    local: dict = field(default_factory=dict)

    def __post_init__(self):
        # local ordinals follow ascending global id, which groups nodes by table
        self.node_ids = sorted(self.hops)
        self.local = {v: i for i, v in enumerate(self.node_ids)}

    def __len__(self):
        return len(self.node_ids)

    def __contains__(self, v):
        return v in self.hops

    def nodes_of(self, g, table):
        return [v for v in self.node_ids if g.table_of(v) == table]

    def edges_of(self, rel):
        return [(w, v) for w, v, r in self.edges if r == rel]

    def relations(self):
        return sorted({r for _, _, r in self.edges})

    def stats(self, g):
        per_table = {}
        for v in self.node_ids:
            per_table[g.table_of(v)] = per_table.get(g.table_of(v), 0) + 1
        per_relation = {}
        for _, _, r in self.edges:
            per_relation[r.name] = per_relation.get(r.name, 0) + 1
        per_hop = {}
        for hop in self.hops.values():
            per_hop[hop] = per_hop.get(hop, 0) + 1
        return {
            'seed': self.seed,
            'seed_time': self.seed_time,
            'num_nodes': len(self.node_ids),
            'num_edges': len(self.edges),
            'nodes_per_table': per_table,
            'edges_per_relation': per_relation,
            'nodes_per_hop': {str(k): v for k, v in sorted(per_hop.items())},
        }


def _select(g, cfg, seed, hop, rel, v, candidates, fanout):
    if fanout == 0 or not candidates:
        return []
    if len(candidates) <= fanout:
        return list(candidates)
    if cfg.strategy == 'last':
        # candidates are sorted by (τ, id); the tail holds the most recent
        return list(candidates[-fanout:])
    rng = Utils.derive_rng(cfg.rng_seed, seed, hop, g.relation_index(rel), v)
    picked = sorted(rng.choice(len(candidates), size=fanout, replace=False).tolist())
    return [candidates[i] for i in picked]


def induced_edges(g, hops):
    edges = []
    for v in sorted(hops):
        for rel in g.incoming_relations(g.table_of(v)):
            for w in g.neighbors(v, rel):
                if w in hops:
                    edges.append((w, v, rel))
    return edges


def sample_subgraph(g, seed, t_star, cfg):
    """
    Sample a temporal subgraph around ``seed`` at seed time ``t_star``.

    Breadth-first over hops; at hop ℓ every frontier node keeps up to ``fanouts[ℓ]`` temporally
    valid neighbors per incoming relation. The seed is always present; every other node has
    τ ≤ t* (τ < t* in strict mode). All induced edges among sampled nodes are kept.

    :raises UnknownNode: If ``seed`` is not in the graph.
    """
    g.check_node(seed)
    hops = {seed: 0}
    frontier = [seed]
    for hop, fanout in enumerate(cfg.fanouts):
        next_frontier = []
        for v in sorted(frontier):
            for rel in g.incoming_relations(g.table_of(v)):
                candidates, _ = g.valid_neighbors_by_time(v, rel, t_star, cfg.strict_time)
                for w in _select(g, cfg, seed, hop, rel, v, candidates, fanout):
                    if w not in hops:
                        hops[w] = hop + 1
                        next_frontier.append(w)
        frontier = next_frontier
    return SampledSubgraph(seed, t_star, hops, induced_edges(g, hops))


def extend_subgraph(g, sub, extra):
    """Add nodes (id -> hop) to a sampled subgraph and recompute induced edges."""
    hops = dict(sub.hops)
    for v, hop in extra.items():
        g.check_node(v)
        hops.setdefault(v, hop)
    if len(hops) == len(sub.hops):
        return sub
    return SampledSubgraph(sub.seed, sub.seed_time, hops, induced_edges(g, hops))
