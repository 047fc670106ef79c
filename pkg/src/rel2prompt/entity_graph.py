"""Schema graph (tables + links and their inverses) and the heterogeneous relational entity graph."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownNode, UnknownRelation

logger = logging.getLogger('rel2prompt')

ROW_BITS = 32
ROW_MASK = (1 << ROW_BITS) - 1


@dataclass(frozen=True, order=True)
class Relation:
    """Edge type (src table, dst table) for one foreign key column; ``inverse`` marks the pk -> fk side."""
    src: str
    dst: str
    column: str
    inverse: bool = False

    @property
    def name(self):
        direction = 'rev' if self.inverse else 'fwd'
        return f"{self.src}-{self.column}-{self.dst}-{direction}"

    @property
    def pair(self):
        return (self.src, self.dst)

    def reversed(self):
        return Relation(self.dst, self.src, self.column, not self.inverse)


@dataclass
class SchemaGraph:
    nodes: list
    edges: list

    def neighbors(self, table):
        return sorted({r.dst for r in self.edges if r.src == table})

    def is_connected(self):
        if not self.nodes:
            return True
        seen = {self.nodes[0]}
        frontier = [self.nodes[0]]
        while frontier:
            table = frontier.pop()
            for other in self.neighbors(table):
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        return len(seen) == len(self.nodes)

    def to_dot(self):
        lines = ['digraph schema {']
        for table in self.nodes:
            lines.append(f'  "{table}";')
        for r in self.edges:
            style = ' [style=dashed]' if r.inverse else ''
            lines.append(f'  "{r.src}" -> "{r.dst}" [label="{r.column}"]{style};')
        lines.append('}')
        return '\n'.join(lines) + '\n'


def build_schema_graph(db):
    """R = L ∪ L⁻¹ with one forward and one inverse relation per foreign key column."""
    edges = []
    for name, table in db.tables.items():
        for fk in table.spec.foreign_keys:
            forward = Relation(name, fk.target_table, fk.column, False)
            edges.append(forward)
            edges.append(forward.reversed())
    return SchemaGraph(list(db.tables), sorted(edges))


@dataclass
class _Adjacency:
    # CSR keyed by destination row; each slice sorted by (source time, source row)
    indptr: np.ndarray
    src_rows: np.ndarray
    src_times: np.ndarray


@dataclass
class EntityGraph:
    table_names: list
    num_rows: dict
    times: dict
    relations: list
    adjacency: dict = field(repr=False)

    def __post_init__(self):
        self._ordinals = {t: i for i, t in enumerate(self.table_names)}
        self._incoming = {t: [r for r in self.relations if r.dst == t] for t in self.table_names}
        self._relation_index = {r: i for i, r in enumerate(self.relations)}

    # node ids
    def node_id(self, table, row):
        return (self._ordinals[table] << ROW_BITS) | int(row)

    def table_of(self, v):
        ordinal = int(v) >> ROW_BITS
        if ordinal >= len(self.table_names):
            raise UnknownNode(f"Node {v} has no table")
        return self.table_names[ordinal]

    def row_of(self, v):
        return int(v) & ROW_MASK

    def has_node(self, v):
        v = int(v)
        if v < 0:
            return False
        ordinal = v >> ROW_BITS
        return ordinal < len(self.table_names) and (v & ROW_MASK) < self.num_rows[self.table_names[ordinal]]

    def check_node(self, v):
        if not self.has_node(v):
            raise UnknownNode(f"Node {v} does not exist in the entity graph")

    def node_type(self, v):
        return self.table_of(v)

    def time_of(self, v):
        return int(self.times[self.table_of(v)][self.row_of(v)])

    def nodes(self, table=None):
        tables = [table] if table else self.table_names
        out = []
        for name in tables:
            ordinal = self._ordinals[name] << ROW_BITS
            out.extend(ordinal | row for row in range(self.num_rows[name]))
        return out

    @property
    def num_nodes(self):
        return sum(self.num_rows.values())

    # adjacency
    def relation_index(self, rel):
        if rel not in self._relation_index:
            raise UnknownRelation(f"Relation {rel} is not part of the entity graph")
        return self._relation_index[rel]

    def incoming_relations(self, table):
        return self._incoming.get(table, [])

    def _slice(self, v, rel):
        if rel not in self.adjacency:
            raise UnknownRelation(f"Relation {rel} is not part of the entity graph")
        self.check_node(v)
        if rel.dst != self.table_of(v):
            raise UnknownRelation(f"Relation {rel.name} does not end at table {self.table_of(v)} of node {v}")
        adj = self.adjacency[rel]
        row = self.row_of(v)
        start, stop = adj.indptr[row], adj.indptr[row + 1]
        return adj.src_rows[start:stop], adj.src_times[start:stop]

    def _ids(self, table, rows):
        ordinal = self._ordinals[table] << ROW_BITS
        return [ordinal | int(r) for r in rows]

    def neighbors(self, v, rel):
        """All w with (w, v) stored under ``rel``, ascending node id."""
        rows, _ = self._slice(v, rel)
        return self._ids(rel.src, np.sort(rows))

    def valid_neighbors_by_time(self, v, rel, t_star, strict=False):
        """Temporally valid neighbors ordered by (τ, id) ascending, found with one binary search."""
        rows, times = self._slice(v, rel)
        cut = np.searchsorted(times, t_star, side='left' if strict else 'right')
        return self._ids(rel.src, rows[:cut]), times[:cut]

    def degree(self, v, rel):
        rows, _ = self._slice(v, rel)
        return len(rows)

    def edge_list(self):
        """Every stored directed edge as (src id, dst id, relation), for inspection and oracles."""
        edges = []
        for rel in self.relations:
            adj = self.adjacency[rel]
            for dst_row in range(self.num_rows[rel.dst]):
                dst = self.node_id(rel.dst, dst_row)
                for src_row in adj.src_rows[adj.indptr[dst_row]:adj.indptr[dst_row + 1]]:
                    edges.append((self.node_id(rel.src, src_row), dst, rel))
        return edges

    def stats(self):
        return {
            'nodes': {t: self.num_rows[t] for t in self.table_names},
            'edges': {r.name: int(len(self.adjacency[r].src_rows)) for r in self.relations},
        }


def _csr(num_dst, dst_rows, src_rows, src_times):
    dst_rows = np.asarray(dst_rows, dtype=np.int64)
    src_rows = np.asarray(src_rows, dtype=np.int64)
    src_times = np.asarray(src_times, dtype=np.int64)
    order = np.lexsort((src_rows, src_times, dst_rows))
    counts = np.bincount(dst_rows, minlength=num_dst) if len(dst_rows) else np.zeros(num_dst, dtype=np.int64)
    indptr = np.zeros(num_dst + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return _Adjacency(indptr, src_rows[order], src_times[order])


def build_entity_graph(db, index):
    """
    Build the relational entity graph: one node per row, both edge orientations per resolvable key.

    :param db: The validated database.
    :type db: Database
    :param index: Key index consistent with ``db``.
    :type index: KeyIndex
    :return: The entity graph; dangling foreign keys add no edges.
    :rtype: EntityGraph
    """
    table_names = list(db.tables)
    num_rows = {t: db.num_rows(t) for t in table_names}
    times = {t: np.array([e.time for e in db.entities(t)], dtype=np.int64) for t in table_names}

    adjacency = {}
    for name in table_names:
        for fk in db.spec(name).foreign_keys:
            target_rows = index.pk_index[fk.target_table]
            fk_rows, pk_rows = [], []
            for pos, entity in enumerate(db.entities(name)):
                key = entity.fkeys[fk.column]
                if key is None or key not in target_rows:
                    continue
                fk_rows.append(pos)
                pk_rows.append(target_rows[key])
            forward = Relation(name, fk.target_table, fk.column, False)
            fk_times = times[name][fk_rows] if fk_rows else []
            pk_times = times[fk.target_table][pk_rows] if pk_rows else []
            # messages into the pk row come from referencing fk rows, and vice versa
            adjacency[forward] = _csr(num_rows[fk.target_table], pk_rows, fk_rows, fk_times)
            adjacency[forward.reversed()] = _csr(num_rows[name], fk_rows, pk_rows, pk_times)
            logger.info(f"Relation {forward.name}: {len(fk_rows)} edges in each direction")

    graph = EntityGraph(table_names, num_rows, times, sorted(adjacency), adjacency)
    logger.info(f"Built entity graph with {graph.num_nodes} nodes and {len(graph.relations)} relations")
    return graph


def temporal_neighbors(g, v, rel, t_star, strict=False):
    """
    {w : (w, v) stored under ``rel`` and τ(w) ≤ t*} (τ(w) < t* when ``strict``), ascending node id.

    :raises UnknownRelation: If ``rel`` is not a relation ending at the table of ``v``.
    """
    ids, _ = g.valid_neighbors_by_time(v, rel, t_star, strict)
    return sorted(ids)
