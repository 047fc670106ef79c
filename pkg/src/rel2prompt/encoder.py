"""Column encoders for the initial node states, heterogeneous GraphSAGE message passing, mean pooling and the projection MLP."""
import logging
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import diff
from .errors import ConfigError, SchemaMismatch, ShapeMismatch, UnfittedEncoder
from .utils import MISSING, NEG_INF, POS_INF, Utils

logger = logging.getLogger('rel2prompt')

UNK_ROW = 0
MISSING_ROW = 1

# parameter name prefixes; the first two together form the graph encoder
COLUMN_PREFIX = 'encoder.'
GNN_PREFIX = 'gnn.'
PROJECT_PREFIX = 'project.'
MASK_PREFIX = 'mask.'


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden_dim: int = 128
    column_dim: int = 128
    text_buckets: int = 1024
    dropout: float = 0.1
    projection_dim: int = 64
    relative_time: bool = True
    time_scale: float = 2592000.0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"Encoder needs at least one layer, got {self.layers}")
        for name in ('hidden_dim', 'column_dim', 'text_buckets', 'projection_dim'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder.{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"encoder.dropout must be in [0, 1), got {self.dropout}")
        if self.time_scale <= 0:
            raise ConfigError(f"encoder.time_scale must be > 0, got {self.time_scale}")

    @classmethod
    def from_pipeline_config(cls, pipeline_config):
        section = pipeline_config['encoder']
        return cls(
            layers=int(section['layers']),
            hidden_dim=int(section['hidden_dim']),
            column_dim=int(section['column_dim']),
            text_buckets=int(section['text_buckets']),
            dropout=float(section['dropout']),
            projection_dim=int(section['projection_dim']),
            relative_time=bool(section['relative_time']),
            time_scale=float(section['time_scale']),
            init_scale=float(section['init_scale']),
        )


def text_tokens(text):
    return re.split(r'\s+', str(text).lower().strip()) if str(text).strip() else []


class ColumnEncoder:
    """
    Train-split statistics for every feature column of every table.

    Numeric and timestamp columns become ``[z-score, missing flag]``; categorical columns become
    a row id into an embedding table whose rows 0 and 1 are UNK and MISSING; text columns
    become a bag of hashed lowercase whitespace tokens.
    """

    def __init__(self, text_buckets=1024):
        self.text_buckets = text_buckets
        self.stats = None
        self.table_names = []

    @property
    def fitted(self):
        return self.stats is not None

    def fit(self, db, cutoff=POS_INF):
        """Fit on rows with τ < ``cutoff`` (non-temporal rows always count)."""
        self.table_names = list(db.tables)
        self.stats = {}
        for name in self.table_names:
            spec = db.spec(name)
            rows = [e for e in db.entities(name) if e.time == NEG_INF or e.time < cutoff]
            table_stats = {}
            for column in spec.feature_columns:
                pos = spec.column_index(column.name)
                values = [e.attrs[pos] for e in rows if e.attrs[pos] is not MISSING]
                if column.kind in ('numeric', 'timestamp'):
                    array = np.array(values, dtype=np.float64)
                    mean = float(array.mean()) if array.size else 0.0
                    std = float(array.std()) if array.size else 1.0
                    table_stats[column.name] = {'kind': 'numeric', 'mean': mean, 'std': std if std > 0 else 1.0}
                elif column.kind == 'categorical':
                    categories = sorted(set(str(v) for v in values))
                    table_stats[column.name] = {'kind': 'categorical',
                                                'index': {c: i + 2 for i, c in enumerate(categories)}}
                else:
                    table_stats[column.name] = {'kind': 'text'}
            self.stats[name] = table_stats
        logger.info(f"Fitted column encoders on rows before {Utils.format_timestamp(cutoff)}")
        return self

    def save(self, path):
        self.check()
        Utils.dump_json({'text_buckets': self.text_buckets, 'tables': self.stats}, path)
        logger.info(f"Wrote column statistics for {len(self.stats)} tables to {path}")

    @classmethod
    def load(cls, path, db):
        """
        Read statistics written by :meth:`save`.

        :raises SchemaMismatch: If the file does not parse or its tables and columns differ from ``db``.
        """
        try:
            with open(path, 'r', encoding='utf-8') as file:
                raw = json.load(file)
            encoder = cls(int(raw['text_buckets']))
            stats = dict(raw['tables'])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise SchemaMismatch(f"Column statistics {path} do not parse: {e}") from e
        encoder.table_names = list(db.tables)
        encoder.stats = {}
        for name in encoder.table_names:
            expected = [c.name for c in db.spec(name).feature_columns]
            if sorted(stats.get(name, {})) != sorted(expected):
                raise SchemaMismatch(f"Column statistics {path} do not match the feature columns of table {name}")
            # the file has sorted keys; encoding follows feature-column order
            encoder.stats[name] = {column: stats[name][column] for column in expected}
        return encoder

    def check(self):
        if not self.fitted:
            raise UnfittedEncoder("Column encoder statistics must be fitted before encoding")

    def columns(self, table):
        self.check()
        return list(self.stats[table])

    def num_categories(self, table, column):
        return len(self.stats[table][column]['index']) + 2

    def features(self, db, table, rows):
        """Raw per-column feature arrays for the given row positions, in feature-column order."""
        self.check()
        spec = db.spec(table)
        entities = db.entities(table)
        out = []
        for column, stats in self.stats[table].items():
            pos = spec.column_index(column)
            cells = [entities[r].attrs[pos] for r in rows]
            if stats['kind'] == 'numeric':
                array = np.zeros((len(rows), 2))
                for i, cell in enumerate(cells):
                    if cell is MISSING:
                        array[i, 1] = 1.0
                    else:
                        array[i, 0] = (float(cell) - stats['mean']) / stats['std']
                out.append((column, 'numeric', array))
            elif stats['kind'] == 'categorical':
                ids = np.array([MISSING_ROW if cell is MISSING else stats['index'].get(str(cell), UNK_ROW)
                                for cell in cells], dtype=np.int64)
                out.append((column, 'categorical', ids))
            else:
                array = np.zeros((len(rows), self.text_buckets))
                for i, cell in enumerate(cells):
                    if cell is MISSING:
                        continue
                    for token in text_tokens(cell):
                        array[i, Utils.stable_hash(token, self.text_buckets)] += 1.0
                out.append((column, 'text', array))
        return out


def _table_blocks(graph, node_ids):
    # node ids are sorted, so each table's nodes form one contiguous block
    blocks = []
    for i, v in enumerate(node_ids):
        table = graph.table_of(v)
        if not blocks or blocks[-1][0] != table:
            blocks.append((table, i, i))
        blocks[-1] = (table, blocks[-1][1], i + 1)
    return blocks


class RelationalEncoder:
    """
    Column encoders with heterogeneous message passing, and the projection into the decoder width, over a shared ParameterStore.

    One GNN layer, for destination table D::

        agg_D = Σ_R A_R · (H_src(R) · W_msg[R])      relations R ending at D, sorted
        H'_D  = relu([H_D ; agg_D] · W_self[D] + b[D]), then dropout while training

    where A_R counts the sampled edges of relation R between local nodes.
    """

    def __init__(self, db, graph, store, cfg, columns):
        columns.check()
        self.db = db
        self.graph = graph
        self.store = store
        self.cfg = cfg
        self.columns = columns
        self._build_parameters()

    def _weight(self, name, fan_in, fan_out):
        return self.store.get_or_create(name, (fan_in, fan_out), std=self.cfg.init_scale / math.sqrt(fan_in))

    def _build_parameters(self):
        c, d, dl = self.cfg.column_dim, self.cfg.hidden_dim, self.cfg.projection_dim
        for table in self.graph.table_names:
            for column, stats in self.columns.stats[table].items():
                base = f'{COLUMN_PREFIX}col.{table}.{column}'
                if stats['kind'] == 'numeric':
                    self._weight(f'{base}.num', 2, c)
                elif stats['kind'] == 'categorical':
                    self.store.get_or_create(f'{base}.emb', (self.columns.num_categories(table, column), c),
                                             std=self.cfg.init_scale / math.sqrt(c))
                else:
                    self._weight(f'{base}.text', self.cfg.text_buckets, c)
            self.store.get_or_create(f'{COLUMN_PREFIX}bias.{table}', (c,))
            if self.cfg.relative_time:
                self._weight(f'{COLUMN_PREFIX}time.{table}', 2, c)
            self._weight(f'{MASK_PREFIX}lift.{table}', d, c)
        self.store.get_or_create(f'{MASK_PREFIX}h', (d,), std=self.cfg.init_scale)

        for layer in range(self.cfg.layers):
            d_in = c if layer == 0 else d
            for rel in self.graph.relations:
                self._weight(f'{GNN_PREFIX}{layer}.msg.{rel.name}', d_in, d)
            for table in self.graph.table_names:
                self._weight(f'{GNN_PREFIX}{layer}.self.{table}', d_in + d, d)
                self.store.get_or_create(f'{GNN_PREFIX}{layer}.bias.{table}', (d,))

        self._weight(f'{PROJECT_PREFIX}w1', d, dl)
        self.store.get_or_create(f'{PROJECT_PREFIX}b1', (dl,))
        self._weight(f'{PROJECT_PREFIX}w2', dl, dl)
        self.store.get_or_create(f'{PROJECT_PREFIX}b2', (dl,))
        logger.info(f"Encoder has {self.store.num_parameters()} parameters in {len(self.store)} arrays")

    # h(0)
    def mask_lift(self, table):
        """The shared mask vector lifted into the column-encoder space of ``table``."""
        return diff.matmul(self.store[f'{MASK_PREFIX}h'], self.store[f'{MASK_PREFIX}lift.{table}'])

    def encode_rows(self, table, rows, masked_cells=None):
        """
        Column-encoder output for rows of one table, ``len(rows) × column_dim``.

        :param masked_cells: Optional per-row sets of column names whose contribution is replaced by the mask lift.
        """
        c = self.cfg.column_dim
        if not rows:
            return diff.constant(np.zeros((0, c)))
        total = diff.Value(np.zeros((len(rows), c)), requires_grad=False) + self.store[f'{COLUMN_PREFIX}bias.{table}']
        lift = self.mask_lift(table) if masked_cells else None
        for column, kind, features in self.columns.features(self.db, table, rows):
            base = f'{COLUMN_PREFIX}col.{table}.{column}'
            if kind == 'numeric':
                contribution = diff.matmul(diff.constant(features), self.store[f'{base}.num'])
            elif kind == 'categorical':
                contribution = diff.take(self.store[f'{base}.emb'], features)
            else:
                contribution = diff.matmul(diff.constant(features), self.store[f'{base}.text'])
            if masked_cells:
                hidden = np.array([[1.0 if column in cells else 0.0] for cells in masked_cells])
                if hidden.any():
                    contribution = contribution * diff.constant(1.0 - hidden) + diff.constant(hidden) * lift
            total = total + contribution
        return total

    def encode_columns(self, v):
        """Column-encoder state of one node, before any masking or time feature."""
        self.columns.check()
        return self.encode_rows(self.graph.table_of(v), [self.graph.row_of(v)])[0]

    def time_features(self, table, node_ids, t_star):
        scale = self.cfg.time_scale
        features = np.zeros((len(node_ids), 2))
        for i, v in enumerate(node_ids):
            tau = self.graph.time_of(v)
            if tau == NEG_INF or t_star in (NEG_INF, POS_INF):
                features[i, 1] = 1.0
            else:
                age = (t_star - tau) / scale
                features[i, 0] = math.copysign(math.log1p(abs(age)), age)
        return diff.matmul(diff.constant(features), self.store[f'{COLUMN_PREFIX}time.{table}'])

    def initial_embeddings(self, sub, plan=None):
        """
        Initial states for every sampled node in local order, with mask substitution applied.

        In entity mode a masked node's row is the mask lift alone; its attributes are never read.
        """
        blocks = []
        masked = plan.masked if plan is not None else frozenset()
        for table, start, stop in _table_blocks(self.graph, sub.node_ids):
            ids = sub.node_ids[start:stop]
            if plan is not None and plan.mode == 'cell':
                rows = [self.graph.row_of(v) for v in ids]
                cells = [plan.cells.get(v, frozenset()) for v in ids]
                block = self.encode_rows(table, rows, cells if any(cells) else None)
            elif any(v in masked for v in ids):
                visible = [i for i, v in enumerate(ids) if v not in masked]
                encoded = self.encode_rows(table, [self.graph.row_of(ids[i]) for i in visible])
                lifted = diff.reshape(self.mask_lift(table), (1, self.cfg.column_dim))
                stacked = diff.concat([encoded, lifted], axis=0)
                slot = {i: j for j, i in enumerate(visible)}
                block = diff.take(stacked, [slot.get(i, len(visible)) for i in range(len(ids))])
            else:
                block = self.encode_rows(table, [self.graph.row_of(v) for v in ids])
            if self.cfg.relative_time:
                block = block + self.time_features(table, ids, sub.seed_time)
            blocks.append(block)
        return diff.concat(blocks, axis=0)

    # message passing
    def message_passing(self, sub, h0, training=False, rng=None):
        """Run the L heterogeneous layers over the sampled subgraph; returns ``|sub| × hidden_dim``."""
        if h0.shape[0] != len(sub.node_ids):
            raise ShapeMismatch(f"Initial embeddings have {h0.shape[0]} rows for {len(sub.node_ids)} nodes")
        blocks = _table_blocks(self.graph, sub.node_ids)
        local = {}
        for table, start, stop in blocks:
            for i in range(start, stop):
                local[sub.node_ids[i]] = i - start
        edges = defaultdict(list)
        for w, v, rel in sub.edges:
            edges[rel].append((w, v))
        spans = {table: (start, stop) for table, start, stop in blocks}
        counts = {}
        for rel in sorted(edges):
            if rel.src not in spans or rel.dst not in spans:
                continue
            src, dst = spans[rel.src], spans[rel.dst]
            a = np.zeros((dst[1] - dst[0], src[1] - src[0]))
            for w, v in edges[rel]:
                a[local[v], local[w]] += 1.0
            counts[rel] = a

        h = h0
        d = self.cfg.hidden_dim
        for layer in range(self.cfg.layers):
            per_table = {table: h[start:stop] for table, start, stop in blocks}
            outputs = []
            for table, start, stop in blocks:
                agg = None
                for rel in sorted(r for r in counts if r.dst == table):
                    message = diff.matmul(per_table[rel.src], self.store[f'{GNN_PREFIX}{layer}.msg.{rel.name}'])
                    term = diff.matmul(diff.constant(counts[rel]), message)
                    agg = term if agg is None else agg + term
                if agg is None:
                    agg = diff.constant(np.zeros((stop - start, d)))
                combined = diff.concat([per_table[table], agg], axis=1)
                out = diff.relu(diff.matmul(combined, self.store[f'{GNN_PREFIX}{layer}.self.{table}'])
                                + self.store[f'{GNN_PREFIX}{layer}.bias.{table}'])
                outputs.append(diff.dropout(out, self.cfg.dropout, rng, training))
            h = diff.concat(outputs, axis=0)
        return h

    def encode_graph(self, sub, plan=None, training=False, rng=None):
        """
        Encode a sampled subgraph.

        :return: (per-node final states in local order, pooled mean over all nodes)
        :rtype: tuple[Value, Value]
        """
        if training and self.cfg.dropout > 0 and rng is None:
            raise ValueError("Training with dropout needs an rng")
        h = self.message_passing(sub, self.initial_embeddings(sub, plan), training, rng)
        return h, diff.mean(h, axis=0)

    def project(self, h):
        """Two-layer MLP into the decoder width; works on a single vector or a batch of rows."""
        if h.shape[-1] != self.cfg.hidden_dim:
            raise ShapeMismatch(f"Projection expects last dim {self.cfg.hidden_dim}, got {h.shape}")
        hidden = diff.relu(diff.matmul(h, self.store[f'{PROJECT_PREFIX}w1']) + self.store[f'{PROJECT_PREFIX}b1'])
        return diff.matmul(hidden, self.store[f'{PROJECT_PREFIX}w2']) + self.store[f'{PROJECT_PREFIX}b2']
