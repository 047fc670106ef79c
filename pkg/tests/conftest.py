import json
import os

import pandas as pd
import pytest

from rel2prompt.config import DEFAULT_PIPELINE_CONFIG, apply_assignments
from rel2prompt.relational_store import ColumnSpec, Database, Entity, ForeignKey, Table, TableSpec, load_database
from rel2prompt.synth import DAY, START, generate, preset_config
from rel2prompt.utils import MISSING, NEG_INF

SHOP_MANIFEST = {
    'tables': [
        {
            'name': 'users', 'file': 'users.csv', 'primary_key': 'user_id', 'time_column': 'signup',
            'columns': [
                {'name': 'user_id', 'kind': 'categorical'},
                {'name': 'signup', 'kind': 'timestamp'},
                {'name': 'age', 'kind': 'numeric'},
                {'name': 'city', 'kind': 'categorical'},
            ],
        },
        {
            'name': 'items', 'file': 'items.csv', 'primary_key': 'item_id',
            'columns': [
                {'name': 'item_id', 'kind': 'categorical'},
                {'name': 'category', 'kind': 'categorical'},
                {'name': 'price', 'kind': 'numeric'},
            ],
        },
        {
            'name': 'orders', 'file': 'orders.csv', 'primary_key': 'order_id', 'time_column': 'ts',
            'columns': [
                {'name': 'order_id', 'kind': 'categorical'},
                {'name': 'user_id', 'kind': 'categorical'},
                {'name': 'item_id', 'kind': 'categorical'},
                {'name': 'ts', 'kind': 'timestamp'},
                {'name': 'quantity', 'kind': 'numeric'},
                {'name': 'note', 'kind': 'text'},
            ],
            'foreign_keys': [
                {'column': 'user_id', 'target_table': 'users'},
                {'column': 'item_id', 'target_table': 'items'},
            ],
        },
    ],
}


def day(n):
    return START + n * DAY


SHOP_ROWS = {
    'users': [
        ['u0', day(0), 30, 'paris'],
        ['u1', day(1), '', 'rome'],
        ['u2', day(10), 45, 'paris'],
    ],
    'items': [
        ['i0', 'books', 12.5],
        ['i1', 'toys', 3.0],
    ],
    'orders': [
        ['o0', 'u0', 'i0', day(1), 1, 'fast delivery'],
        ['o1', 'u0', 'i1', day(2), 2, ''],
        ['o2', 'u0', 'i0', day(3), 1, 'gift'],
        ['o3', 'u0', 'i1', day(4), 3, 'gift wrap'],
        ['o4', 'u0', 'i0', day(5), 1, ''],
        ['o5', 'u1', 'i1', day(6), 2, 'late'],
        ['o6', 'u0', 'i0', day(20), 4, 'future order'],
        ['o7', 'u2', 'i0', day(12), 1, ''],
    ],
}

TINY_SETTINGS = [
    'encoder.layers=2', 'encoder.hidden_dim=8', 'encoder.column_dim=6', 'encoder.projection_dim=8',
    'encoder.text_buckets=16', 'encoder.dropout=0.0', 'decoder.layers=1', 'decoder.heads=2',
    'decoder.head_hidden=4', 'decoder.context=256', 'sampler.fanouts=[2,2]', 'prompt.n_nest=2', 'prompt.zeta=1',
]


def write_database(directory, manifest, rows):
    os.makedirs(directory, exist_ok=True)
    for spec in manifest['tables']:
        columns = [c['name'] for c in spec['columns']]
        frame = pd.DataFrame([[str(v) for v in row] for row in rows[spec['name']]], columns=columns, dtype=object)
        frame.to_csv(os.path.join(directory, spec['file']), index=False)
    path = os.path.join(directory, 'manifest.json')
    with open(path, 'w', encoding='utf-8') as file:
        json.dump(manifest, file)
    return path


def _make_chain_db(users, orders):
    """In-memory users ← orders database; ``users`` are times, ``orders`` are (user key or None, time)."""
    user_spec = TableSpec('users', (ColumnSpec('user_id', 'categorical'), ColumnSpec('signup', 'timestamp'),
                                    ColumnSpec('score', 'numeric')), 'user_id', (), 'signup')
    order_spec = TableSpec('orders', (ColumnSpec('order_id', 'categorical'), ColumnSpec('user_id', 'categorical'),
                                      ColumnSpec('ts', 'timestamp'), ColumnSpec('amount', 'numeric')),
                           'order_id', (ForeignKey('user_id', 'users'),), 'ts')
    user_rows = [Entity(f'u{i}', {}, (f'u{i}', t, float(i % 3)), t) for i, t in enumerate(users)]
    order_rows = [Entity(f'o{j}', {'user_id': key}, (f'o{j}', key if key is not None else MISSING, t, float(j)), t)
                  for j, (key, t) in enumerate(orders)]
    return Database({'users': Table(user_spec, user_rows), 'orders': Table(order_spec, order_rows)},
                    frozenset({('orders', 'users')}))


def _make_self_db(parents, features):
    """In-memory single-table database whose rows point at a parent row of the same table."""
    spec = TableSpec('people', (ColumnSpec('person_id', 'categorical'), ColumnSpec('parent', 'categorical'),
                                ColumnSpec('x', 'numeric')), 'person_id', (ForeignKey('parent', 'people'),))
    rows = [Entity(f'p{i}', {'parent': None if p is None else f'p{p}'},
                   (f'p{i}', MISSING if p is None else f'p{p}', float(x)), NEG_INF)
            for i, (p, x) in enumerate(zip(parents, features))]
    return Database({'people': Table(spec, rows)}, frozenset({('people', 'people')}))


@pytest.fixture(scope='session')
def make_chain_db():
    return _make_chain_db


@pytest.fixture(scope='session')
def make_self_db():
    return _make_self_db


@pytest.fixture
def shop_dir(tmp_path):
    directory = tmp_path / 'shop'
    write_database(str(directory), SHOP_MANIFEST, SHOP_ROWS)
    return str(directory)


@pytest.fixture
def shop_db(shop_dir):
    return load_database(os.path.join(shop_dir, 'manifest.json'))


@pytest.fixture(scope='session')
def tiny_config():
    return apply_assignments(DEFAULT_PIPELINE_CONFIG, TINY_SETTINGS)


@pytest.fixture(scope='session')
def synth_suite(tmp_path_factory):
    """A small churn suite generated once per session."""
    out = str(tmp_path_factory.mktemp('synth'))
    result = generate(preset_config('churn', num_users=60, num_items=10, num_events=600, seed=3), out)
    return out, result
