"""Load, validate and index relational databases described by a JSON manifest plus CSV files."""
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Optional

import jsonschema
import pandas as pd

from .errors import DuplicatePrimaryKey, MissingFile, SchemaMismatch
from .utils import MISSING, NEG_INF, Utils

logger = logging.getLogger('rel2prompt')

COLUMN_KINDS = ('numeric', 'categorical', 'text', 'timestamp')

MANIFEST_SCHEMA = {
    'type': 'object',
    'required': ['tables'],
    'properties': {
        'tables': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['name', 'file', 'primary_key', 'columns'],
                'properties': {
                    'name': {'type': 'string', 'minLength': 1},
                    'file': {'type': 'string', 'minLength': 1},
                    'primary_key': {'type': 'string'},
                    'time_column': {'type': ['string', 'null']},
                    'columns': {
                        'type': 'array',
                        'items': {
                            'type': 'object',
                            'required': ['name', 'kind'],
                            'properties': {
                                'name': {'type': 'string', 'minLength': 1},
                                'kind': {'enum': list(COLUMN_KINDS)},
                                'nullable': {'type': 'boolean'},
                            },
                        },
                    },
                    'foreign_keys': {
                        'type': 'array',
                        'items': {
                            'type': 'object',
                            'required': ['column', 'target_table'],
                            'properties': {
                                'column': {'type': 'string'},
                                'target_table': {'type': 'string'},
                            },
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    nullable: bool = True


@dataclass(frozen=True)
class ForeignKey:
    column: str
    target_table: str


@dataclass(frozen=True)
class TableSpec:
    name: str
    columns: tuple
    primary_key: str
    foreign_keys: tuple = ()
    time_column: Optional[str] = None
    file: str = ''

    @property
    def column_names(self):
        return [c.name for c in self.columns]

    def column_index(self, name):
        return self.column_names.index(name)

    @property
    def key_columns(self):
        return {self.primary_key, *(fk.column for fk in self.foreign_keys)}

    @property
    def feature_columns(self):
        """Attribute columns x_v: everything except keys and the entity time column."""
        skip = self.key_columns | ({self.time_column} if self.time_column else set())
        return [c for c in self.columns if c.name not in skip]


@dataclass(frozen=True)
class Entity:
    pkey: str
    fkeys: dict
    attrs: tuple
    time: int = NEG_INF

    def attr(self, spec, name):
        return self.attrs[spec.column_index(name)]


@dataclass
class Table:
    spec: TableSpec
    entities: list


@dataclass
class ValidationReport:
    dangling: dict = field(default_factory=dict)
    bad_cells: dict = field(default_factory=dict)
    missing_cells: dict = field(default_factory=dict)
    self_links: list = field(default_factory=list)

    @property
    def dangling_count(self):
        return sum(len(rows) for rows in self.dangling.values())

    def to_dict(self):
        return {
            'dangling': {f'{t}.{c}': len(rows) for (t, c), rows in sorted(self.dangling.items())},
            'bad_cells': {f'{t}.{c}': n for (t, c), n in sorted(self.bad_cells.items())},
            'missing_cells': {f'{t}.{c}': n for (t, c), n in sorted(self.missing_cells.items())},
            'self_links': [f'{t}.{c}' for t, c in self.self_links],
        }


@dataclass
class Database:
    tables: dict
    links: frozenset
    report: ValidationReport = field(default_factory=ValidationReport, compare=False)

    @property
    def table_names(self):
        return list(self.tables)

    def spec(self, table):
        return self.tables[table].spec

    def entities(self, table):
        return self.tables[table].entities

    def num_rows(self, table):
        return len(self.tables[table].entities)


@dataclass
class KeyIndex:
    pk_index: dict
    fk_index: dict

    def position(self, table, key):
        return self.pk_index[table].get(key)

    def referencing(self, fk_table, pk_table, key):
        """Positions of rows in ``fk_table`` whose foreign keys point at ``key`` in ``pk_table``."""
        positions = set()
        for (table, _column, target), refs in self.fk_index.items():
            if table == fk_table and target == pk_table:
                positions.update(refs.get(key, ()))
        return sorted(positions)


def parse_table_specs(manifest):
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise SchemaMismatch(f"Manifest does not validate: {e.message}") from e

    declared = [t['name'] for t in manifest['tables']]
    if len(set(declared)) != len(declared):
        raise SchemaMismatch(f"Table names must be unique: {declared}")

    specs = []
    for entry in manifest['tables']:
        columns = tuple(ColumnSpec(c['name'], c['kind'], c.get('nullable', True)) for c in entry['columns'])
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise SchemaMismatch(f"Duplicate column names in table {entry['name']}: {names}")
        if entry['primary_key'] not in names:
            raise SchemaMismatch(f"Primary key {entry['primary_key']} of {entry['name']} is not a declared column")
        foreign_keys = tuple(ForeignKey(fk['column'], fk['target_table']) for fk in entry.get('foreign_keys', []))
        for fk in foreign_keys:
            if fk.column not in names:
                raise SchemaMismatch(f"Foreign key column {entry['name']}.{fk.column} is not a declared column")
            if fk.target_table not in declared:
                raise SchemaMismatch(f"Foreign key {entry['name']}.{fk.column} targets undeclared table {fk.target_table}")
        time_column = entry.get('time_column')
        if time_column is not None:
            if time_column not in names:
                raise SchemaMismatch(f"Time column {entry['name']}.{time_column} is not a declared column")
            if columns[names.index(time_column)].kind != 'timestamp':
                raise SchemaMismatch(f"Time column {entry['name']}.{time_column} must have kind 'timestamp'")
        specs.append(TableSpec(entry['name'], columns, entry['primary_key'], foreign_keys, time_column, entry['file']))
    return specs


def _parse_cell(raw, kind):
    if kind == 'numeric':
        return float(raw)
    if kind == 'timestamp':
        return Utils.parse_timestamp(raw)
    return raw


def _load_table(spec, data_dir, report):
    path = os.path.join(data_dir, spec.file)
    if not os.path.exists(path):
        raise MissingFile(f"CSV file for table {spec.name} not found at {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding='utf-8')
    absent = [name for name in spec.column_names if name not in frame.columns]
    if absent:
        raise SchemaMismatch(f"Table {spec.name}: columns {absent} missing from CSV header of {path}")

    raw_columns = [frame[name].tolist() for name in spec.column_names]
    fk_positions = {fk.column: spec.column_index(fk.column) for fk in spec.foreign_keys}
    pk_position = spec.column_index(spec.primary_key)
    time_position = spec.column_index(spec.time_column) if spec.time_column else None

    entities = []
    seen = set()
    for row in range(len(frame)):
        attrs = []
        for col_pos, column in enumerate(spec.columns):
            raw = raw_columns[col_pos][row]
            if raw == '':
                attrs.append(MISSING)
                key = (spec.name, column.name)
                report.missing_cells[key] = report.missing_cells.get(key, 0) + 1
                if not column.nullable:
                    logger.warning(f"Table {spec.name} row {row}: non-nullable column {column.name} is empty")
                continue
            try:
                attrs.append(_parse_cell(raw, column.kind))
            except (ValueError, OverflowError):
                key = (spec.name, column.name)
                report.bad_cells[key] = report.bad_cells.get(key, 0) + 1
                logger.warning(f"Table {spec.name} row {row}: cannot parse '{raw}' as {column.kind} in column {column.name}")
                attrs.append(MISSING)

        pkey = raw_columns[pk_position][row]
        if pkey == '':
            raise SchemaMismatch(f"Table {spec.name} row {row}: empty primary key")
        if pkey in seen:
            raise DuplicatePrimaryKey(f"Table {spec.name}: primary key '{pkey}' appears more than once")
        seen.add(pkey)

        fkeys = {col: (raw_columns[pos][row] or None) for col, pos in fk_positions.items()}
        time = NEG_INF
        if time_position is not None and attrs[time_position] is not MISSING:
            time = attrs[time_position]
        entities.append(Entity(pkey, fkeys, tuple(attrs), time))

    logger.info(f"Loaded table {spec.name}: {len(entities)} rows from {path}")
    return Table(spec, entities)


def load_database(manifest_path, data_dir=None, max_bad_cells=0):
    """
    Load and validate a database from a manifest and its CSV files.

    :param manifest_path: Path to the manifest JSON.
    :type manifest_path: str
    :param data_dir: Directory holding the CSV files; defaults to the manifest's directory.
    :type data_dir: str, optional
    :param max_bad_cells: Number of unparseable cells tolerated before SchemaMismatch.
    :type max_bad_cells: int
    :return: The validated database, with a ValidationReport attached.
    :rtype: Database
    :raises MissingFile: If the manifest or a CSV file is absent.
    :raises SchemaMismatch: If the manifest or a CSV does not match the declared schema.
    :raises DuplicatePrimaryKey: If a primary key repeats within a table.
    """
    if not os.path.exists(manifest_path):
        raise MissingFile(f"Manifest not found at {manifest_path}")
    with open(manifest_path, 'r', encoding='utf-8') as file:
        try:
            manifest = json.load(file)
        except json.JSONDecodeError as e:
            raise SchemaMismatch(f"Manifest {manifest_path} is not valid JSON: {e}") from e
    data_dir = data_dir or os.path.dirname(os.path.abspath(manifest_path))

    report = ValidationReport()
    tables = {}
    for spec in parse_table_specs(manifest):
        tables[spec.name] = _load_table(spec, data_dir, report)

    bad_total = sum(report.bad_cells.values())
    if bad_total > max_bad_cells:
        raise SchemaMismatch(f"{bad_total} unparseable cells exceed the configured threshold of {max_bad_cells}: {report.to_dict()['bad_cells']}")

    links = set()
    for name, table in tables.items():
        for fk in table.spec.foreign_keys:
            links.add((name, fk.target_table))
            if fk.target_table == name:
                report.self_links.append((name, fk.column))
                logger.warning(f"Table {name}: foreign key {fk.column} references its own table")
            target_keys = {e.pkey for e in tables[fk.target_table].entities}
            dangling = [pos for pos, e in enumerate(table.entities)
                        if e.fkeys[fk.column] is not None and e.fkeys[fk.column] not in target_keys]
            if dangling:
                report.dangling[(name, fk.column)] = dangling
                logger.warning(f"Table {name}: {len(dangling)} dangling values in foreign key {fk.column} -> {fk.target_table}")

    return Database(tables, frozenset(links), report)


def manifest_for(db):
    tables = []
    for name, table in db.tables.items():
        spec = table.spec
        tables.append({
            'name': name,
            'file': spec.file or f'{name}.csv',
            'primary_key': spec.primary_key,
            'time_column': spec.time_column,
            'columns': [{'name': c.name, 'kind': c.kind, 'nullable': c.nullable} for c in spec.columns],
            'foreign_keys': [{'column': fk.column, 'target_table': fk.target_table} for fk in spec.foreign_keys],
        })
    return {'tables': tables}


def _cell_text(value):
    if value is MISSING:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_database(db, out_dir, manifest_name='manifest.json'):
    """Write the database back out as manifest + CSVs; ``load_database`` reads it back equal."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = manifest_for(db)
    for entry in manifest['tables']:
        table = db.tables[entry['name']]
        spec = table.spec
        rows = []
        for entity in table.entities:
            # keys keep their raw text so '7' does not come back as '7.0'
            row = [_cell_text(v) for v in entity.attrs]
            row[spec.column_index(spec.primary_key)] = entity.pkey
            for fk in spec.foreign_keys:
                row[spec.column_index(fk.column)] = entity.fkeys[fk.column] or ''
            rows.append(row)
        frame = pd.DataFrame(rows, columns=table.spec.column_names, dtype=object)
        frame.to_csv(os.path.join(out_dir, entry['file']), index=False, lineterminator='\n')
    manifest_path = os.path.join(out_dir, manifest_name)
    with open(manifest_path, 'w', encoding='utf-8') as file:
        json.dump(manifest, file, indent=2, sort_keys=True)
        file.write('\n')
    logger.info(f"Exported database with {len(db.tables)} tables to {out_dir}")
    return manifest_path


def build_key_index(db):
    """Hash indexes on every primary key and every foreign key column."""
    pk_index = {}
    for name, table in db.tables.items():
        pk_index[name] = {e.pkey: pos for pos, e in enumerate(table.entities)}

    fk_index = {}
    for name, table in db.tables.items():
        for fk in table.spec.foreign_keys:
            refs = defaultdict(list)
            for pos, e in enumerate(table.entities):
                key = e.fkeys[fk.column]
                if key is not None:
                    refs[key].append(pos)
            fk_index[(name, fk.column, fk.target_table)] = {k: tuple(v) for k, v in refs.items()}
    return KeyIndex(pk_index, fk_index)
