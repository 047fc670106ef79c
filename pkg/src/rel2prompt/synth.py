"""Deterministic synthetic temporal databases (users, items, events) with history-based labels."""
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ConfigError
from .relational_store import load_database
from .utils import Utils

logger = logging.getLogger('rel2prompt')

DAY = 86400
START = 1704067200  # 2024-01-01T00:00:00Z
BLOCK_DAYS = 30

SEGMENTS = ('bronze', 'silver', 'gold', 'platinum')
CATEGORIES = ('books', 'garden', 'music', 'sports', 'toys')
BIO_WORDS = ('runner', 'reader', 'gamer', 'cook', 'traveler', 'painter', 'hiker', 'coder', 'singer', 'gardener')
KINDS = ('view', 'purchase')

MANIFEST = {
    'tables': [
        {
            'name': 'users', 'file': 'users.csv', 'primary_key': 'user_id', 'time_column': 'signup',
            'columns': [
                {'name': 'user_id', 'kind': 'categorical', 'nullable': False},
                {'name': 'signup', 'kind': 'timestamp', 'nullable': False},
                {'name': 'age', 'kind': 'numeric', 'nullable': True},
                {'name': 'segment', 'kind': 'categorical', 'nullable': True},
                {'name': 'bio', 'kind': 'text', 'nullable': True},
            ],
            'foreign_keys': [],
        },
        {
            'name': 'items', 'file': 'items.csv', 'primary_key': 'item_id', 'time_column': None,
            'columns': [
                {'name': 'item_id', 'kind': 'categorical', 'nullable': False},
                {'name': 'category', 'kind': 'categorical', 'nullable': False},
                {'name': 'price', 'kind': 'numeric', 'nullable': False},
            ],
            'foreign_keys': [],
        },
        {
            'name': 'events', 'file': 'events.csv', 'primary_key': 'event_id', 'time_column': 'ts',
            'columns': [
                {'name': 'event_id', 'kind': 'categorical', 'nullable': False},
                {'name': 'user_id', 'kind': 'categorical', 'nullable': False},
                {'name': 'item_id', 'kind': 'categorical', 'nullable': False},
                {'name': 'ts', 'kind': 'timestamp', 'nullable': False},
                {'name': 'kind', 'kind': 'categorical', 'nullable': False},
                {'name': 'amount', 'kind': 'numeric', 'nullable': True},
            ],
            'foreign_keys': [
                {'column': 'user_id', 'target_table': 'users'},
                {'column': 'item_id', 'target_table': 'items'},
            ],
        },
    ],
}


@dataclass(frozen=True)
class SynthConfig:
    preset: str = 'churn'
    num_users: int = 1000
    num_items: int = 100
    num_events: int = 20000
    days: int = 360
    window_days: int = 30
    event_kind: str = 'purchase'
    train_days: tuple = (120, 150, 180, 210, 240, 270)
    val_days: tuple = (300,)
    test_days: tuple = (330,)
    # target positive rate per split (train, val, test); None keeps the natural rate
    positive_rates: tuple = (0.5, 0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1 or self.num_events < 0:
            raise ConfigError(f"Synthetic entity counts must be positive: {self}")
        if self.event_kind not in KINDS:
            raise ConfigError(f"event_kind must be one of {KINDS}, got {self.event_kind}")
        if not (self.train_days and self.val_days and self.test_days):
            raise ConfigError("Every split needs at least one seed day")
        if max(self.train_days) >= min(self.val_days) or max(self.val_days) >= min(self.test_days):
            raise ConfigError("Seed days must satisfy train < val < test")
        if max(self.test_days) > self.days:
            raise ConfigError(f"Seed days must fall inside the {self.days}-day timeline")
        if self.positive_rates is not None:
            if len(self.positive_rates) != 3 or any(not 0.0 < r < 1.0 for r in self.positive_rates):
                raise ConfigError(f"positive_rates must be three values in (0, 1), got {self.positive_rates}")

    @property
    def cutoffs(self):
        return {'val': START + min(self.val_days) * DAY, 'test': START + min(self.test_days) * DAY}

    @classmethod
    def from_pipeline_config(cls, pipeline_config, seed=None):
        section = dict(pipeline_config['synth'])
        preset = section.pop('preset')
        cfg = preset_config(preset)
        overrides = {k: (tuple(v) if isinstance(v, list) else v) for k, v in section.items() if v is not None}
        if seed is not None:
            overrides['seed'] = int(seed)
        return replace(cfg, **overrides)


PRESETS = {
    'churn': {},
    'driver-dnf-like': {'positive_rates': (0.1196, 0.2208, 0.2949)},
    'user-engagement-like': {'positive_rates': (0.05, 0.0281, 0.0274)},
    'user-clicks-like': {'positive_rates': (0.0387, 0.0352, 0.0154)},
    'memorize': {'num_users': 20, 'num_items': 10, 'num_events': 20, 'days': 120, 'train_days': (60,),
                 'val_days': (90,), 'test_days': (110,), 'positive_rates': None},
}


def preset_config(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"Unknown synthetic preset '{name}', expected one of {sorted(PRESETS)}")
    return SynthConfig(preset=name, **{**PRESETS[name], **overrides})


@dataclass
class SynthResult:
    db: object
    manifest_path: str
    tasks: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)


def _users(cfg, rng):
    rows, activity = [], []
    for i in range(cfg.num_users):
        signup_day = int(rng.integers(0, max(1, min(90, cfg.days // 3))))
        age = '' if rng.random() < 0.05 else str(int(rng.integers(18, 80)))
        segment = SEGMENTS[int(rng.integers(len(SEGMENTS)))]
        bio = ' '.join(BIO_WORDS[int(j)] for j in rng.choice(len(BIO_WORDS), size=2, replace=False))
        rows.append([f'u{i}', str(START + signup_day * DAY), age, segment, bio])
        activity.append((signup_day, float(rng.uniform(0.15, 0.85))))
    return rows, activity


def _items(cfg, rng):
    rows = []
    for i in range(cfg.num_items):
        rows.append([f'i{i}', CATEGORIES[int(rng.integers(len(CATEGORIES)))], f'{rng.uniform(2.0, 200.0):.2f}'])
    return rows


def _events(cfg, rng, activity, prices):
    blocks = cfg.days // BLOCK_DAYS
    user_blocks = sum(max(0, blocks - signup // BLOCK_DAYS) for signup, _ in activity) or 1
    view_rate = cfg.num_events / (2.0 * user_blocks)
    raw = []
    for user, (signup_day, p_active) in enumerate(activity):
        for block in range(signup_day // BLOCK_DAYS, blocks):
            active = rng.random() < p_active
            counts = {'view': int(rng.poisson(view_rate)), 'purchase': int(rng.poisson(2.0 * view_rate)) if active else 0}
            for kind in KINDS:
                for _ in range(counts[kind]):
                    day = block * BLOCK_DAYS + int(rng.integers(BLOCK_DAYS))
                    if day < signup_day:
                        day = signup_day
                    # seconds in [1, DAY) keep events off the midnight seed times
                    ts = START + day * DAY + int(rng.integers(1, DAY))
                    item = int(rng.integers(len(prices)))
                    amount = f'{prices[item] * int(rng.integers(1, 4)):.2f}' if kind == 'purchase' else ''
                    raw.append((ts, user, item, kind, amount))
    raw.sort()
    return [[f'e{n}', f'u{user}', f'i{item}', str(ts), kind, amount] for n, (ts, user, item, kind, amount) in enumerate(raw)]


def churn_label(event_times, event_kinds, t_star, window, kind):
    """1 when no event of ``kind`` falls in [t* − window, t*)."""
    return int(not any(t_star - window <= t < t_star and k == kind for t, k in zip(event_times, event_kinds)))


def activity_count(event_times, t_star, window):
    return sum(1 for t in event_times if t_star - window <= t < t_star)


def _subsample(candidates, rate, rng):
    if rate is None:
        return candidates
    positives = [c for c in candidates if c[2] == 1]
    negatives = [c for c in candidates if c[2] == 0]
    wanted = int(round(rate * len(negatives) / (1.0 - rate)))
    if wanted <= len(positives):
        keep_pos = [positives[i] for i in sorted(rng.choice(len(positives), size=wanted, replace=False).tolist())]
        keep_neg = negatives
    else:
        keep_pos = positives
        wanted_neg = min(len(negatives), int(round(len(positives) * (1.0 - rate) / rate)))
        keep_neg = [negatives[i] for i in sorted(rng.choice(len(negatives), size=wanted_neg, replace=False).tolist())]
    return sorted(keep_pos + keep_neg, key=lambda c: (c[1], c[0]))


def _task_manifest(task_id, task_type, strategy, template, cfg):
    return {
        'task_id': task_id,
        'target_table': 'users',
        'label_file': f'labels/{task_id}.csv',
        'task_type': task_type,
        'cutoffs': cfg.cutoffs,
        'answer_strategy': strategy,
        'template': template,
        'template_params': {'event_kind': cfg.event_kind, 'window_days': cfg.window_days},
        'metric': 'auroc' if task_type == 'classification' else 'mae',
    }


def generate(cfg, out_dir):
    """
    Write a synthetic database, its task manifests and label files under ``out_dir``.

    Labels are pure functions of each user's events strictly before the seed time. The churn
    task is subsampled per split towards ``cfg.positive_rates``; the count task keeps every
    candidate.

    :return: The reloaded database plus task manifests and label frames keyed by task id.
    :rtype: SynthResult
    """
    rng = Utils.derive_rng(cfg.seed, 0)
    user_rows, activity = _users(cfg, rng)
    item_rows = _items(cfg, rng)
    prices = [float(r[2]) for r in item_rows]
    event_rows = _events(cfg, rng, activity, prices)
    logger.info(f"Generated {len(user_rows)} users, {len(item_rows)} items, {len(event_rows)} events")

    os.makedirs(os.path.join(out_dir, 'labels'), exist_ok=True)
    os.makedirs(os.path.join(out_dir, 'tasks'), exist_ok=True)
    for spec, rows in zip(MANIFEST['tables'], (user_rows, item_rows, event_rows)):
        frame = pd.DataFrame(rows, columns=[c['name'] for c in spec['columns']], dtype=object)
        frame.to_csv(os.path.join(out_dir, spec['file']), index=False, lineterminator='\n')
    manifest_path = os.path.join(out_dir, 'manifest.json')
    with open(manifest_path, 'w', encoding='utf-8') as file:
        json.dump(MANIFEST, file, indent=2, sort_keys=True)
        file.write('\n')

    history = {f'u{i}': ([], []) for i in range(cfg.num_users)}
    for _, user, _, ts, kind, _ in event_rows:
        history[user][0].append(int(ts))
        history[user][1].append(kind)
    window = cfg.window_days * DAY
    split_days = (cfg.train_days, cfg.val_days, cfg.test_days)
    rates = cfg.positive_rates or (None, None, None)

    churn, counts = [], []
    for split, days in enumerate(split_days):
        split_rng = Utils.derive_rng(cfg.seed, 1, split)
        candidates = []
        for day in days:
            t_star = START + day * DAY
            for user_id, signup, *_ in user_rows:
                if int(signup) >= t_star:
                    continue
                times, kinds = history[user_id]
                candidates.append((user_id, t_star, churn_label(times, kinds, t_star, window, cfg.event_kind)))
                counts.append((user_id, t_star, activity_count(times, t_star, window)))
        kept = _subsample(candidates, rates[split], split_rng)
        if kept:
            logger.info(f"Split {('train', 'val', 'test')[split]}: {len(kept)} churn examples, "
                        f"positive rate {np.mean([c[2] for c in kept]):.4f}")
        churn.extend(kept)

    labels = {
        'churn': pd.DataFrame(churn, columns=['entity', 'seed_time', 'label']),
        'activity-count': pd.DataFrame(counts, columns=['entity', 'seed_time', 'label']),
    }
    tasks = {
        'churn': _task_manifest('churn', 'classification', 'token_distribution', 'synth/churn', cfg),
        'activity-count': _task_manifest('activity-count', 'regression', 'mlp_head', 'synth/activity-count', cfg),
    }
    for task_id, frame in labels.items():
        frame.to_csv(os.path.join(out_dir, 'labels', f'{task_id}.csv'), index=False, lineterminator='\n')
        Utils.dump_json(tasks[task_id], os.path.join(out_dir, 'tasks', f'{task_id}.json'))

    db = load_database(manifest_path, out_dir)
    return SynthResult(db, manifest_path, tasks, labels)
