"""Task manifests, temporal splits, the fine-tuning loop and evaluation."""
import json
import logging
import os
from dataclasses import dataclass, field

import jsonschema
import numpy as np
import pandas as pd
from tqdm import tqdm

from . import diff
from .decoder import STRATEGIES
from .diff import load_checkpoint, save_checkpoint
from .encoder import COLUMN_PREFIX, GNN_PREFIX
from .errors import ConfigError, MissingFile, SchemaMismatch, UnknownNode, UnknownSplit, UnknownTask, UnsupportedMode
from .metrics import MetricsLog, auroc, class_alpha, focal_loss, mae
from .optim import ReduceLROnPlateau, build_optimizer
from .prompt import LabeledExample, fix_in_context_examples
from .utils import Utils

logger = logging.getLogger('rel2prompt')

SPLITS = ('train', 'val', 'test')
EVAL_MODES = ('fine_tuned', 'zero_shot')
LABEL_COLUMNS = ('entity', 'seed_time', 'label')

TASK_SCHEMA = {
    'type': 'object',
    'required': ['task_id', 'target_table', 'label_file', 'task_type', 'cutoffs', 'template'],
    'properties': {
        'task_id': {'type': 'string', 'minLength': 1},
        'target_table': {'type': 'string', 'minLength': 1},
        'label_file': {'type': 'string', 'minLength': 1},
        'task_type': {'enum': ['classification', 'regression']},
        'cutoffs': {
            'type': 'object',
            'required': ['val', 'test'],
            'properties': {
                'val': {'type': ['integer', 'string']},
                'test': {'type': ['integer', 'string']},
            },
        },
        'answer_strategy': {'enum': list(STRATEGIES)},
        'template': {'type': 'string', 'minLength': 1},
        'template_params': {'type': 'object'},
        'metric': {'enum': ['auroc', 'mae']},
    },
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    target_table: str
    label_file: str
    task_type: str
    cutoffs: dict
    answer_strategy: str
    template: str
    template_params: dict = field(default_factory=dict)
    metric: str = 'auroc'
    base_dir: str = '.'

    @property
    def higher_is_better(self):
        return self.metric == 'auroc'

    @property
    def label_path(self):
        return os.path.join(self.base_dir, self.label_file)


def load_task(path, db=None):
    """
    Read and validate a task manifest.

    Relative label files resolve against the directory above ``tasks/`` when the manifest lives
    in one (the layout ``synth`` writes), otherwise against the manifest's own directory.

    :raises UnknownTask: If the manifest file does not exist.
    :raises SchemaMismatch: If the manifest does not parse or validate or names an unknown table.
    :raises ConfigError: If the strategy does not fit the task type or the cutoffs are out of order.
    """
    if not os.path.exists(path):
        raise UnknownTask(f"No task manifest at {path}")
    try:
        with open(path, 'r', encoding='utf-8') as file:
            raw = json.load(file)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise SchemaMismatch(f"Task manifest {path} is not valid JSON: {e}") from e
    try:
        jsonschema.validate(raw, TASK_SCHEMA)
    except jsonschema.ValidationError as e:
        raise SchemaMismatch(f"Task manifest {path} does not validate: {e.message}") from e

    task_type = raw['task_type']
    strategy = raw.get('answer_strategy') or ('token_distribution' if task_type == 'classification' else 'mlp_head')
    if task_type == 'regression' and strategy != 'mlp_head':
        raise ConfigError(f"Regression task {raw['task_id']} needs the mlp_head strategy, got {strategy}")
    if task_type == 'classification' and strategy == 'mlp_head':
        raise ConfigError(f"Classification task {raw['task_id']} cannot use the mlp_head strategy")
    cutoffs = {name: Utils.parse_timestamp(value) for name, value in raw['cutoffs'].items() if name in ('val', 'test')}
    if cutoffs['val'] > cutoffs['test']:
        raise ConfigError(f"Validation cutoff {cutoffs['val']} is after the test cutoff {cutoffs['test']}")
    if db is not None and raw['target_table'] not in db.tables:
        raise SchemaMismatch(f"Task {raw['task_id']} targets unknown table {raw['target_table']}")

    manifest_dir = os.path.dirname(os.path.abspath(path))
    base_dir = os.path.dirname(manifest_dir) if os.path.basename(manifest_dir) == 'tasks' else manifest_dir
    return TaskSpec(raw['task_id'], raw['target_table'], raw['label_file'], task_type, cutoffs, strategy,
                    raw['template'], dict(raw.get('template_params') or {}),
                    raw.get('metric') or ('auroc' if task_type == 'classification' else 'mae'), base_dir)


def find_task(data_dir, task_id, db=None):
    return load_task(os.path.join(data_dir, 'tasks', f'{task_id}.json'), db)


def load_labels(task, graph, index):
    """
    Labeled examples of ``task`` sorted by (seed time, node id).

    :raises MissingFile: If the label file is absent.
    :raises SchemaMismatch: If columns are missing or a label is not a number.
    :raises UnknownNode: If an entity key is not in the target table.
    """
    path = task.label_path
    if not os.path.exists(path):
        raise MissingFile(f"Label file {path} does not exist")
    frame = pd.read_csv(path, dtype={'entity': str, 'seed_time': str}, keep_default_na=False)
    missing = [c for c in LABEL_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaMismatch(f"Label file {path} lacks columns {missing}")
    labels = pd.to_numeric(frame['label'], errors='coerce')
    if labels.isna().any():
        raise SchemaMismatch(f"Label file {path} has {int(labels.isna().sum())} non-numeric labels")
    if task.task_type == 'classification' and not labels.isin([0, 1]).all():
        raise SchemaMismatch(f"Classification labels in {path} must be 0 or 1")

    examples = []
    for entity, seed_time, label in zip(frame['entity'], frame['seed_time'], labels):
        row = index.position(task.target_table, entity)
        if row is None:
            raise UnknownNode(f"Label file {path} names unknown {task.target_table} entity '{entity}'")
        examples.append(LabeledExample(graph.node_id(task.target_table, row), Utils.parse_timestamp(seed_time),
                                       float(label)))
    examples.sort(key=lambda e: (e.time, e.node))
    logger.info(f"Loaded {len(examples)} labeled examples for task {task.task_id}")
    return examples


def split_examples(examples, cutoffs):
    """train: t < val cutoff; val: val cutoff ≤ t < test cutoff; test: t ≥ test cutoff."""
    splits = {name: [] for name in SPLITS}
    for e in examples:
        if e.time < cutoffs['val']:
            splits['train'].append(e)
        elif e.time < cutoffs['test']:
            splits['val'].append(e)
        else:
            splits['test'].append(e)
    logger.info("Split sizes: " + ', '.join(f"{name}={len(splits[name])}" for name in SPLITS))
    return splits


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    plateau_patience: int = 100
    plateau_factor: float = 0.8
    alpha: float = 0.8
    gamma: float = 2.0
    eval_every: int = 20
    max_steps: int = 0
    freeze_encoder: bool = False
    max_eval_examples: int = 0
    seed: int = 0
    temporal_strategy: str = 'last'

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1 or self.max_steps < 0:
            raise ConfigError(f"Invalid training schedule: epochs={self.epochs}, batch_size={self.batch_size}, "
                              f"eval_every={self.eval_every}, max_steps={self.max_steps}")
        if self.lr <= 0.0 or self.weight_decay < 0.0:
            raise ConfigError(f"Learning rate must be positive and weight decay non-negative, got {self.lr}, {self.weight_decay}")
        if not 0.0 < self.plateau_factor <= 1.0 or self.plateau_patience < 1:
            raise ConfigError(f"Plateau factor must be in (0, 1] and patience >= 1, got {self.plateau_factor}, {self.plateau_patience}")
        if not 0.0 <= self.alpha <= 1.0 or self.gamma < 0.0:
            raise ConfigError(f"Focal alpha must be in [0, 1] and gamma >= 0, got {self.alpha}, {self.gamma}")
        if self.max_eval_examples < 0:
            raise ConfigError(f"max_eval_examples must be >= 0, got {self.max_eval_examples}")

    @classmethod
    def from_pipeline_config(cls, pipeline_config):
        section = pipeline_config['train']
        return cls(int(section['epochs']), int(section['batch_size']), float(section['lr']),
                   float(section['weight_decay']), int(section['plateau_patience']), float(section['plateau_factor']),
                   float(section['alpha']), float(section['gamma']), int(section['eval_every']),
                   int(section['max_steps']), bool(section['freeze_encoder']), int(section['max_eval_examples']),
                   int(pipeline_config['run']['seed']), pipeline_config['sampler']['strategy'])


@dataclass
class TrainResult:
    metrics_log: MetricsLog
    steps: int
    best_value: float
    best_step: int
    checkpoint_path: str = None
    best_path: str = None
    test: dict = None


def subsample_examples(examples, max_examples, seed):
    """At most ``max_examples`` examples (0 keeps all), chosen by a fixed generator and kept in order."""
    if not max_examples or len(examples) <= max_examples:
        return list(examples)
    rng = Utils.derive_rng(seed, 31)
    return [examples[i] for i in sorted(rng.choice(len(examples), size=max_examples, replace=False).tolist())]


def fixed_task_context(model, task, splits):
    """
    The one TaskContext shared by every document of ``task``.

    :return: (context, training examples left after drawing the in-context set)
    :raises InsufficientExamples: If ``prompt.n_inc`` examples cannot be drawn from the train split.
    """
    in_context, remaining = fix_in_context_examples(splits.get('train') or [], model.prompt_cfg.n_inc,
                                                    model.pipeline_config['run']['seed'])
    return model.task_context(task, in_context), remaining


def score_predictions(task, scores, labels, strategy, alpha=0.8, gamma=2.0):
    """
    (metric value, loss) for one split.

    Classification: AUROC and the focal loss of P(true class); with ``plain_text`` answers the
    loss is the error rate. Regression: MAE for both.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if task.task_type == 'regression':
        value = mae(scores, labels)
        return value, value
    value = auroc(scores, labels)
    if strategy == 'plain_text':
        return value, float(np.mean(scores != labels))
    p_true = np.where(labels == 1.0, scores, 1.0 - scores)
    p_true = np.clip(p_true, np.finfo(np.float64).tiny, 1.0)
    alphas = np.array([class_alpha(int(y), alpha) for y in labels])
    return value, focal_loss(p_true, alphas, gamma)


def evaluate(model, task, splits, split, mode='fine_tuned', threads=1, max_examples=0, alpha=0.8, gamma=2.0,
             strategy=None, seed=0):
    """
    Score ``split`` with the model as it stands.

    ``zero_shot`` evaluates without any fine-tuning through the YES/NO token distribution; it
    has no meaning for regression.
    Every document carries the same task context; with in-context examples the train split is
    scored without the examples drawn for that context.

    :return: ``{'split', 'metric_name', 'value', 'loss', 'count'}``.
    :raises UnknownSplit: If ``split`` is not one of the task's splits.
    :raises UnsupportedMode: For zero-shot regression.
    """
    if split not in splits:
        raise UnknownSplit(f"Unknown split '{split}', expected one of {sorted(splits)}")
    if mode not in EVAL_MODES:
        raise ConfigError(f"Evaluation mode must be one of {EVAL_MODES}, got {mode}")
    if mode == 'zero_shot':
        if task.task_type == 'regression':
            raise UnsupportedMode("Zero-shot evaluation of a regression task is not supported")
        strategy = 'token_distribution'
    strategy = strategy or task.answer_strategy
    ctx, remaining = fixed_task_context(model, task, splits)
    examples = subsample_examples(remaining if split == 'train' else splits[split], max_examples, seed)
    if not examples:
        raise ConfigError(f"Split '{split}' of task {task.task_id} has no examples")
    scores, _ = model.predict(examples, [ctx] * len(examples), strategy, threads)
    value, loss = score_predictions(task, scores, [e.label for e in examples], strategy, alpha, gamma)
    logger.info(f"{task.task_id} {split} ({mode}, {strategy}): {task.metric}={value:.6f} over {len(examples)} examples")
    return {'split': split, 'metric_name': task.metric, 'value': value, 'loss': loss, 'count': len(examples)}


def train(model, task, splits, cfg, run_dir=None, threads=1, metrics_log=None):
    """
    Fine-tune the encoder, projection and heads of ``model`` on ``task``.

    Each step samples, encodes and prompts every example of a batch at its own seed time,
    takes the mean focal (classification) or absolute-error (regression) loss and applies one
    optimizer update. Every ``eval_every`` steps, and once at the end, the validation split is
    scored; the plateau scheduler watches that value and the best parameters are kept. At the
    end the best parameters are restored and the test split, when present, is scored.
    With ``prompt.n_inc`` set, the in-context examples are drawn once and training runs on the
    examples after them.

    :raises ConfigError: If the train or validation split is empty, or a regression task lacks
        the mlp_head strategy.
    """
    if task.task_type == 'regression' and task.answer_strategy != 'mlp_head':
        raise ConfigError(f"Regression task {task.task_id} trains through mlp_head, not {task.answer_strategy}")
    train_examples = splits.get('train') or []
    if not train_examples:
        raise ConfigError(f"Task {task.task_id} has no training examples before the validation cutoff")
    if not splits.get('val'):
        raise ConfigError(f"Task {task.task_id} has no validation examples")
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    if metrics_log is None:
        metrics_log = MetricsLog(os.path.join(run_dir, 'metrics.jsonl') if run_dir else None)
    ctx, train_examples = fixed_task_context(model, task, splits)
    if cfg.freeze_encoder:
        model.store.freeze([COLUMN_PREFIX, GNN_PREFIX])
        logger.info("Column encoders and message passing are frozen")

    store = model.store
    optimizer = build_optimizer(store, cfg.lr, cfg.weight_decay)
    scheduler = ReduceLROnPlateau(optimizer, 'max' if task.higher_is_better else 'min',
                                  cfg.plateau_patience, cfg.plateau_factor)
    logger.info(f"Training {task.task_id}: {len(train_examples)} examples, "
                f"{store.num_parameters(trainable_only=True)} trainable of {store.num_parameters()} parameters")

    best_path = os.path.join(run_dir, 'best.bin') if run_dir else None
    state = {'best_value': None, 'best_step': 0, 'best_arrays': store.snapshot(), 'losses': []}

    def validate(step):
        if state['losses']:
            train_loss = float(np.mean(state['losses']))
            metrics_log.append(step, 'train', 'loss', train_loss, train_loss, optimizer.lr)
            state['losses'] = []
        result = evaluate(model, task, splits, 'val', threads=threads, max_examples=cfg.max_eval_examples,
                          alpha=cfg.alpha, gamma=cfg.gamma, seed=cfg.seed)
        metrics_log.append(step, 'val', result['metric_name'], result['value'], result['loss'], optimizer.lr)
        best = state['best_value']
        better = best is None or (result['value'] > best if task.higher_is_better else result['value'] < best)
        if better:
            state.update(best_value=result['value'], best_step=step, best_arrays=store.snapshot())
            if best_path:
                save_checkpoint(store, best_path)
        scheduler.step(result['value'])

    step, last_eval = 0, None
    done = False
    for epoch in range(cfg.epochs):
        order = Utils.derive_rng(cfg.seed, 21, epoch).permutation(len(train_examples))
        batches = range(0, len(order), cfg.batch_size)
        for start in tqdm(batches, desc=f'{task.task_id} epoch {epoch}', leave=False, disable=None):
            batch = [train_examples[i] for i in order[start:start + cfg.batch_size]]
            rngs = [Utils.derive_rng(cfg.seed, 22, step, i) for i in range(len(batch))]
            loss = model.batch_loss(task, batch, [ctx] * len(batch), cfg.alpha, cfg.gamma, True, rngs, threads)
            diff.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            state['losses'].append(loss.item())
            step += 1
            if step % cfg.eval_every == 0:
                validate(step)
                last_eval = step
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    if last_eval != step or state['best_value'] is None:
        validate(step)

    checkpoint_path = None
    if run_dir:
        checkpoint_path = os.path.join(run_dir, 'checkpoint.bin')
        save_checkpoint(store, checkpoint_path)
    store.load_arrays(state['best_arrays'])
    logger.info(f"Best validation {task.metric}={state['best_value']:.6f} at step {state['best_step']}")

    test = None
    if splits.get('test'):
        test = evaluate(model, task, splits, 'test', threads=threads, max_examples=cfg.max_eval_examples,
                        alpha=cfg.alpha, gamma=cfg.gamma, seed=cfg.seed)
        metrics_log.append(step, 'test', test['metric_name'], test['value'], test['loss'], optimizer.lr)
    return TrainResult(metrics_log, step, state['best_value'], state['best_step'], checkpoint_path, best_path, test)


def restore_checkpoint(store, path, strict=True):
    if not os.path.exists(path):
        raise MissingFile(f"Checkpoint {path} does not exist")
    store.load_arrays(load_checkpoint(path), strict=strict)
    logger.info(f"Loaded {len(store)} parameters from {path}")
