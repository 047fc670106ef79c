import json
import os

import numpy as np
import pytest

from rel2prompt.config import apply_assignments
from rel2prompt.diff import load_checkpoint
from rel2prompt.errors import ConfigError, SchemaMismatch, UnknownSplit, UnknownTask, UnsupportedMode
from rel2prompt.metrics import MetricsLog
from rel2prompt.pipeline import PromptModel
from rel2prompt.pretrainer import PretrainConfig, pretrain
from rel2prompt.prompt import LabeledExample
from rel2prompt.synth import generate, preset_config
from rel2prompt.trainer import (TrainConfig, evaluate, find_task, fixed_task_context, load_labels, load_task,
                                restore_checkpoint, split_examples, subsample_examples, train)

SHORT_RUN = ['train.max_steps=2', 'train.eval_every=1', 'train.batch_size=4', 'train.max_eval_examples=16']


@pytest.fixture
def setup(synth_suite, tiny_config):
    out, result = synth_suite

    def build(task_id='churn', *assignments):
        config = apply_assignments(tiny_config, SHORT_RUN + list(assignments))
        task = find_task(out, task_id, result.db)
        model = PromptModel(result.db, config, fit_cutoff=task.cutoffs['val'])
        splits = split_examples(load_labels(task, model.graph, model.index), task.cutoffs)
        return model, task, splits, TrainConfig.from_pipeline_config(config)
    return build


def test_task_manifest_and_splits(synth_suite, setup):
    out, _ = synth_suite
    model, task, splits, _ = setup()
    assert task.task_type == 'classification' and task.answer_strategy == 'token_distribution'
    assert task.label_path == os.path.join(os.path.abspath(out), 'labels', 'churn.csv')
    assert all(len(splits[name]) for name in ('train', 'val', 'test'))
    assert all(e.time < task.cutoffs['val'] for e in splits['train'])
    assert all(task.cutoffs['val'] <= e.time < task.cutoffs['test'] for e in splits['val'])
    assert all(e.time >= task.cutoffs['test'] for e in splits['test'])
    assert all(model.graph.table_of(e.node) == 'users' for e in splits['train'])
    order = [(e.time, e.node) for e in splits['train']]
    assert order == sorted(order)


def _write_task(tmp_path, raw):
    path = tmp_path / 'task.json'
    path.write_text(json.dumps(raw))
    return str(path)


def test_bad_task_manifests(tmp_path, synth_suite):
    _, result = synth_suite
    raw = result.tasks['churn']
    with pytest.raises(UnknownTask):
        load_task(str(tmp_path / 'missing.json'))
    with pytest.raises(SchemaMismatch):
        load_task(_write_task(tmp_path, {k: v for k, v in raw.items() if k != 'cutoffs'}))
    with pytest.raises(SchemaMismatch):
        load_task(_write_task(tmp_path, {**raw, 'target_table': 'drivers'}), result.db)
    with pytest.raises(ConfigError):
        load_task(_write_task(tmp_path, {**raw, 'answer_strategy': 'mlp_head'}))
    with pytest.raises(ConfigError):
        cutoffs = raw['cutoffs']
        load_task(_write_task(tmp_path, {**raw, 'cutoffs': {'val': cutoffs['test'], 'test': cutoffs['val']}}))
    regression = load_task(_write_task(tmp_path, {k: v for k, v in result.tasks['activity-count'].items()
                                                  if k not in ('answer_strategy', 'metric')}))
    assert (regression.answer_strategy, regression.metric, regression.higher_is_better) == ('mlp_head', 'mae', False)


def test_train_config_validation(tiny_config):
    assert TrainConfig.from_pipeline_config(tiny_config).temporal_strategy == 'last'
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(plateau_factor=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=2.0)


def test_subsampling_is_fixed_and_ordered():
    examples = list(range(50))
    chosen = subsample_examples(examples, 10, seed=4)
    assert len(chosen) == 10 and chosen == sorted(chosen)
    assert chosen == subsample_examples(examples, 10, seed=4)
    assert subsample_examples(examples, 0, seed=4) == examples


def test_evaluate(setup):
    model, task, splits, cfg = setup()
    first = evaluate(model, task, splits, 'val', max_examples=cfg.max_eval_examples)
    assert first['metric_name'] == 'auroc' and first['count'] == 16
    assert 0.0 <= first['value'] <= 1.0 and first['loss'] > 0.0
    assert evaluate(model, task, splits, 'val', max_examples=cfg.max_eval_examples) == first
    zero_shot = evaluate(model, task, splits, 'val', 'zero_shot', max_examples=cfg.max_eval_examples)
    assert zero_shot == first
    with pytest.raises(UnknownSplit):
        evaluate(model, task, splits, 'holdout')
    with pytest.raises(ConfigError):
        evaluate(model, task, splits, 'val', mode='few_shot')


def test_zero_shot_regression_is_unsupported(setup):
    model, task, splits, cfg = setup('activity-count')
    with pytest.raises(UnsupportedMode):
        evaluate(model, task, splits, 'val', 'zero_shot')
    result = evaluate(model, task, splits, 'val', max_examples=cfg.max_eval_examples)
    assert result['metric_name'] == 'mae' and result['value'] == result['loss']


def test_short_run_writes_artifacts(setup, tmp_path):
    model, task, splits, cfg = setup()
    frozen = {name: model.store[name].data.copy() for name in model.store.names() if name.startswith('decoder.')}
    assert frozen
    run_dir = str(tmp_path / 'run')
    result = train(model, task, splits, cfg, run_dir)
    assert result.steps == 2
    for name in ('metrics.jsonl', 'best.bin', 'checkpoint.bin'):
        assert os.path.exists(os.path.join(run_dir, name))
    rows = [json.loads(line) for line in open(os.path.join(run_dir, 'metrics.jsonl'), encoding='utf-8')]
    assert [(r['step'], r['split']) for r in rows] == [(1, 'train'), (1, 'val'), (2, 'train'), (2, 'val'), (2, 'test')]
    assert result.best_value == max(r['value'] for r in rows if r['split'] == 'val')
    assert rows[-1]['value'] == result.test['value']
    for name, data in frozen.items():
        np.testing.assert_array_equal(model.store[name].data, data)
        np.testing.assert_array_equal(load_checkpoint(os.path.join(run_dir, 'checkpoint.bin'))[name], data)
    best = load_checkpoint(os.path.join(run_dir, 'best.bin'))
    for name, array in best.items():
        np.testing.assert_array_equal(model.store[name].data, array)


def test_training_is_deterministic(setup, tmp_path):
    for run in ('a', 'b'):
        model, task, splits, cfg = setup()
        train(model, task, splits, cfg, str(tmp_path / run))
    for name in ('metrics.jsonl', 'checkpoint.bin'):
        with open(tmp_path / 'a' / name, 'rb') as a, open(tmp_path / 'b' / name, 'rb') as b:
            assert a.read() == b.read(), name


def test_frozen_encoder_keeps_message_passing_fixed(setup, tmp_path):
    model, task, splits, cfg = setup('churn', 'train.freeze_encoder=true')
    before = model.store.snapshot()
    train(model, task, splits, cfg, str(tmp_path / 'run'))
    after = load_checkpoint(str(tmp_path / 'run' / 'checkpoint.bin'))
    fixed = [name for name in before if name.startswith(('encoder.', 'gnn.'))]
    assert fixed
    for name in fixed:
        np.testing.assert_array_equal(after[name], before[name])
    assert any(not np.array_equal(after[name], before[name]) for name in before if name.startswith('project.'))


def test_regression_run(setup):
    model, task, splits, cfg = setup('activity-count')
    result = train(model, task, splits, cfg)
    assert result.steps == 2 and result.checkpoint_path is None
    assert [r['split'] for r in result.metrics_log.rows][-1] == 'test'
    assert result.best_value >= 0.0


def test_empty_splits_are_rejected(setup):
    model, task, splits, cfg = setup()
    with pytest.raises(ConfigError):
        train(model, task, {**splits, 'train': []}, cfg)
    with pytest.raises(ConfigError):
        train(model, task, {**splits, 'val': []}, cfg)


def test_checkpoint_restores_into_a_fresh_model(setup, tmp_path):
    model, task, splits, cfg = setup()
    train(model, task, splits, cfg, str(tmp_path / 'run'))
    fresh, _, _, _ = setup()
    restore_checkpoint(fresh.store, str(tmp_path / 'run' / 'best.bin'))
    assert evaluate(fresh, task, splits, 'val', max_examples=16) == evaluate(model, task, splits, 'val', max_examples=16)


def test_every_document_shares_one_in_context_set(setup, monkeypatch):
    model, task, splits, _ = setup('churn', 'prompt.n_inc=2')
    ctx, remaining = fixed_task_context(model, task, splits)
    assert ctx.text.count('example :') == 2
    held_out = [e for e in splits['train'] if e not in remaining]
    assert held_out and max(e.time for e in held_out) < min(e.time for e in remaining)

    seen = []

    def predict(examples, contexts, strategy, threads=1):
        seen.extend(c.text for c in contexts)
        return np.linspace(0.0, 1.0, len(examples)), None
    monkeypatch.setattr(model, 'predict', predict)
    evaluate(model, task, splits, 'val', max_examples=16)
    assert evaluate(model, task, splits, 'train')['count'] == len(remaining)
    assert len(seen) == 16 + len(remaining) and set(seen) == {ctx.text}


def _long_run(synth_suite, tiny_config, tmp_path, *assignments):
    out, result = synth_suite
    config = apply_assignments(tiny_config, ['train.epochs=20', 'train.lr=0.01', 'train.eval_every=20',
                                             'train.batch_size=16'] + list(assignments))
    task = find_task(out, 'churn', result.db)
    model = PromptModel(result.db, config, fit_cutoff=task.cutoffs['val'])
    splits = split_examples(load_labels(task, model.graph, model.index), task.cutoffs)
    return train(model, task, splits, TrainConfig.from_pipeline_config(config), str(tmp_path / 'run'))


@pytest.mark.slow
def test_churn_is_learned(synth_suite, tiny_config, tmp_path):
    assert _long_run(synth_suite, tiny_config, tmp_path).best_value >= 0.95


@pytest.mark.slow
def test_frozen_random_encoder_cannot_learn_churn(synth_suite, tiny_config, tmp_path):
    assert _long_run(synth_suite, tiny_config, tmp_path, 'train.freeze_encoder=true').best_value <= 0.75


def _pretrain_then_tune(synth_suite, tiny_config, tmp_path, mode, seed):
    out, result = synth_suite
    config = apply_assignments(tiny_config, [f'run.seed={seed}', f'sampler.rng_seed={seed}',
                                             'train.epochs=5', 'train.lr=0.01', 'train.eval_every=20',
                                             'train.batch_size=16'])
    task = find_task(out, 'churn', result.db)
    model = PromptModel(result.db, config, fit_cutoff=task.cutoffs['val'])
    pretrain(model, PretrainConfig(epochs=10, p_mask=0.5, mode=mode, lr=1e-2, batch_size=8, seeds_per_epoch=32),
             MetricsLog(), run_seed=seed, t_star=task.cutoffs['val'] - 1)
    splits = split_examples(load_labels(task, model.graph, model.index), task.cutoffs)
    run = train(model, task, splits, TrainConfig.from_pipeline_config(config), str(tmp_path / f'{mode}-{seed}'))
    return run.best_value


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_cell_masking_transfers_worse_than_entity_masking(synth_suite, tiny_config, tmp_path, seed):
    entity = _pretrain_then_tune(synth_suite, tiny_config, tmp_path, 'entity', seed)
    cell = _pretrain_then_tune(synth_suite, tiny_config, tmp_path, 'cell', seed)
    assert cell < entity


@pytest.mark.slow
def test_untrained_model_scores_near_chance(tmp_path, tiny_config):
    out = str(tmp_path / 'null')
    result = generate(preset_config('churn', num_users=500, num_items=20, num_events=6000, seed=9), out)
    task = find_task(out, 'churn', result.db)
    model = PromptModel(result.db, tiny_config, fit_cutoff=task.cutoffs['val'])
    splits = split_examples(load_labels(task, model.graph, model.index), task.cutoffs)
    pool = subsample_examples(splits['train'] + splits['val'] + splits['test'], 2000, seed=9)
    assert len(pool) == 2000
    # balanced labels drawn independently of the data
    labels = np.random.default_rng(9).permutation([0.0, 1.0] * 1000)
    balanced = [LabeledExample(e.node, e.time, float(y)) for e, y in zip(pool, labels)]
    result = evaluate(model, task, {'val': balanced}, 'val')
    assert result['count'] == 2000 and 0.4 <= result['value'] <= 0.6
