"""Command-line entry point: ``rel2prompt <command> [options]``."""
import json
import logging
import os
import sys
import tempfile

import click

from . import __version__
from .config import config_to_json, resolve_config
from .diff import check_gradients, save_checkpoint
from .encoder import ColumnEncoder
from .entity_graph import build_entity_graph, build_schema_graph
from .errors import ConfigError, Rel2PromptError, UnknownNode, UsageError
from .metrics import MetricsLog
from .pipeline import PromptModel
from .pretrainer import PretrainConfig, pretrain
from .relational_store import build_key_index, load_database
from .synth import SynthConfig, generate
from .temporal_sampler import SamplerConfig, sample_subgraph
from .trainer import (TrainConfig, evaluate, find_task, fixed_task_context, load_labels, restore_checkpoint,
                      split_examples, train)
from .utils import POS_INF, Utils
from .vocab import Vocab

logger = logging.getLogger('rel2prompt')

MANIFEST_NAME = 'manifest.json'
VOCAB_NAME = 'vocab.txt'
COLUMNS_NAME = 'columns.json'


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


def _console_logging():
    log = logging.getLogger('rel2prompt')
    for handler in list(log.handlers):
        log.removeHandler(handler)
        handler.close()
    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter('%(levelname)s %(message)s'))
    console.setLevel(logging.WARNING)
    log.addHandler(console)
    log.setLevel(logging.INFO)


def prepare_run(options, assignments=()):
    """
    Resolve the config for one command, print it, and set up the run directory.

    Named flags arrive as extra ``section.key=value`` assignments and win over ``--set``.
    ``--seed`` drives every generator (run, sampler and synthetic data).
    """
    assignments = list(options['set']) + [a for a in assignments if a is not None]
    if options['seed'] is not None:
        assignments += [f"run.seed={options['seed']}", f"sampler.rng_seed={options['seed']}"]
    if options['threads'] is not None:
        assignments.append(f"run.threads={options['threads']}")
    try:
        config = resolve_config(options['config'], assignments)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    click.echo(config_to_json(config))

    out = options['out']
    if out:
        os.makedirs(out, exist_ok=True)
        Utils.get_logger(LOG_DIRECTORY=os.path.join(out, 'logs'), append_logs=False, console_level=logging.WARNING)
        Utils.dump_json(config, os.path.join(out, 'config.json'))
    else:
        _console_logging()
    return config


def run_options(require_out=False):
    def decorate(f):
        f = click.option('--set', 'set_', multiple=True, metavar='SECTION.KEY=VALUE',
                         help='Override any config value; repeatable.')(f)
        f = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                         help='YAML or JSON file with config overrides.')(f)
        f = click.option('--out', type=click.Path(file_okay=False), required=require_out,
                         help='Run directory for every file this command writes.')(f)
        f = click.option('--threads', type=click.IntRange(min=1), default=None, help='Worker threads (default 1).')(f)
        f = click.option('--seed', type=int, default=None, help='Seed for every random choice of the run.')(f)
        return f
    return decorate


def _options(seed, threads, out, config_path, set_):
    return {'seed': seed, 'threads': threads, 'out': out, 'config': config_path, 'set': set_}


def _flag(key, value):
    if value is None:
        return None
    if isinstance(value, bool):
        value = 'true' if value else 'false'
    return f'{key}={value}'


def _load_db(data, config):
    return load_database(os.path.join(data, MANIFEST_NAME), data, int(config['store']['max_bad_cells']))


def _seed_node(db, graph, index, table, key):
    if table not in db.tables:
        raise UnknownNode(f"Unknown table '{table}', expected one of {db.table_names}")
    row = index.position(table, key)
    if row is None:
        raise UnknownNode(f"Table {table} has no row with primary key '{key}'")
    return graph.node_id(table, row)


def _seed_time(text, graph):
    if text is None:
        times = [int(t.max()) for t in graph.times.values() if len(t)]
        return max(times) if times else POS_INF
    try:
        return Utils.parse_timestamp(text)
    except ValueError as e:
        raise UsageError(f"Seed time '{text}' is not an epoch or ISO 8601 timestamp") from e


def _vocab_near(checkpoint):
    if not checkpoint:
        return None
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), VOCAB_NAME)
    if os.path.exists(path):
        logger.info(f"Reusing vocab {path}")
        return Vocab.load(path)
    return None


def _columns_near(checkpoint, db):
    if not checkpoint:
        return None
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), COLUMNS_NAME)
    if os.path.exists(path):
        logger.info(f"Reusing column statistics {path}")
        return ColumnEncoder.load(path, db)
    return None


def _build_model(db, config, checkpoint=None, fit_cutoff=POS_INF):
    model = PromptModel(db, config, vocab=_vocab_near(checkpoint), fit_cutoff=fit_cutoff,
                        columns=_columns_near(checkpoint, db))
    if checkpoint:
        restore_checkpoint(model.store, checkpoint)
    return model


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.version_option(__version__, prog_name='rel2prompt')
def cli():
    """Relational databases as graph prompts for a small causal decoder."""


@cli.command()
@click.option('--preset', default=None, help='Synthetic suite preset (churn, driver-dnf-like, ..., memorize).')
@click.option('--users', type=click.IntRange(min=1), default=None, help='Number of users.')
@click.option('--items', type=click.IntRange(min=1), default=None, help='Number of items.')
@click.option('--events', type=click.IntRange(min=0), default=None, help='Target number of events.')
@run_options(require_out=True)
def synth(preset, users, items, events, seed, threads, out, config_path, set_):
    """Generate a synthetic database with churn and activity-count tasks under --out."""
    config = prepare_run(_options(seed, threads, out, config_path, set_),
                         [_flag('synth.preset', preset), _flag('synth.num_users', users),
                          _flag('synth.num_items', items), _flag('synth.num_events', events)])
    result = generate(SynthConfig.from_pipeline_config(config, seed=config['run']['seed']), out)
    summary = {'tables': {t: result.db.num_rows(t) for t in result.db.table_names}, 'tasks': {}}
    for task_id, frame in result.labels.items():
        summary['tasks'][task_id] = {'examples': int(len(frame)), 'mean_label': round(float(frame['label'].mean()), 6)}
    _echo_json(summary)
    return 0


@cli.command('build-graph')
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Database directory.')
@run_options()
def build_graph(data, seed, threads, out, config_path, set_):
    """Load a database, report validation problems and build the entity graph."""
    config = prepare_run(_options(seed, threads, out, config_path, set_))
    db = _load_db(data, config)
    schema = build_schema_graph(db)
    graph = build_entity_graph(db, build_key_index(db))
    report = {'validation': db.report.to_dict(), 'graph': graph.stats(), 'schema_connected': schema.is_connected()}
    _echo_json(report)
    if out:
        with open(os.path.join(out, 'schema.dot'), 'w', encoding='utf-8') as file:
            file.write(schema.to_dot())
        Utils.dump_json(report, os.path.join(out, 'graph_stats.json'))
    return 0


@cli.command()
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Database directory.')
@click.option('--seed-table', '--table', 'table', required=True, help='Table of the seed entity.')
@click.option('--seed-pk', '--key', 'key', required=True, help='Primary key of the seed entity.')
@click.option('--time', 'seed_time', default=None, help='Seed time (epoch seconds or ISO 8601); default the latest timestamp.')
@click.option('--fanouts', default=None, help='Comma-separated neighbors per relation per hop, e.g. 2,2.')
@click.option('--strategy', type=click.Choice(['uniform', 'last']), default=None, help='Temporal neighbor selection.')
@click.option('--strict/--inclusive', default=None, help='Keep only neighbors strictly before the seed time.')
@run_options()
def sample(data, table, key, seed_time, fanouts, strategy, strict, seed, threads, out, config_path, set_):
    """Sample a temporal subgraph around one entity and print its statistics and edge list."""
    fanouts = f"[{fanouts}]" if fanouts else None
    config = prepare_run(_options(seed, threads, out, config_path, set_),
                         [_flag('sampler.fanouts', fanouts), _flag('sampler.strategy', strategy),
                          _flag('sampler.strict_time', strict)])
    db = _load_db(data, config)
    index = build_key_index(db)
    graph = build_entity_graph(db, index)
    node = _seed_node(db, graph, index, table, key)
    sub = sample_subgraph(graph, node, _seed_time(seed_time, graph), SamplerConfig.from_pipeline_config(config))
    stats = sub.stats(graph)
    stats['edges'] = [[f'{graph.table_of(w)}:{graph.row_of(w)}', f'{graph.table_of(v)}:{graph.row_of(v)}', rel.name]
                      for w, v, rel in sub.edges]
    _echo_json(stats)
    if out:
        Utils.dump_json(stats, os.path.join(out, 'subgraph.json'))
    return 0


@cli.command('dump-prompt')
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Database directory.')
@click.option('--seed-table', '--table', 'table', required=True, help='Table of the seed entity.')
@click.option('--seed-pk', '--key', 'key', required=True, help='Primary key of the seed entity.')
@click.option('--time', 'seed_time', default=None, help='Seed time; default the latest timestamp.')
@click.option('--task', 'task_id', default=None, help='Task whose text context is shown.')
@click.option('--init', 'checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Checkpoint to load before encoding.')
@run_options()
def dump_prompt(data, table, key, seed_time, task_id, checkpoint, seed, threads, out, config_path, set_):
    """Print the denormalized JSON document and the graph-prompt slot listing for one entity."""
    config = prepare_run(_options(seed, threads, out, config_path, set_))
    db = _load_db(data, config)
    task = find_task(data, task_id, db) if task_id else None
    model = _build_model(db, config, checkpoint, task.cutoffs['val'] if task else POS_INF)
    node = _seed_node(db, model.graph, model.index, table, key)
    t_star = _seed_time(seed_time, model.graph)
    prompt, _ = model.graph_prompt(node, t_star)
    document = {
        'seed': {'table': table, 'key': key, 'time': Utils.format_timestamp(t_star)},
        'document': json.loads(model.document(node, t_star)),
        'slots': len(prompt.slots),
        'vector_slots': len(prompt.vector_slots),
    }
    if task:
        splits = {}
        if model.prompt_cfg.n_inc:
            splits = split_examples(load_labels(task, model.graph, model.index), task.cutoffs)
        document['task_context'] = fixed_task_context(model, task, splits)[0].text
    listing = prompt.listing(model.graph)
    _echo_json(document)
    click.echo(listing, nl=False)
    if out:
        Utils.dump_json(document, os.path.join(out, 'prompt.json'))
        with open(os.path.join(out, 'slots.txt'), 'w', encoding='utf-8') as file:
            file.write(listing)
    return 0


@cli.command('pretrain')
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Database directory.')
@click.option('--task', 'task_id', default=None,
              help='Task whose validation cutoff bounds the pretraining data and column statistics.')
@click.option('--epochs', type=click.IntRange(min=0), default=None, help='Pretraining epochs.')
@click.option('--p-mask', type=click.FloatRange(0.0, 1.0), default=None, help='Fraction of subgraph nodes masked.')
@click.option('--mode', type=click.Choice(['entity', 'cell']), default=None, help='Mask whole entities or single cells.')
@run_options(require_out=True)
def pretrain_command(data, task_id, epochs, p_mask, mode, seed, threads, out, config_path, set_):
    """Masked attribute pretraining; writes checkpoint.bin, vocab.txt, columns.json and pretrain_loss.jsonl."""
    config = prepare_run(_options(seed, threads, out, config_path, set_),
                         [_flag('pretrain.epochs', epochs), _flag('pretrain.p_mask', p_mask),
                          _flag('pretrain.mode', mode)])
    db = _load_db(data, config)
    task = find_task(data, task_id, db) if task_id else None
    cutoff = task.cutoffs['val'] if task else POS_INF
    model = PromptModel(db, config, fit_cutoff=cutoff)
    model.vocab.save(os.path.join(out, VOCAB_NAME))
    model.columns.save(os.path.join(out, COLUMNS_NAME))
    metrics_log = MetricsLog(os.path.join(out, 'pretrain_loss.jsonl'), bool(config['run']['record_wall_time']))
    pretrain(model, PretrainConfig.from_pipeline_config(config), metrics_log, run_seed=config['run']['seed'],
             t_star=cutoff - 1 if task else None)
    save_checkpoint(model.store, os.path.join(out, 'checkpoint.bin'))
    last = metrics_log.rows[-1] if metrics_log.rows else None
    _echo_json({'epochs': len(metrics_log.rows), 'final': last})
    return 0


def _task_setup(data, task_id, config, checkpoint):
    db = _load_db(data, config)
    task = find_task(data, task_id, db)
    model = _build_model(db, config, checkpoint, task.cutoffs['val'])
    examples = load_labels(task, model.graph, model.index)
    return model, task, split_examples(examples, task.cutoffs)


@cli.command('train')
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Database directory.')
@click.option('--task', 'task_id', required=True, help='Task id under <data>/tasks/.')
@click.option('--init', 'checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Start from this checkpoint (for example a pretraining run).')
@click.option('--epochs', type=click.IntRange(min=0), default=None, help='Fine-tuning epochs.')
@click.option('--lr', type=float, default=None, help='Learning rate.')
@click.option('--freeze-encoder/--train-encoder', default=None, help='Keep column encoders and message passing fixed.')
@run_options(require_out=True)
def train_command(data, task_id, checkpoint, epochs, lr, freeze_encoder, seed, threads, out, config_path, set_):
    """Fine-tune on a task; writes metrics.jsonl, best.bin, checkpoint.bin, vocab.txt and columns.json."""
    config = prepare_run(_options(seed, threads, out, config_path, set_),
                         [_flag('train.epochs', epochs), _flag('train.lr', lr),
                          _flag('train.freeze_encoder', freeze_encoder)])
    model, task, splits = _task_setup(data, task_id, config, checkpoint)
    model.vocab.save(os.path.join(out, VOCAB_NAME))
    model.columns.save(os.path.join(out, COLUMNS_NAME))
    metrics_log = MetricsLog(os.path.join(out, 'metrics.jsonl'), bool(config['run']['record_wall_time']))
    result = train(model, task, splits, TrainConfig.from_pipeline_config(config), out,
                   int(config['run']['threads']), metrics_log)
    _echo_json({'task': task.task_id, 'steps': result.steps, 'best_step': result.best_step,
                f'best_val_{task.metric}': result.best_value, 'test': result.test})
    return 0


@cli.command('eval')
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Database directory.')
@click.option('--task', 'task_id', required=True, help='Task id under <data>/tasks/.')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Parameters to evaluate; a fresh model when omitted.')
@click.option('--split', default='test', help='train, val or test.')
@click.option('--mode', type=click.Choice(['fine_tuned', 'zero_shot']), default='fine_tuned', help='Evaluation mode.')
@click.option('--max-examples', type=click.IntRange(min=0), default=None, help='Score at most this many examples.')
@run_options()
def eval_command(data, task_id, checkpoint, split, mode, max_examples, seed, threads, out, config_path, set_):
    """Score a split of a task; zero_shot skips fine-tuning and reads the YES/NO distribution."""
    config = prepare_run(_options(seed, threads, out, config_path, set_),
                         [_flag('train.max_eval_examples', max_examples)])
    model, task, splits = _task_setup(data, task_id, config, checkpoint)
    train_cfg = TrainConfig.from_pipeline_config(config)
    result = evaluate(model, task, splits, split, mode, int(config['run']['threads']), train_cfg.max_eval_examples,
                      train_cfg.alpha, train_cfg.gamma, seed=train_cfg.seed)
    result['mode'] = mode
    _echo_json(result)
    if out:
        Utils.dump_json(result, os.path.join(out, 'eval.json'))
    return 0


GRAD_CHECK_SETTINGS = (
    'encoder.layers=2', 'encoder.hidden_dim=8', 'encoder.column_dim=6', 'encoder.projection_dim=8',
    'encoder.text_buckets=16', 'encoder.dropout=0.0', 'decoder.layers=1', 'decoder.heads=2', 'decoder.head_hidden=4',
    'sampler.fanouts=[2,2]', 'prompt.n_nest=2', 'prompt.zeta=1',
)


@cli.command('grad-check')
@click.option('--tol', type=float, default=1e-4, show_default=True, help='Largest accepted relative error.')
@click.option('--step', 'h', type=float, default=1e-5, show_default=True, help='Central-difference step.')
@click.option('--coords', type=click.IntRange(min=1), default=8, show_default=True,
              help='Coordinates checked per parameter.')
@run_options()
def grad_check(tol, h, coords, seed, threads, out, config_path, set_):
    """Compare analytic and finite-difference gradients of the full pipeline on a tiny subgraph."""
    options = _options(seed, threads, out, config_path, tuple(GRAD_CHECK_SETTINGS) + tuple(set_))
    config = prepare_run(options, ['synth.preset=memorize'])
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(out, 'data') if out else tmp
        generate(SynthConfig.from_pipeline_config(config, seed=config['run']['seed']), data)
        model, task, splits = _task_setup(data, 'churn', config, None)
        examples = [e for e in splits['train'] if len(model.sample(e.node, e.time)) > 1] or splits['train']
        example = examples[0]
        ctx = model.task_context(task)
        sub = model.sample(example.node, example.time)
        alpha, gamma = float(config['train']['alpha']), float(config['train']['gamma'])

        def loss():
            return model.example_loss(task, example, ctx, alpha, gamma)

        error = check_gradients(loss, model.store, h=h, tol=tol, max_coords=coords, rng_seed=config['run']['seed'])
        report = {'max_relative_error': error, 'tol': tol, 'passed': bool(error <= tol), 'subgraph_nodes': len(sub),
                  'parameters': model.store.num_parameters(trainable_only=True)}
    _echo_json(report)
    if out:
        Utils.dump_json(report, os.path.join(out, 'grad_check.json'))
    if error > tol:
        logger.error(f"Gradient check failed: max relative error {error:.3e} > {tol:.1e}")
        return 1
    return 0


def _error_payload(error):
    message = error.args[0] if error.args else str(error)
    return json.dumps({'error': type(error).__name__, 'message': str(message)}, sort_keys=True)


def run(argv=None):
    """
    Run one command and return its exit code.

    0 on success, 2 for usage errors (unknown commands or flags, bad values), 1 for any other
    failure, reported as one JSON object on stderr.
    """
    try:
        rv = cli.main(args=argv, prog_name='rel2prompt', standalone_mode=False)
    except click.exceptions.Abort:
        click.echo(_error_payload(RuntimeError('aborted')), err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except UsageError as e:
        click.echo(_error_payload(e), err=True)
        return 2
    except Rel2PromptError as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(_error_payload(e), err=True)
        return 1
    except (OSError, ArithmeticError, MemoryError) as e:
        logger.exception(f"{type(e).__name__}: {e}")
        click.echo(_error_payload(e), err=True)
        return 1
    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(run(sys.argv[1:]))
