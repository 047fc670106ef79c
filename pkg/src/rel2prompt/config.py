"""Pipeline configuration: one nested default dict, layered overrides, resolution for a run.

Layers, lowest first: ``DEFAULT_PIPELINE_CONFIG`` ← config file (YAML or JSON) ← ``REL2PROMPT_*``
environment variables (a ``.env`` file is loaded when present) ← ``--set section.key=value`` flags.
"""
import copy
import json
import logging
import os

import dotenv
import yaml

from .errors import ConfigError

logger = logging.getLogger('rel2prompt')

ENV_PREFIX = 'REL2PROMPT_'

DEFAULT_PIPELINE_CONFIG = {
    'store': {
        'max_bad_cells': 0,
    },
    'sampler': {
        'fanouts': [16, 16],
        'strategy': 'last',
        'strict_time': False,
        'rng_seed': 0,
    },
    'encoder': {
        'layers': 2,
        'hidden_dim': 128,
        'column_dim': 128,
        'text_buckets': 1024,
        'dropout': 0.1,
        'projection_dim': 64,
        'relative_time': True,
        'time_scale': 2592000,
        'init_scale': 1.0,
    },
    'prompt': {
        'n_nest': 8,
        'zeta': 1,
        'include_pooled': True,
        'n_inc': 0,
    },
    'decoder': {
        'layers': 2,
        'heads': 4,
        'context': 512,
        'trainable': False,
        'max_new_tokens': 32,
        'head_hidden': 32,
    },
    'pretrain': {
        'epochs': 10,
        'p_mask': 0.5,
        'mode': 'entity',
        'permute': True,
        'lr': 1e-3,
        'batch_size': 8,
        'seeds_per_epoch': 64,
    },
    'train': {
        'epochs': 10,
        'batch_size': 16,
        'lr': 1e-3,
        'weight_decay': 0.0,
        'plateau_patience': 100,
        'plateau_factor': 0.8,
        'alpha': 0.8,
        'gamma': 2.0,
        'eval_every': 20,
        'max_steps': 0,
        'freeze_encoder': False,
        'max_eval_examples': 0,
    },
    'synth': {
        'preset': 'churn',
        'num_users': None,
        'num_items': None,
        'num_events': None,
    },
    'run': {
        'seed': 0,
        'threads': 1,
        'record_wall_time': False,
    },
}


def _parse_scalar(text):
    # yaml gives ints, floats, bools and [lists] the way a shell user would write them
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _set_path(config, dotted, value, source):
    parts = dotted.split('.')
    if len(parts) != 2:
        raise ConfigError(f"Config key '{dotted}' from {source} must look like section.key")
    section, key = parts
    if section not in config or key not in config[section]:
        raise ConfigError(f"Unknown config key '{dotted}' from {source}")
    config[section][key] = value


def merge_config(base, overrides, source='overrides'):
    """Deep-merge a two-level mapping into a copy of ``base``; unknown keys are rejected."""
    merged = copy.deepcopy(base)
    for section, values in (overrides or {}).items():
        if not isinstance(values, dict):
            raise ConfigError(f"Config section '{section}' from {source} must be a mapping")
        for key, value in values.items():
            _set_path(merged, f'{section}.{key}', value, source)
    return merged


def load_config_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"Config file {path} does not exist")
    try:
        with open(path, 'r', encoding='utf-8') as file:
            if path.endswith('.json'):
                return json.load(file)
            return yaml.safe_load(file) or {}
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Config file {path} does not parse: {e}") from e


def env_overrides(environ=None):
    """``REL2PROMPT_TRAIN__LR=1e-4`` becomes ``{'train': {'lr': 1e-4}}``."""
    environ = os.environ if environ is None else environ
    overrides = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or '__' not in name:
            continue
        section, key = name[len(ENV_PREFIX):].lower().split('__', 1)
        overrides.setdefault(section, {})[key] = _parse_scalar(raw)
    return overrides


def apply_assignments(config, assignments):
    config = copy.deepcopy(config)
    for assignment in assignments or ():
        if '=' not in assignment:
            raise ConfigError(f"Override '{assignment}' must look like section.key=value")
        dotted, raw = assignment.split('=', 1)
        _set_path(config, dotted.strip(), _parse_scalar(raw.strip()), '--set')
    return config


def resolve_config(config_path=None, assignments=None, dotenv_path='.env', environ=None):
    """
    Build the resolved pipeline config for one run.

    :param config_path: Optional YAML/JSON file with a partial config.
    :type config_path: str, optional
    :param assignments: ``section.key=value`` strings from the command line.
    :type assignments: list[str], optional
    :return: The fully resolved nested config dict.
    :rtype: dict
    """
    if dotenv_path and os.path.exists(dotenv_path):
        if dotenv.load_dotenv(dotenv_path):
            logger.debug(f"Loaded .env file from {dotenv_path}")
    config = copy.deepcopy(DEFAULT_PIPELINE_CONFIG)
    if config_path:
        config = merge_config(config, load_config_file(config_path), source=config_path)
    config = merge_config(config, env_overrides(environ), source='environment')
    config = apply_assignments(config, assignments)
    return config


def config_to_json(config):
    return json.dumps(config, indent=2, sort_keys=True)
