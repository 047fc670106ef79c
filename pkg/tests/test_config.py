import json

import pytest

from rel2prompt.config import (DEFAULT_PIPELINE_CONFIG, apply_assignments, config_to_json, env_overrides,
                               merge_config, resolve_config)
from rel2prompt.errors import ConfigError


def test_defaults_without_overrides():
    config = resolve_config(dotenv_path=None, environ={})
    assert config == DEFAULT_PIPELINE_CONFIG
    assert config is not DEFAULT_PIPELINE_CONFIG


def test_layers_apply_in_order(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text('train:\n  lr: 0.01\n  epochs: 3\nsampler:\n  fanouts: [4, 2]\n')
    environ = {'REL2PROMPT_TRAIN__LR': '0.005', 'REL2PROMPT_RUN__THREADS': '4', 'UNRELATED': 'x'}
    config = resolve_config(str(path), ['train.lr=0.002'], dotenv_path=None, environ=environ)
    assert config['train']['lr'] == 0.002
    assert config['train']['epochs'] == 3
    assert config['run']['threads'] == 4
    assert config['sampler']['fanouts'] == [4, 2]


def test_json_config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'decoder': {'trainable': True}}))
    assert resolve_config(str(path), dotenv_path=None, environ={})['decoder']['trainable'] is True


def test_assignment_values_are_typed():
    config = apply_assignments(DEFAULT_PIPELINE_CONFIG, ['prompt.include_pooled=false', 'sampler.fanouts=[2,2]',
                                                         'sampler.strategy=uniform', 'train.weight_decay=1e-2'])
    assert config['prompt']['include_pooled'] is False
    assert config['sampler']['fanouts'] == [2, 2]
    assert config['sampler']['strategy'] == 'uniform'
    assert config['train']['weight_decay'] == 0.01
    assert DEFAULT_PIPELINE_CONFIG['sampler']['strategy'] == 'last'


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        apply_assignments(DEFAULT_PIPELINE_CONFIG, ['train.learning_rate=1'])
    with pytest.raises(ConfigError):
        apply_assignments(DEFAULT_PIPELINE_CONFIG, ['lr=1'])
    with pytest.raises(ConfigError):
        apply_assignments(DEFAULT_PIPELINE_CONFIG, ['train.lr'])
    with pytest.raises(ConfigError):
        merge_config(DEFAULT_PIPELINE_CONFIG, {'train': 5})
    with pytest.raises(ConfigError):
        resolve_config(str(tmp_path / 'absent.yaml'), dotenv_path=None, environ={})


def test_env_overrides():
    assert env_overrides({'REL2PROMPT_ENCODER__HIDDEN_DIM': '32', 'REL2PROMPT_NOSECTION': '1'}) == \
        {'encoder': {'hidden_dim': 32}}


def test_dotenv_file_is_read(tmp_path, monkeypatch):
    env_file = tmp_path / '.env'
    env_file.write_text('REL2PROMPT_PRETRAIN__P_MASK=0.25\n')
    monkeypatch.delenv('REL2PROMPT_PRETRAIN__P_MASK', raising=False)
    config = resolve_config(dotenv_path=str(env_file))
    monkeypatch.delenv('REL2PROMPT_PRETRAIN__P_MASK', raising=False)
    assert config['pretrain']['p_mask'] == 0.25


def test_config_json_is_stable():
    assert config_to_json(DEFAULT_PIPELINE_CONFIG) == config_to_json(json.loads(config_to_json(DEFAULT_PIPELINE_CONFIG)))
