from pathlib import Path

import pytest
import yaml

from consistency_at.attack.objectives import LossKind
from consistency_at.config import RunConfig, load_config, save_resolved
from consistency_at.core.types import Norm
from consistency_at.errors import ConfigError
from consistency_at.objective.losses import Method, Regularizer

REPO_ROOT = Path(__file__).resolve().parent.parent


def write_yaml(path, document):
    path.write_text(yaml.safe_dump(document))
    return path


def test_shipped_configs_load():
    config = load_config(REPO_ROOT / 'config.yaml')
    assert config == RunConfig()
    for recipe in sorted((REPO_ROOT / 'recipes').glob('*.yaml')):
        load_config(recipe)


def test_defaults():
    config = RunConfig()
    assert config.loss.method is Method.AT
    assert config.loss.regularizer is Regularizer.JS_CONSISTENCY
    assert config.loss.lam == 1.0
    assert config.loss.tau == 0.5
    assert config.train.batch_size == 128
    assert config.attack_spec('pgd10_train').threat.epsilon == pytest.approx(8 / 255)


def test_flat_and_nested_keys_agree(tmp_path):
    flat = write_yaml(tmp_path / 'flat.yaml', {'loss.lambda': 2, 'attack.pgd10_train.epsilon': '4/255'})
    nested = write_yaml(tmp_path / 'nested.yaml', {'loss': {'lambda': 2}, 'attack': {'pgd10_train': {'epsilon': '4/255'}}})

    a, b = load_config(flat), load_config(nested)
    assert a == b
    assert a.loss.lam == 2.0
    assert a.attack_spec('pgd10_train').threat.epsilon == pytest.approx(4 / 255)


def test_overrides_take_precedence(tmp_path):
    path = write_yaml(tmp_path / 'c.yaml', {'loss.lambda': 2})
    assert load_config(path, {'loss.lambda': 0.5}).loss.lam == 0.5


def test_unknown_key_is_named(tmp_path):
    path = write_yaml(tmp_path / 'c.yaml', {'loss.lamda': 2})
    with pytest.raises(ConfigError) as excinfo:
        load_config(path)
    assert excinfo.value.key == 'loss.lamda'


def test_malformed_yaml_is_a_config_error(tmp_path):
    path = tmp_path / 'broken.yaml'
    path.write_text('loss.lambda: [1, 2\n')
    with pytest.raises(ConfigError) as excinfo:
        load_config(path)
    assert excinfo.value.key == str(path)


@pytest.mark.parametrize('key,value', [
    ('loss.method', 'PGD'),
    ('loss.tau', 0),
    ('loss.lambda', -1),
    ('data.fraction', 0),
    ('augment.policy', 'randaugment'),
    ('train.attack', 'fgsm'),
    ('attack.pgd10_train.norm', 'l3'),
    ('attack.pgd10_train.unknown', 1),
    ('attack.myattack.steps', 5),
    ('run.progress', 'yes'),
])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        RunConfig.from_flat({key: value})


def test_switch_needs_both_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_flat({'augment.switch_epoch': 10})


def test_config_hash_ignores_output_location():
    config = RunConfig()
    moved = config.with_values({'run.output_dir': 'elsewhere', 'run.progress': False})
    assert moved.config_hash == config.config_hash
    assert config.with_values({'loss.lambda': 2.0}).config_hash != config.config_hash
    assert config.with_values({'run.seed': 1}).config_hash != config.config_hash


def test_attack_overrides():
    config = RunConfig.from_flat({
        'attack.pgd20_eval.epsilon': '4/255',
        'attack.l2_train.base': 'pgd10_train',
        'attack.l2_train.norm': 'l2',
        'attack.l2_train.epsilon': 0.5,
        'attack.l2_train.step_size': 0.1,
        'train.attack': 'l2_train',
    })
    eval_spec = config.attack_spec('pgd20_eval')
    assert eval_spec.threat.epsilon == pytest.approx(4 / 255)
    assert eval_spec.threat.step_size == pytest.approx(2 * (4 / 255) / 20)

    custom = config.attack_spec('l2_train')
    assert custom.threat.norm is Norm.L2
    assert custom.loss_kind is LossKind.CE
    with pytest.raises(ConfigError):
        config.attack_spec('nonexistent')


def test_policy_for_epoch():
    config = RunConfig.from_flat({'augment.policy': 'autoaugment', 'augment.switch_epoch': 5,
                                  'augment.policy_after_switch': 'base'})
    assert config.policy_for_epoch(4).name == 'autoaugment'
    assert config.policy_for_epoch(5).name == 'base'


def test_custom_policy_ops():
    config = RunConfig.from_flat({'augment.policy': 'custom',
                                  'augment.ops': [{'kind': 'hflip', 'probability': 0.5}]})
    assert config.policy_for_epoch(0).name == 'custom'
    with pytest.raises(ConfigError):
        RunConfig.from_flat({'augment.policy': 'custom'})


def test_save_resolved_round_trip(tmp_path):
    config = RunConfig.from_flat({'loss.lambda': '1/2', 'attack.pgd10_train.steps': 5})
    path = tmp_path / 'resolved.yaml'
    save_resolved(config, path)

    document = yaml.safe_load(path.read_text())
    assert document['config_hash'] == config.config_hash
    assert document['loss.lambda'] == 0.5
    assert load_config(path) == config
