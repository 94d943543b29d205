"""
Run configuration: a flat YAML mapping with dotted section keys.

    loss.lambda: 1.0
    attack.pgd10_train.epsilon: 8/255

Nested mappings are flattened on load, so `loss: {lambda: 1.0}` is accepted
as well. Unknown keys and invalid values raise ConfigError naming the key.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

import yaml

from consistency_at.attack.pgd import AttackSpec
from consistency_at.attack.presets import resolve_presets
from consistency_at.augment.ops import AugmentOp
from consistency_at.augment.policy import POLICY_NAMES, AugmentPolicy, build_policy
from consistency_at.core.datasets import DATASETS, resolve_data_root
from consistency_at.errors import ConfigError
from consistency_at.model.networks import ARCHITECTURES
from consistency_at.objective.losses import LossConfig, Method, Regularizer
from consistency_at.training.config import TrainConfig
from consistency_at.utils import atomic_write_text, content_hash, parse_real

logger = logging.getLogger(__name__)

# Keys that do not change results and are left out of the config hash.
HASH_EXCLUDED = ('run.output_dir', 'run.progress')


@dataclass(frozen=True)
class AugmentConfig:
    policy: str = 'autoaugment'
    ops: Tuple[Dict[str, Any], ...] = ()
    switch_epoch: Optional[int] = None
    policy_after_switch: Optional[str] = None


@dataclass(frozen=True)
class EvalConfig:
    whitebox: Tuple[str, ...] = ('pgd20_eval', 'pgd100_eval', 'cw100_eval')
    batch_size: int = 256
    restarts: int = 1


# --- Value parsers ---

def _int(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"expected an integer, got {value!r}")
    return value


def _non_negative_int(value: Any) -> int:
    value = _int(value)
    if value < 0:
        raise ValueError(f"expected an integer >= 0, got {value}")
    return value


def _bool(value: Any) -> bool:
    if not isinstance(value, bool):
        raise ValueError(f"expected true or false, got {value!r}")
    return value


def _str(value: Any) -> str:
    if not isinstance(value, str) or not value:
        raise ValueError(f"expected a non-empty string, got {value!r}")
    return value


def _optional(parser: Callable) -> Callable:
    return lambda value: None if value is None else parser(value)


def _choice(options) -> Callable:
    def parse(value):
        if value not in options:
            raise ValueError(f"expected one of {list(options)}, got {value!r}")
        return value
    return parse


def _reals(value: Any) -> Tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ValueError(f"expected a list of numbers, got {value!r}")
    return tuple(parse_real(v) for v in value)


def _names(value: Any) -> Tuple[str, ...]:
    if not isinstance(value, (list, tuple)):
        raise ValueError(f"expected a list of names, got {value!r}")
    return tuple(_str(v) for v in value)


def _ops(value: Any) -> Tuple[Dict[str, Any], ...]:
    if value is None:
        return ()
    if not isinstance(value, (list, tuple)):
        raise ValueError(f"expected a list of {{kind, probability, magnitude}} entries, got {value!r}")
    ops = []
    for entry in value:
        if not isinstance(entry, dict):
            raise ValueError(f"augmentation entry must be a mapping, got {entry!r}")
        normalized = {k: (parse_real(v) if k in ('probability', 'magnitude') else v) for k, v in entry.items()}
        AugmentOp.from_dict(normalized)
        ops.append(normalized)
    return tuple(ops)


# dotted key -> (section, field, parser)
SCHEMA: Dict[str, Tuple[str, str, Callable]] = {
    'run.seed': ('run', 'seed', _non_negative_int),
    'run.output_dir': ('run', 'output_dir', _str),
    'run.device': ('run', 'device', _str),
    'run.progress': ('run', 'progress', _bool),
    'data.dataset': ('run', 'dataset', _choice(tuple(DATASETS))),
    'data.root': ('run', 'data_root', _str),
    'data.fraction': ('run', 'fraction', parse_real),
    'data.corruption_root': ('run', 'corruption_root', _optional(_str)),
    'model.architecture': ('run', 'architecture', _choice(ARCHITECTURES)),
    'train.epochs': ('train', 'epochs', _int),
    'train.batch_size': ('train', 'batch_size', _int),
    'train.lr': ('train', 'lr', parse_real),
    'train.momentum': ('train', 'momentum', parse_real),
    'train.weight_decay': ('train', 'weight_decay', parse_real),
    'train.milestones': ('train', 'milestones', _reals),
    'train.lr_decay': ('train', 'lr_decay', parse_real),
    'train.attack': ('train', 'attack', _str),
    'train.eval_subset': ('train', 'eval_subset', _optional(_non_negative_int)),
    'train.eval_batch_size': ('train', 'eval_batch_size', _int),
    'augment.policy': ('augment', 'policy', _choice(POLICY_NAMES)),
    'augment.ops': ('augment', 'ops', _ops),
    'augment.switch_epoch': ('augment', 'switch_epoch', _optional(_non_negative_int)),
    'augment.policy_after_switch': ('augment', 'policy_after_switch', _optional(_choice(POLICY_NAMES))),
    'loss.method': ('loss', 'method', _choice([m.value for m in Method])),
    'loss.regularizer': ('loss', 'regularizer', _choice([r.value for r in Regularizer])),
    'loss.lambda': ('loss', 'lam', parse_real),
    'loss.tau': ('loss', 'tau', parse_real),
    'loss.beta': ('loss', 'beta', parse_real),
    'loss.gamma': ('loss', 'gamma', parse_real),
    'loss.ablation_temperature': ('loss', 'ablation_temperature', _bool),
    'eval.whitebox': ('eval', 'whitebox', _names),
    'eval.batch_size': ('eval', 'batch_size', _int),
    'eval.restarts': ('eval', 'restarts', _int),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = 'runs/default'
    device: str = 'cpu'
    progress: bool = True
    dataset: str = 'cifar10'
    data_root: str = 'data'
    fraction: float = 1.0
    corruption_root: Optional[str] = None
    architecture: str = 'preact_resnet18'
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attack_overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    # --- Construction ---
    @classmethod
    def from_flat(cls, mapping: Mapping[str, Any]) -> 'RunConfig':
        sections: Dict[str, Dict[str, Any]] = {'run': {}, 'train': {}, 'loss': {}, 'augment': {}, 'eval': {}}
        overrides: Dict[str, Dict[str, Any]] = {}
        for key, raw in mapping.items():
            if key.startswith('attack.'):
                parts = key.split('.')
                if len(parts) != 3:
                    raise ConfigError(key, "expected attack.<preset>.<field>")
                overrides.setdefault(parts[1], {})[parts[2]] = raw
                continue
            if key not in SCHEMA:
                raise ConfigError(key, "unknown configuration key")
            section, name, parser = SCHEMA[key]
            try:
                sections[section][name] = parser(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(key, str(e)) from e

        if sections['train'].get('eval_subset', 0) is None:
            sections['train']['eval_subset'] = 0
        built = {}
        for section, factory in (('train', TrainConfig), ('loss', LossConfig), ('augment', AugmentConfig), ('eval', EvalConfig)):
            try:
                built[section] = factory(**sections[section])
            except (TypeError, ValueError) as e:
                raise ConfigError(section, str(e)) from e
        config = cls(**sections['run'], attack_overrides=overrides, **built)
        config.validate()
        return config

    def validate(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError('data.fraction', f"must lie in (0, 1], got {self.fraction}")
        try:
            presets = resolve_presets(self.attack_overrides)
        except ValueError as e:
            name = str(e).split(':', 1)[0]
            raise ConfigError(f"attack.{name}", str(e)) from e
        if self.train.attack not in presets:
            raise ConfigError('train.attack', f"unknown attack preset {self.train.attack!r}; choose from {sorted(presets)}")
        for name in self.eval.whitebox:
            if name not in presets:
                raise ConfigError('eval.whitebox', f"unknown attack preset {name!r}")
        if self.eval.batch_size < 1 or self.eval.restarts < 1:
            raise ConfigError('eval', "batch_size and restarts must be >= 1")
        if (self.augment.switch_epoch is None) != (self.augment.policy_after_switch is None):
            raise ConfigError('augment.switch_epoch', "switch_epoch and policy_after_switch must be given together")
        for key, name in (('augment.policy', self.augment.policy), ('augment.policy_after_switch', self.augment.policy_after_switch)):
            if name is None:
                continue
            try:
                build_policy(name, self.augment.ops)
            except ValueError as e:
                raise ConfigError(key, str(e)) from e

    def with_values(self, mapping: Mapping[str, Any]) -> 'RunConfig':
        flat = self.to_flat()
        flat.update(mapping)
        return RunConfig.from_flat(flat)

    # --- Views ---
    def to_flat(self) -> Dict[str, Any]:
        sections = {
            'run': self, 'train': self.train, 'loss': self.loss, 'augment': self.augment, 'eval': self.eval,
        }
        flat: Dict[str, Any] = {}
        for key, (section, name, _) in SCHEMA.items():
            value = getattr(sections[section], name)
            if isinstance(value, tuple):
                value = [dict(v) if isinstance(v, dict) else v for v in value]
            elif hasattr(value, 'value'):
                value = value.value
            flat[key] = value
        for preset, fields in self.attack_overrides.items():
            for name, value in fields.items():
                flat[f'attack.{preset}.{name}'] = value
        return flat

    @property
    def config_hash(self) -> str:
        flat = self.to_flat()
        for key in HASH_EXCLUDED:
            flat.pop(key, None)
        return content_hash(flat)

    def attack_presets(self) -> Dict[str, AttackSpec]:
        return resolve_presets(self.attack_overrides)

    def attack_spec(self, name: str) -> AttackSpec:
        presets = self.attack_presets()
        if name not in presets:
            raise ConfigError(f'attack.{name}', f"unknown attack preset; choose from {sorted(presets)}")
        return presets[name]

    def policy_for_epoch(self, epoch: int) -> AugmentPolicy:
        name = self.augment.policy
        if self.augment.switch_epoch is not None and epoch >= self.augment.switch_epoch:
            name = self.augment.policy_after_switch
        return build_policy(name, self.augment.ops)

    @property
    def corruption_dir(self) -> Path:
        return Path(self.corruption_root) if self.corruption_root else resolve_data_root(self.data_root) / 'CIFAR-10-C'


def flatten(mapping: Mapping[str, Any], prefix: str = '') -> Dict[str, Any]:
    """Collapse nested mappings into dotted keys; lists are left as values."""
    flat: Dict[str, Any] = {}
    for key, value in mapping.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    with open(path, 'r') as f:
        try:
            document = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(str(path), f"not valid YAML: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(str(path), "config file must hold a mapping of dotted keys")
    flat = flatten(document)
    # written by save_resolved
    flat.pop('config_hash', None)
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


def save_resolved(config: RunConfig, path: Union[str, Path]):
    document = config.to_flat()
    document['config_hash'] = config.config_hash
    atomic_write_text(path, yaml.safe_dump(document, sort_keys=True))
