"""
Named attack presets and field-by-field overrides.

Evaluation presets follow the step-size rule alpha = 2 * epsilon / steps; when
an override changes epsilon or steps of such a preset without giving a step
size, the rule is applied again.
"""
import dataclasses
from typing import Any, Dict, List, Mapping, Optional, Tuple

from consistency_at.attack.objectives import LossKind
from consistency_at.attack.pgd import AttackSpec
from consistency_at.core.types import Norm, ThreatModel
from consistency_at.utils import parse_real

TRAIN_EPSILON = 8 / 255


def eval_spec(norm: Norm, epsilon: float, steps: int, loss_kind: LossKind = LossKind.CE,
              restarts: int = 1) -> AttackSpec:
    threat = ThreatModel(norm=norm, epsilon=epsilon, steps=steps, step_size=2 * epsilon / steps, random_start=True)
    return AttackSpec(threat=threat, loss_kind=loss_kind, restarts=restarts)


PRESETS: Dict[str, AttackSpec] = {
    'pgd10_train': AttackSpec(ThreatModel(Norm.LINF, TRAIN_EPSILON, 10, 2 / 255, random_start=False)),
    'pgd10_train_l2': AttackSpec(ThreatModel(Norm.L2, 128 / 255, 10, 15 / 255, random_start=False)),
    'pgd20_eval': eval_spec(Norm.LINF, TRAIN_EPSILON, 20),
    'pgd100_eval': eval_spec(Norm.LINF, TRAIN_EPSILON, 100),
    'cw100_eval': eval_spec(Norm.LINF, TRAIN_EPSILON, 100, LossKind.CW_MARGIN),
}
STEP_RULE_PRESETS = frozenset({'pgd20_eval', 'pgd100_eval', 'cw100_eval'})

# Unseen-adversary grid: (norm, epsilon) cells, all PGD-100.
UNSEEN_GRID: Tuple[Tuple[Norm, float], ...] = (
    (Norm.LINF, 4 / 255),
    (Norm.LINF, 16 / 255),
    (Norm.L2, 150 / 255),
    (Norm.L2, 300 / 255),
    (Norm.L1, 2000 / 255),
    (Norm.L1, 4000 / 255),
)
UNSEEN_STEPS = 100

OVERRIDE_FIELDS = ('base', 'norm', 'epsilon', 'step_size', 'steps', 'random_start', 'loss_kind', 'restarts')


def cell_label(norm: Norm, epsilon: float) -> str:
    return f"{Norm.parse(norm).value}_eps{round(epsilon * 255):g}/255"


def unseen_specs(restarts: int = 1, grid=UNSEEN_GRID) -> Dict[str, AttackSpec]:
    return {cell_label(norm, eps): eval_spec(norm, eps, UNSEEN_STEPS, restarts=restarts) for norm, eps in grid}


def _apply_override(name: str, base: AttackSpec, follows_rule: bool, fields: Mapping[str, Any]) -> AttackSpec:
    threat = base.threat
    changes: Dict[str, Any] = {}
    if 'norm' in fields:
        changes['norm'] = Norm.parse(fields['norm'])
    if 'epsilon' in fields:
        changes['epsilon'] = parse_real(fields['epsilon'])
    if 'steps' in fields:
        changes['steps'] = int(fields['steps'])
    if 'step_size' in fields:
        changes['step_size'] = parse_real(fields['step_size'])
    elif follows_rule and ('epsilon' in changes or 'steps' in changes):
        changes['step_size'] = 2 * changes.get('epsilon', threat.epsilon) / changes.get('steps', threat.steps)
    if 'random_start' in fields:
        if not isinstance(fields['random_start'], bool):
            raise ValueError(f"{name}.random_start must be true or false")
        changes['random_start'] = fields['random_start']
    new_threat = dataclasses.replace(threat, **changes)
    return AttackSpec(
        threat=new_threat,
        loss_kind=LossKind.parse(fields.get('loss_kind', base.loss_kind)),
        restarts=int(fields.get('restarts', base.restarts)),
    )


def resolve_presets(overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> Dict[str, AttackSpec]:
    """
    All presets with overrides applied. A name not among the built-in
    presets defines a new one and must name its 'base'.
    Raises ValueError (message prefixed with the preset name) on bad input.
    """
    resolved = dict(PRESETS)
    for name, fields in (overrides or {}).items():
        unknown = set(fields) - set(OVERRIDE_FIELDS)
        if unknown:
            raise ValueError(f"{name}: unknown attack fields {sorted(unknown)}")
        base_name = fields.get('base', name)
        if base_name not in PRESETS:
            raise ValueError(f"{name}: no built-in preset {base_name!r} to start from (give attack.{name}.base)")
        try:
            resolved[name] = _apply_override(name, PRESETS[base_name], base_name in STEP_RULE_PRESETS, fields)
        except (TypeError, ValueError) as e:
            raise ValueError(f"{name}: {e}") from e
    return resolved


def preset_names(overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> List[str]:
    return sorted(resolve_presets(overrides))
