import json
import math
from pathlib import Path

import pytest
import torch
import torch.nn as nn

from consistency_at.attack.pgd import AttackSpec
from consistency_at.attack.presets import UNSEEN_GRID, cell_label
from consistency_at.core.corruptions import CorruptionData
from consistency_at.core.types import LabeledDataset, Norm, RngState, ThreatModel
from consistency_at.evaluation.harness import (
    EvalReport, black_box_transfer, clean_accuracy, confusing_class_rate, mce, robust_accuracy,
    summarize_corruption_errors, unseen_sweep,
)
from consistency_at.evaluation.suites import evaluate_suite, run_suite
from consistency_at.model.checkpoint import capture, save_checkpoint
from consistency_at.model.networks import build_classifier
from consistency_at.storage.sqlite_store import RunStore


def linf_spec(epsilon, steps=5):
    step_size = 2 * epsilon / steps if epsilon else 0.0
    return AttackSpec(ThreatModel(Norm.LINF, epsilon, steps, step_size, random_start=bool(epsilon)))


def fast_eval_config(config):
    return config.with_values({
        'attack.pgd20_eval.steps': 2,
        'attack.pgd100_eval.steps': 2,
        'attack.cw100_eval.steps': 2,
    })


def test_zero_radius_attack_matches_clean_accuracy(tiny_model, dataset_factory):
    dataset = dataset_factory(12, seed=4)
    clean = clean_accuracy(tiny_model, dataset, batch_size=5)
    assert robust_accuracy(tiny_model, dataset, linf_spec(0.0), RngState(0), batch_size=5) == clean


def test_robust_accuracy_never_exceeds_clean(tiny_model, dataset_factory):
    dataset = dataset_factory(12, seed=4)
    clean = clean_accuracy(tiny_model, dataset)
    assert robust_accuracy(tiny_model, dataset, linf_spec(8 / 255), RngState(0)) <= clean


def test_self_transfer_equals_whitebox(tiny_model, dataset_factory):
    dataset = dataset_factory(12, seed=5)
    spec = linf_spec(8 / 255)
    whitebox = robust_accuracy(tiny_model, dataset, spec, RngState(3), batch_size=6)
    assert black_box_transfer(tiny_model, tiny_model, dataset, spec, RngState(3), batch_size=6) == whitebox


def test_summarize_corruption_errors():
    mean, per_corruption = summarize_corruption_errors({
        'fog': [10.0, 20.0, 30.0, 40.0, 50.0],
        'snow': [20.0, 20.0, 20.0, 20.0, 20.0],
    })
    assert per_corruption == {'fog': 30.0, 'snow': 20.0}
    assert mean == pytest.approx(25.0)


def test_summarize_corruption_errors_needs_input():
    with pytest.raises(ValueError):
        summarize_corruption_errors({})


def test_mce_over_available_corruptions(tiny_model, dataset_factory):
    fog = [dataset_factory(10, seed=s) for s in range(5)]
    snow = [dataset_factory(10, seed=10 + s) for s in range(5)]
    data = CorruptionData(sets={'fog': fog, 'snow': snow}, missing=['glass_blur'])

    value, per_corruption = mce(tiny_model, data, batch_size=4)

    expected_fog = sum(100.0 - clean_accuracy(tiny_model, d) for d in fog) / 5
    assert sorted(per_corruption) == ['fog', 'snow']
    assert per_corruption['fog'] == pytest.approx(expected_fog)
    assert value == pytest.approx((per_corruption['fog'] + per_corruption['snow']) / 2)


def test_confusing_class_rate_with_two_classes(dataset_factory):
    model = build_classifier('tiny_cnn', num_classes=2, seed=0)
    dataset = dataset_factory(16, num_classes=2, seed=6)
    rate = confusing_class_rate(model, dataset, linf_spec(64 / 255, steps=10), RngState(0))
    # with two classes the only wrong class is the runner-up
    assert rate is None or rate == 100.0


def test_unseen_sweep_covers_the_grid(tiny_model, dataset_factory):
    dataset = dataset_factory(2, seed=7)
    grid = ((Norm.LINF, 4 / 255), (Norm.L2, 150 / 255))
    table = unseen_sweep(tiny_model, dataset, RngState(0), grid=grid)
    assert list(table) == ['linf_eps4/255', 'l2_eps150/255']
    clean = clean_accuracy(tiny_model, dataset)
    assert all(0.0 <= v <= clean for v in table.values())


def test_unseen_cell_labels():
    assert [cell_label(n, e) for n, e in UNSEEN_GRID] == [
        'linf_eps4/255', 'linf_eps16/255', 'l2_eps150/255', 'l2_eps300/255', 'l1_eps2000/255', 'l1_eps4000/255',
    ]


def test_report_rows_skip_absent_quantities():
    report = EvalReport(clean_acc=50.0, robust_acc={'pgd20_eval': 30.0})
    assert report.rows() == [('clean_acc', 50.0), ('robust_acc/pgd20_eval', 30.0)]
    assert EvalReport().rows() == []


def test_whitebox_suite_reports_clean_and_three_attacks(tiny_config, tiny_model, dataset_factory):
    config = fast_eval_config(tiny_config)
    report = evaluate_suite(config, 'whitebox', tiny_model, dataset_factory(8, seed=8))
    metrics = [m for m, _ in report.rows()]
    assert metrics == ['clean_acc', 'robust_acc/pgd20_eval', 'robust_acc/pgd100_eval', 'robust_acc/cw100_eval']


def test_evaluation_is_reproducible(tiny_config, tiny_model, dataset_factory):
    config = fast_eval_config(tiny_config)
    dataset = dataset_factory(8, seed=8)
    first = evaluate_suite(config, 'whitebox', tiny_model, dataset)
    second = evaluate_suite(config, 'whitebox', tiny_model, dataset)
    assert first.rows() == second.rows()


def test_transfer_suite_needs_a_source(tiny_config, tiny_model, dataset_factory):
    with pytest.raises(ValueError):
        evaluate_suite(tiny_config, 'transfer', tiny_model, dataset_factory(4))


def test_unknown_suite(tiny_config, tiny_model, dataset_factory):
    with pytest.raises(ValueError):
        evaluate_suite(tiny_config, 'autoattack', tiny_model, dataset_factory(4))


def test_corruption_suite_uses_given_data(tiny_config, tiny_model, dataset_factory):
    data = CorruptionData(sets={'fog': [dataset_factory(4, seed=s) for s in range(5)]}, missing=['snow'])
    report = evaluate_suite(tiny_config, 'corruption', tiny_model, corruption_data=data)
    assert report.corruption_missing == ['snow']
    assert report.mce == pytest.approx(report.corruption_errors['fog'])


def test_run_suite_writes_report_and_registry(tiny_config, tiny_model, dataset_factory):
    config = fast_eval_config(tiny_config)
    out = Path(config.output_dir)
    path = save_checkpoint(capture(tiny_model, 0, config_hash=config.config_hash), out / 'checkpoints' / 'last.pt')

    report = run_suite(config, 'whitebox', path, dataset=dataset_factory(8, seed=9))

    assert (out / 'eval' / 'whitebox.csv').read_text().startswith(f"# config_hash={config.config_hash}\n")
    document = json.loads((out / 'eval' / 'whitebox.json').read_text())
    assert document['suite'] == 'whitebox'
    assert document['clean_acc'] == report.clean_acc

    store = RunStore(out / 'run.sqlite')
    try:
        assert store.get_evaluation(str(path), 'whitebox') == dict(report.rows())
    finally:
        store.close()


class MarginModel(nn.Module):
    """Two classes with logits (c . (x - 1/2), 0) for a fixed +-1 pattern c."""

    def __init__(self, pattern):
        super().__init__()
        self.register_buffer('pattern', pattern.reshape(1, -1))

    def forward(self, x):
        z = ((x.reshape(x.shape[0], -1) - 0.5) * self.pattern).sum(dim=1)
        return torch.stack([z, torch.zeros_like(z)], dim=1)


def margin_problem(margins, shape=(3, 8, 8), seed=0):
    """Class-0 images at 1/2 + t c / d, whose clean margin is exactly t."""
    generator = torch.Generator().manual_seed(seed)
    pattern = torch.randint(0, 2, shape, generator=generator).double() * 2 - 1
    dim = pattern.numel()
    margins = torch.as_tensor(margins, dtype=torch.float64)
    pixels = 0.5 + margins.reshape(-1, 1, 1, 1) * pattern / dim
    labels = torch.zeros(len(margins), dtype=torch.long)
    return MarginModel(pattern), LabeledDataset(pixels, labels, num_classes=2)


def test_robust_accuracy_never_rises_with_the_budget():
    margins = torch.linspace(0.1, 8.0, 40, dtype=torch.float64)
    model, dataset = margin_problem(margins)
    accuracies = []
    for eps in (2 / 255, 4 / 255, 8 / 255):
        spec = AttackSpec(ThreatModel(Norm.LINF, eps, 10, 2 * eps / 10, random_start=True))
        accuracies.append(robust_accuracy(model, dataset, spec, RngState(0), batch_size=16))
        # the l-inf optimum lowers every margin by eps * ||c||_1
        expected = 100.0 * float((margins > eps * 192).double().mean())
        assert accuracies[-1] == pytest.approx(expected)
    assert accuracies[1] <= accuracies[0] + 0.5
    assert accuracies[2] <= accuracies[1] + 0.5
    assert accuracies[2] < accuracies[0]


def test_unseen_sweep_is_monotone_within_each_norm():
    model, dataset = margin_problem(torch.linspace(0.05, 1.5, 30, dtype=torch.float64))
    root = math.sqrt(192)
    grid = (
        (Norm.LINF, 0.25 / 192), (Norm.LINF, 1.0 / 192),
        (Norm.L2, 0.25 / root), (Norm.L2, 1.0 / root),
        (Norm.L1, 0.25), (Norm.L1, 0.9),
    )
    table = unseen_sweep(model, dataset, RngState(0), batch_size=16, grid=grid)
    accuracies = list(table.values())
    assert len(accuracies) == 6
    for small, large in zip(accuracies[0::2], accuracies[1::2]):
        assert large <= small + 0.5
        assert large < 100.0
