import copy
import math
from unittest.mock import patch

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim import SGD

from consistency_at.attack.objectives import LossKind
from consistency_at.attack.pgd import pgd
from consistency_at.core.types import RngState
from consistency_at.errors import CheckpointMismatchError, NonFiniteLossError
from consistency_at.export.csv_exporter import read_hash
from consistency_at.model.checkpoint import load_checkpoint, save_checkpoint
from consistency_at.objective.losses import LossBreakdown, total_loss
from consistency_at.storage.sqlite_store import RunStore
from consistency_at.training.config import TrainConfig, halve_epoch_budget, learning_rate_at, milestone_epochs
from consistency_at.training.engine import Trainer, run_training


def test_milestones_and_learning_rate():
    config = TrainConfig(epochs=200)
    assert milestone_epochs(config) == [100, 150]
    assert learning_rate_at(config, 0) == pytest.approx(0.1)
    assert learning_rate_at(config, 99) == pytest.approx(0.1)
    assert learning_rate_at(config, 100) == pytest.approx(0.01)
    assert learning_rate_at(config, 150) == pytest.approx(0.001)


def test_halve_epoch_budget_scales_milestones():
    halved = halve_epoch_budget(TrainConfig(epochs=200))
    assert halved.epochs == 100
    assert milestone_epochs(halved) == [50, 75]
    assert halve_epoch_budget(TrainConfig(epochs=0)).epochs == 0


def test_halve_epoch_budget_on_run_config(tiny_config):
    halved = halve_epoch_budget(tiny_config)
    assert halved.train.epochs == 1
    assert halved.loss == tiny_config.loss


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(milestones=(0.75, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_attack_objective_follows_method(tiny_config):
    trades = tiny_config.with_values({'loss.method': 'TRADES'})
    assert Trainer(trades, 10, (3, 32, 32)).attack_spec.loss_kind is LossKind.KL_TO_REFERENCE
    trainer = Trainer(tiny_config, 10, (3, 32, 32))
    assert trainer.attack_spec.loss_kind is LossKind.CE
    assert not trainer.eval_spec.threat.random_start


def test_train_step_matches_reference_adversarial_training(tiny_config, synthetic_split):
    config = tiny_config.with_values({'augment.policy': 'none', 'loss.regularizer': 'none', 'loss.lambda': 0.0})
    trainer = Trainer(config, 10, (3, 32, 32))
    state = trainer.init_state()
    reference = copy.deepcopy(state.model)
    cfg = config.train
    optimizer = SGD(reference.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    policy = config.policy_for_epoch(0)

    for index, batch in enumerate(synthetic_split.train.iter_batches(cfg.batch_size)):
        trainer.train_step(state, batch, RngState(0).spawn(index), policy)

        adversarial = pgd(reference, batch, trainer.attack_spec, batch_stats=True).adversarial
        reference.train()
        loss = F.cross_entropy(reference(adversarial), batch.labels)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    assert state.step == 3
    for ours, theirs in zip(state.model.parameters(), reference.parameters()):
        torch.testing.assert_close(ours, theirs, rtol=0, atol=1e-6)


@pytest.mark.parametrize('method,regularizer', [
    ('AT', 'js_consistency'), ('TRADES', 'js_consistency'), ('MART', 'js_consistency'),
    ('AT', 'augmix_cr'), ('AT', 'conventional_cr'),
])
def test_train_step_updates_parameters(tiny_config, synthetic_split, method, regularizer):
    config = tiny_config.with_values({'loss.method': method, 'loss.regularizer': regularizer,
                                      'augment.policy': 'autoaugment'})
    trainer = Trainer(config, 10, (3, 32, 32))
    state = trainer.init_state()
    before = [p.detach().clone() for p in state.model.parameters()]
    batch = synthetic_split.train.batch(slice(0, 8))
    metrics = trainer.train_step(state, batch, RngState(0), config.policy_for_epoch(0))
    assert math.isfinite(metrics.total)
    assert metrics.cons_loss >= 0
    assert any(not torch.equal(a, b) for a, b in zip(before, state.model.parameters()))


def test_non_finite_loss_aborts(tiny_config, synthetic_split):
    trainer = Trainer(tiny_config, 10, (3, 32, 32))
    state = trainer.init_state()
    broken = LossBreakdown(total=torch.tensor(float('nan')), terms={'adv_ce': torch.tensor(float('nan'))})
    with patch('consistency_at.training.engine.total_loss', return_value=broken):
        with pytest.raises(NonFiniteLossError) as excinfo:
            trainer.train_step(state, synthetic_split.train.batch(slice(0, 4)), RngState(0),
                               tiny_config.policy_for_epoch(0))
    assert excinfo.value.config_hash == tiny_config.config_hash
    assert excinfo.value.step == 0


def test_evaluation_subset(tiny_config, synthetic_split):
    config = tiny_config.with_values({'train.eval_subset': 5})
    subset = Trainer(config, 10, (3, 32, 32)).evaluation_set(synthetic_split.test)
    assert len(subset) == 5
    assert Trainer(tiny_config, 10, (3, 32, 32)).evaluation_set(synthetic_split.test) is synthetic_split.test


def test_augmentation_schedule(tiny_config):
    config = tiny_config.with_values({'augment.switch_epoch': 1, 'augment.policy_after_switch': 'none'})
    assert config.policy_for_epoch(0).name == 'base'
    assert config.policy_for_epoch(1).name == 'none'


def test_run_training_writes_run_directory(tiny_config, synthetic_split):
    result = run_training(tiny_config, split=synthetic_split)
    out = result.output_dir
    assert (out / 'config.resolved.yaml').exists()
    assert (out / 'checkpoints' / 'last.pt').exists()
    assert (out / 'checkpoints' / 'best.pt').exists()
    assert len(result.metrics) == 2
    assert result.last.epoch == 2
    assert result.best is not None and result.best.epoch in (1, 2)
    assert result.best.metrics['pgd10_acc'] == result.metrics['pgd10_acc'].max()
    assert read_hash(out / 'metrics.csv') == tiny_config.config_hash
    assert result.last.config_hash == tiny_config.config_hash
    lrs = result.metrics['lr'].tolist()
    assert lrs[0] == pytest.approx(0.1) and lrs[1] == pytest.approx(0.01)


def test_same_seed_gives_identical_metrics(tiny_config, synthetic_split, tmp_path):
    first = run_training(tiny_config.with_values({'run.output_dir': str(tmp_path / 'a')}), split=synthetic_split)
    second = run_training(tiny_config.with_values({'run.output_dir': str(tmp_path / 'b')}), split=synthetic_split)
    assert (first.output_dir / 'metrics.csv').read_text() == (second.output_dir / 'metrics.csv').read_text()


def test_resume_matches_uninterrupted_run(tiny_config, synthetic_split, tmp_path):
    whole = run_training(tiny_config.with_values({'run.output_dir': str(tmp_path / 'whole')}), split=synthetic_split)

    split_config = tiny_config.with_values({'run.output_dir': str(tmp_path / 'parts')})
    partial = run_training(split_config, split=synthetic_split, max_epochs=1)
    assert len(partial.metrics) == 1
    resumed = run_training(split_config, split=synthetic_split)

    assert len(resumed.metrics) == 2
    assert (whole.output_dir / 'metrics.csv').read_text() == (resumed.output_dir / 'metrics.csv').read_text()


def test_resume_under_another_config_is_refused(tiny_config, synthetic_split):
    run_training(tiny_config, split=synthetic_split, max_epochs=1)
    with pytest.raises(CheckpointMismatchError):
        run_training(tiny_config.with_values({'loss.lambda': 2.0}), split=synthetic_split)


def batch_norm_state(model):
    return [
        (m.running_mean.clone(), m.running_var.clone(), int(m.num_batches_tracked))
        for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)
    ]


def test_training_attacks_normalize_with_the_batch_but_keep_running_statistics(tiny_config, synthetic_split):
    config = tiny_config.with_values({'model.architecture': 'preact_resnet18'})
    trainer = Trainer(config, 10, (3, 32, 32))
    state = trainer.init_state()
    state.model.eval()
    initial = batch_norm_state(state.model)
    modes = []
    for module in state.model.modules():
        if isinstance(module, nn.modules.batchnorm._BatchNorm):
            module.register_forward_hook(lambda module, inputs, output: modes.append(module.training))

    seen_by_loss = []

    def recording_total_loss(*args, **kwargs):
        seen_by_loss.append(batch_norm_state(state.model))
        return total_loss(*args, **kwargs)

    with patch('consistency_at.training.engine.total_loss', side_effect=recording_total_loss):
        trainer.train_step(state, synthetic_split.train.batch(slice(0, 8)), RngState(0), config.policy_for_epoch(0))

    assert modes and all(modes)
    for (mean, var, tracked), (mean0, var0, tracked0) in zip(seen_by_loss[0], initial):
        torch.testing.assert_close(mean, mean0, rtol=0, atol=0)
        torch.testing.assert_close(var, var0, rtol=0, atol=0)
        assert tracked == tracked0
    assert all(after[2] > before[2] for after, before in zip(batch_norm_state(state.model), initial))


def test_zero_epochs_keeps_the_initial_model(tiny_config, synthetic_split):
    config = tiny_config.with_values({'train.epochs': 0})
    result = run_training(config, split=synthetic_split)
    assert result.metrics.empty
    assert result.best is None
    assert result.last.epoch == 0
    assert (result.output_dir / 'metrics.csv').exists()
    initial = Trainer(config, 10, (3, 32, 32)).init_state().model.state_dict()
    for name, value in initial.items():
        torch.testing.assert_close(result.last.parameters[name], value, rtol=0, atol=0)


def test_crash_before_last_checkpoint_keeps_metrics_complete(tiny_config, synthetic_split, tmp_path):
    whole = run_training(tiny_config.with_values({'run.output_dir': str(tmp_path / 'whole')}), split=synthetic_split)

    def killed_after_first_epoch(checkpoint, path):
        if path.name == 'last.pt' and checkpoint.epoch == 1:
            raise RuntimeError('killed')
        return save_checkpoint(checkpoint, path)

    config = tiny_config.with_values({'run.output_dir': str(tmp_path / 'crashed')})
    with patch('consistency_at.training.engine.save_checkpoint', side_effect=killed_after_first_epoch):
        with pytest.raises(RuntimeError):
            run_training(config, split=synthetic_split)
    resumed = run_training(config, split=synthetic_split)

    assert resumed.metrics['epoch'].tolist() == [1, 2]
    assert (whole.output_dir / 'metrics.csv').read_text() == (resumed.output_dir / 'metrics.csv').read_text()


def test_failed_metrics_write_reruns_the_epoch(tiny_config, synthetic_split, tmp_path):
    whole = run_training(tiny_config.with_values({'run.output_dir': str(tmp_path / 'whole')}), split=synthetic_split)

    config = tiny_config.with_values({'run.output_dir': str(tmp_path / 'crashed')})
    with patch.object(RunStore, 'record_epoch', side_effect=OSError('disk full')):
        with pytest.raises(OSError):
            run_training(config, split=synthetic_split)
    assert load_checkpoint(tmp_path / 'crashed' / 'checkpoints' / 'last.pt').epoch == 0
    resumed = run_training(config, split=synthetic_split)

    assert (whole.output_dir / 'metrics.csv').read_text() == (resumed.output_dir / 'metrics.csv').read_text()
