"""
The consistency-regularized adversarial training loop.

Per step: sample (T1, T2) from the policy, attack each augmented view
independently, then take one SGD step on the composed objective. Per epoch:
evaluate clean and PGD-10 accuracy, persist the last checkpoint and, when the
PGD-10 accuracy improves, the best one.

Random streams derive from (seed, epoch, batch index) only, so a run resumed
from the last checkpoint replays exactly what an uninterrupted run would do.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
import torch
from torch.optim import SGD
from torch.optim.lr_scheduler import MultiStepLR
from tqdm import tqdm

from consistency_at.attack.pgd import AttackSpec, attack_pair, attack_transformed
from consistency_at.augment.policy import AugmentPolicy, build_policy, sample_pair, sample_transform
from consistency_at.config import RunConfig, save_resolved
from consistency_at.core.datasets import load_split, stratified_fraction
from consistency_at.core.types import DatasetSplit, LabeledBatch, LabeledDataset, RngState, Stream
from consistency_at.errors import CheckpointMismatchError, NonFiniteLossError
from consistency_at.evaluation.harness import clean_accuracy, robust_accuracy
from consistency_at.export.csv_exporter import CsvExporter
from consistency_at.model.checkpoint import Checkpoint, capture, load_checkpoint, load_into, save_checkpoint
from consistency_at.model.networks import Classifier, build_classifier
from consistency_at.objective.losses import LossBreakdown, total_loss
from consistency_at.storage.sqlite_store import RunStore
from consistency_at.training.config import milestone_epochs
from consistency_at.utils import ensure_directory

logger = logging.getLogger(__name__)


@dataclass
class StepMetrics:
    step: int
    total: float
    adv_loss: float
    cons_loss: float
    terms: Dict[str, float] = field(default_factory=dict)


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_adv_loss: float
    train_cons_loss: float
    clean_acc: float
    pgd10_acc: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class TrainState:
    model: Classifier
    optimizer: SGD
    scheduler: MultiStepLR
    epoch: int = 0
    step: int = 0
    best_pgd10: float = float('-inf')
    best_epoch: Optional[int] = None
    history: List[MetricsRow] = field(default_factory=list)


@dataclass
class TrainingResult:
    last: Checkpoint
    best: Optional[Checkpoint]
    metrics: pd.DataFrame
    output_dir: Path


class Trainer:
    def __init__(self, config: RunConfig, num_classes: int, input_shape: Tuple[int, int, int],
                 config_hash: Optional[str] = None):
        self.config = config
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.config_hash = config_hash or config.config_hash
        self.device = torch.device(config.device)
        self.rng = RngState(config.seed)

        preset = config.attack_spec(config.train.attack)
        # the inner maximization objective follows the training method
        self.attack_spec: AttackSpec = replace(preset, loss_kind=config.loss.attack_loss_kind)
        # per-epoch PGD-10 selection attack: CE, deterministic start
        self.eval_spec: AttackSpec = replace(preset, loss_kind='CE', threat=replace(preset.threat, random_start=False))
        self.base_policy = build_policy('base')

    # --- State ---
    def init_state(self) -> TrainState:
        cfg = self.config.train
        model = build_classifier(
            self.config.architecture, self.num_classes, self.input_shape, self.config.dataset,
            seed=self.rng.spawn(Stream.INIT).torch_seed(),
        ).to(self.device)
        optimizer = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        scheduler = MultiStepLR(optimizer, milestones=milestone_epochs(cfg), gamma=cfg.lr_decay)
        return TrainState(model=model, optimizer=optimizer, scheduler=scheduler)

    def restore(self, state: TrainState, checkpoint: Checkpoint):
        if checkpoint.config_hash != self.config_hash:
            raise CheckpointMismatchError(
                f"checkpoint was written by config {checkpoint.config_hash}, current config is {self.config_hash}")
        load_into(state.model, checkpoint)
        state.model.to(self.device)
        if checkpoint.optimizer_state is not None:
            state.optimizer.load_state_dict(checkpoint.optimizer_state)
        if checkpoint.scheduler_state is not None:
            state.scheduler.load_state_dict(checkpoint.scheduler_state)
        state.epoch = checkpoint.epoch
        state.step = int(checkpoint.metrics.get('step', 0))

    def snapshot(self, state: TrainState, metrics: Optional[Dict] = None) -> Checkpoint:
        return capture(
            state.model, state.epoch, dataset=self.config.dataset, config_hash=self.config_hash,
            metrics=dict(metrics or {}, step=state.step), rng={'seed': self.rng.seed, 'stream': self.rng.stream},
            optimizer=state.optimizer, scheduler=state.scheduler,
        )

    # --- Steps ---
    def train_step(self, state: TrainState, batch: LabeledBatch, rng: RngState,
                   policy: AugmentPolicy) -> StepMetrics:
        model = state.model
        x, y = batch.to(self.device)
        n = len(batch)

        t1, t2 = sample_pair(policy, rng, n)
        results = attack_pair(model, x, y, t1, t2, self.attack_spec, rng.spawn(Stream.ATTACK), batch_stats=True)
        base = None
        if self.config.loss.needs_base_branch:
            t0 = sample_transform(self.base_policy, rng.spawn(Stream.AUGMIX_BASE, 0), n)
            base = (t0, attack_transformed(model, x, y, t0, self.attack_spec, rng.spawn(Stream.AUGMIX_BASE, 1),
                                           batch_stats=True))

        model.train()
        breakdown: LossBreakdown = total_loss(model, x, y, (t1, t2), results, self.config.loss, base=base)
        if not breakdown.is_finite():
            raise NonFiniteLossError(self.config_hash, state.step, breakdown.as_floats())

        state.optimizer.zero_grad()
        breakdown.total.backward()
        state.optimizer.step()
        state.step += 1
        return StepMetrics(
            step=state.step,
            total=float(breakdown.total.item()),
            adv_loss=breakdown.adversarial,
            cons_loss=breakdown.regularizer,
            terms=breakdown.as_floats(),
        )

    def train_epoch(self, state: TrainState, train: LabeledDataset, epoch: int) -> Tuple[float, float]:
        """One pass over the training set; returns mean adversarial and consistency losses."""
        cfg = self.config.train
        policy = self.config.policy_for_epoch(epoch)
        batches = train.iter_batches(cfg.batch_size, self.rng.spawn(Stream.DATA_ORDER, epoch))
        progress = tqdm(batches, total=train.num_batches(cfg.batch_size), desc=f"epoch {epoch + 1}/{cfg.epochs}",
                        disable=not self.config.progress, leave=False)
        adv_total, cons_total, steps = 0.0, 0.0, 0
        for index, batch in enumerate(progress):
            metrics = self.train_step(state, batch, self.rng.spawn(Stream.AUGMENT, epoch, index), policy)
            adv_total += metrics.adv_loss
            cons_total += metrics.cons_loss
            steps += 1
            progress.set_postfix(adv=f"{metrics.adv_loss:.3f}", cons=f"{metrics.cons_loss:.3f}")
        return adv_total / max(steps, 1), cons_total / max(steps, 1)

    def evaluation_set(self, test: LabeledDataset) -> LabeledDataset:
        subset = self.config.train.eval_subset
        if not subset or subset >= len(test):
            return test
        indices = self.rng.spawn(Stream.EVAL).numpy().choice(len(test), size=subset, replace=False)
        return test.subset(sorted(indices))


def prepare_split(config: RunConfig) -> DatasetSplit:
    split = load_split(config.dataset, config.data_root)
    if config.fraction < 1:
        split = stratified_fraction(split, config.fraction, RngState(config.seed).spawn(Stream.SUBSAMPLE))
        logger.info(f"Kept {len(split.train)} training images ({100 * config.fraction:g}% per class)")
    return split


def run_training(config: RunConfig, split: Optional[DatasetSplit] = None,
                 max_epochs: Optional[int] = None) -> TrainingResult:
    """
    Train per config into config.output_dir, resuming from checkpoints/last.pt
    when present. max_epochs bounds the epochs run by this call.
    """
    out = Path(config.output_dir)
    ensure_directory(out / 'checkpoints')
    config_hash = config.config_hash
    save_resolved(config, out / 'config.resolved.yaml')

    split = split or prepare_split(config)
    trainer = Trainer(config, split.num_classes, split.train.image_shape, config_hash)
    state = trainer.init_state()

    store = RunStore(out / 'run.sqlite')
    exporter = CsvExporter(store, out, config_hash)
    last_path = out / 'checkpoints' / 'last.pt'
    best_path = out / 'checkpoints' / 'best.pt'

    try:
        if last_path.exists():
            trainer.restore(state, load_checkpoint(last_path))
            store.truncate_epochs(state.epoch)
            state.history = [MetricsRow(**row) for row in store.get_epochs()]
            best = store.get_checkpoint('best')
            if best is not None:
                state.best_pgd10, state.best_epoch = best['pgd10_acc'], best['epoch']
            logger.warning(f"Resuming {out} from epoch {state.epoch}")
        else:
            store.set_state('config_hash', config_hash)

        eval_set = trainer.evaluation_set(split.test)
        epochs = config.train.epochs
        end = epochs if max_epochs is None else min(epochs, state.epoch + max_epochs)
        last = trainer.snapshot(state)
        if state.epoch == 0 and not last_path.exists():
            save_checkpoint(last, last_path)
            store.register_checkpoint('last', 0, str(last_path), None, config_hash)

        for epoch in range(state.epoch, end):
            lr = state.optimizer.param_groups[0]['lr']
            adv_loss, cons_loss = trainer.train_epoch(state, split.train, epoch)
            state.scheduler.step()
            state.epoch = epoch + 1

            eval_batch = config.train.eval_batch_size
            clean = clean_accuracy(state.model, eval_set, eval_batch, trainer.device)
            pgd10 = robust_accuracy(state.model, eval_set, trainer.eval_spec, trainer.rng.spawn(Stream.EVAL, epoch),
                                    eval_batch, trainer.device)
            row = MetricsRow(state.epoch, lr, adv_loss, cons_loss, clean, pgd10)
            if not (math.isfinite(adv_loss) and math.isfinite(cons_loss)):
                raise NonFiniteLossError(config_hash, state.step, row.as_dict())

            # Rows are recorded before last.pt; a resume truncates rows past the checkpoint.
            store.record_epoch(row.as_dict())
            state.history.append(row)
            exporter.export_metrics()
            last = trainer.snapshot(state, row.as_dict())
            if pgd10 > state.best_pgd10:
                state.best_pgd10, state.best_epoch = pgd10, state.epoch
                save_checkpoint(last, best_path)
                store.register_checkpoint('best', state.epoch, str(best_path), pgd10, config_hash)
            save_checkpoint(last, last_path)
            store.register_checkpoint('last', state.epoch, str(last_path), pgd10, config_hash)

            logger.info(
                f"epoch {state.epoch}/{epochs} lr={lr:.4g} adv_loss={adv_loss:.4f} cons_loss={cons_loss:.4f} "
                f"clean={clean:.2f}% pgd10={pgd10:.2f}% (best {state.best_pgd10:.2f}% @ {state.best_epoch})")

        if not state.history:
            exporter.export_metrics()
        best_checkpoint = load_checkpoint(best_path) if best_path.exists() else None
        return TrainingResult(last=last, best=best_checkpoint, metrics=store.metrics_frame(), output_dir=out)
    finally:
        store.close()
