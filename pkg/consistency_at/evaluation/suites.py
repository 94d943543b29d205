"""
Evaluation suites run against a saved checkpoint: the measurements of the
harness bundled the way the `eval` and `corrupt-eval` commands report them.
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from consistency_at.attack.objectives import LossKind
from consistency_at.attack.pgd import AttackSpec, clean_reference, pgd
from consistency_at.config import RunConfig
from consistency_at.core.corruptions import CorruptionData, load_corruptions
from consistency_at.core.datasets import load_split
from consistency_at.core.geometry import lp_norm
from consistency_at.core.types import LabeledDataset, RngState, Stream
from consistency_at.evaluation.harness import (
    EvalReport, black_box_transfer, clean_accuracy, confusing_class_rate, evaluate_whitebox, mce, predict,
    unseen_sweep,
)
from consistency_at.export.csv_exporter import HASH_PREFIX, CsvExporter
from consistency_at.model.checkpoint import Checkpoint, load_checkpoint, restore_classifier
from consistency_at.model.networks import Classifier
from consistency_at.storage.sqlite_store import RunStore
from consistency_at.utils import atomic_write_text, ensure_directory

logger = logging.getLogger(__name__)

SUITES = ('whitebox', 'unseen', 'corruption', 'transfer', 'direction')
TRANSFER_PRESET = 'pgd20_eval'
DIRECTION_PRESET = 'pgd20_eval'


def whitebox_specs(config: RunConfig) -> Dict[str, AttackSpec]:
    return {name: replace(config.attack_spec(name), restarts=config.eval.restarts) for name in config.eval.whitebox}


def load_model(config: RunConfig, path: Union[str, Path]) -> Tuple[Classifier, Checkpoint]:
    checkpoint = load_checkpoint(path)
    if checkpoint.config_hash and checkpoint.config_hash != config.config_hash:
        logger.warning(f"{path} was trained under config {checkpoint.config_hash}, evaluating with {config.config_hash}")
    return restore_classifier(checkpoint, config.device, architecture=config.architecture), checkpoint


def evaluation_dataset(config: RunConfig, limit: Optional[int] = None) -> LabeledDataset:
    test = load_split(config.dataset, config.data_root).test
    if limit is not None and limit < len(test):
        test = test.subset(np.arange(limit))
    return test


def evaluate_suite(config: RunConfig, suite: str, model: Classifier, dataset: Optional[LabeledDataset] = None,
                   source: Optional[Classifier] = None,
                   corruption_data: Optional[CorruptionData] = None) -> EvalReport:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    rng = RngState(config.seed).spawn(Stream.EVAL, SUITES.index(suite))
    batch_size, device = config.eval.batch_size, config.device

    if suite == 'corruption':
        data = corruption_data or load_corruptions(config.corruption_dir, num_classes=model.num_classes)
        report = EvalReport()
        report.mce, report.corruption_errors = mce(model, data, batch_size, device)
        report.corruption_missing = list(data.missing)
        logger.info(f"mCE {report.mce:.2f}% over {len(report.corruption_errors)} corruptions")
        return report

    dataset = dataset if dataset is not None else evaluation_dataset(config)
    if suite == 'whitebox':
        return evaluate_whitebox(model, dataset, whitebox_specs(config), rng, batch_size, device)

    report = EvalReport(clean_acc=clean_accuracy(model, dataset, batch_size, device))
    if suite == 'unseen':
        report.sweep = unseen_sweep(model, dataset, rng, batch_size, device, restarts=config.eval.restarts)
    elif suite == 'transfer':
        if source is None:
            raise ValueError("the transfer suite needs a source model")
        spec = config.attack_spec(TRANSFER_PRESET)
        report.transfer_acc[TRANSFER_PRESET] = black_box_transfer(source, model, dataset, spec, rng, batch_size, device)
        logger.info(f"transfer {TRANSFER_PRESET}: {report.transfer_acc[TRANSFER_PRESET]:.2f}%")
    else:
        report.confusing_class_rate = confusing_class_rate(
            model, dataset, config.attack_spec(DIRECTION_PRESET), rng, batch_size, device)
        if report.confusing_class_rate is None:
            logger.warning("No sample was misclassified after the attack; confusing class rate is undefined")
    return report


def run_suite(config: RunConfig, suite: str, checkpoint_path: Union[str, Path],
              source_path: Optional[Union[str, Path]] = None, limit: Optional[int] = None,
              dataset: Optional[LabeledDataset] = None) -> EvalReport:
    """Evaluate a checkpoint and write eval/<suite>.{csv,json} under the output directory."""
    model, checkpoint = load_model(config, checkpoint_path)
    source = None
    if source_path is not None:
        source = restore_classifier(load_checkpoint(source_path), config.device)
    if dataset is None and suite != 'corruption':
        dataset = evaluation_dataset(config, limit)

    report = evaluate_suite(config, suite, model, dataset, source)
    report.checkpoint = str(checkpoint_path)

    out = Path(config.output_dir)
    store = RunStore(out / 'run.sqlite')
    try:
        CsvExporter(store, out, checkpoint.config_hash or config.config_hash).export_report(report, suite)
        store.record_evaluation(str(checkpoint_path), suite, report.rows())
    finally:
        store.close()
    return report


def inspect_attack(config: RunConfig, preset: str, checkpoint_path: Union[str, Path], batch_size: int = 16,
                   dataset: Optional[LabeledDataset] = None) -> pd.DataFrame:
    """
    Attack the first test batch and dump it to attack/<preset>.{pt,csv}:
    tensors for inspection plus one summary row per sample.
    """
    model, checkpoint = load_model(config, checkpoint_path)
    dataset = dataset if dataset is not None else evaluation_dataset(config, batch_size)
    batch = dataset.batch(slice(0, batch_size)).to(config.device)
    spec = config.attack_spec(preset)
    reference = clean_reference(model, batch.images) if spec.loss_kind is LossKind.KL_TO_REFERENCE else None
    result = pgd(model, batch, spec, reference, RngState(config.seed).spawn(Stream.ATTACK))

    clean_pred = predict(model, batch.images)
    adv_pred = predict(model, result.adversarial)
    summary = pd.DataFrame({
        'index': range(len(batch)),
        'label': batch.labels.tolist(),
        'clean_pred': clean_pred.tolist(),
        'adv_pred': adv_pred.tolist(),
        'loss_before': result.loss_before.tolist(),
        'loss_after': result.loss_after.tolist(),
        'delta_norm': lp_norm(result.delta, spec.threat.norm).tolist(),
    })

    out = Path(config.output_dir) / 'attack'
    ensure_directory(out)
    config_hash = checkpoint.config_hash or config.config_hash
    torch.save({
        'preset': preset,
        'config_hash': config_hash,
        'images': batch.images.cpu(),
        'labels': batch.labels.cpu(),
        'adversarial': result.adversarial.cpu(),
        'delta': result.delta.cpu(),
        'success': result.success.cpu(),
    }, out / f'{preset}.pt')
    atomic_write_text(out / f'{preset}.csv', f"{HASH_PREFIX}{config_hash}\n{summary.to_csv(index=False)}")
    logger.info(f"{preset}: {int(result.success.sum())}/{len(batch)} samples flipped; dump in {out}")
    return summary
