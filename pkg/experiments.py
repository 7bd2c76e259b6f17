"""
Multi-run experiments
Loss ablation (naive vs anticipative and single intermediate losses), future-feature
weight sweep and observation-length sweep, each over several seeds
"""

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from config import LossMode, RunConfig
from data import ActionDataset, build_samples
from errors import ValidationError
from evaluation import class_mean_recall_at_k, topk_accuracy
from models import build_model
from schema import SchemaSpec, bayes_rate
from training import Trainer, predict
from utils import atomic_write_text

logger = logging.getLogger(__name__)

ABLATION_VARIANTS: Dict[str, Dict[str, object]] = {
    "naive": {"loss.mode": "naive"},
    "anticipative": {"loss.mode": "anticipative"},
    "cls-only": {"loss.mode": "anticipative", "loss.feat_weight": 0.0},
    "feat-only": {"loss.mode": "anticipative", "loss.cls_weight": 0.0},
}
FEAT_WEIGHTS = (0.0, 0.5, 1.0, 2.0)
CONTEXT_LENGTHS = (2, 5, 10)
SWEEPS = ("ablation", "feat-weight", "context")


@dataclass
class SweepRun:
    sweep: str
    variant: str
    seed: int
    tau_o: int
    mode: str
    cls_weight: float
    feat_weight: float
    val_top1: float
    val_recall5: float


def sweep_variants(sweep: str, context_lengths: Sequence[int] = CONTEXT_LENGTHS) -> Dict[str, Dict[str, object]]:
    """Named config overrides of one sweep"""
    if sweep == "ablation":
        return dict(ABLATION_VARIANTS)
    if sweep == "feat-weight":
        return {f"feat-{w:g}": {"loss.mode": "anticipative", "loss.feat_weight": w} for w in FEAT_WEIGHTS}
    if sweep == "context":
        return {f"tau_o-{t}": {"loss.mode": "anticipative", "data.tau_o": t} for t in context_lengths}
    raise ValidationError(f"unknown sweep {sweep!r}; choose one of {', '.join(SWEEPS)}")


def run_variant(base: RunConfig, overrides: Dict[str, object], seed: int, dataset: ActionDataset,
                out_dir: Path) -> Dict[str, float]:
    """Train one configuration and return its validation metrics"""
    config = base.merged({**overrides, "seed": seed, "output_dir": str(out_dir)})
    train, _ = build_samples(dataset, "train", config.data)
    val, _ = build_samples(dataset, "val", config.data)
    if not val:
        raise ValidationError("sweeps need a non-empty validation split")
    input_dim = train[0].inputs.shape[-1] if not config.backbone_mode.uses_frames else None
    model = build_model(config, input_dim, len(dataset.vocab))
    Trainer(model, config, train, val, out_dir, vocab_hash=dataset.vocab.hash).fit()
    records = predict(model, val, config.data.batch_size)
    return {
        "val_top1": topk_accuracy(records, 1),
        "val_recall5": class_mean_recall_at_k(records, min(5, len(dataset.vocab))),
    }


def run_sweep(base: RunConfig, dataset: ActionDataset, sweep: str, seeds: Sequence[int],
              out_dir: Union[str, Path], context_lengths: Sequence[int] = CONTEXT_LENGTHS) -> List[SweepRun]:
    """
    Train every variant of a sweep once per seed

    Each run gets its own directory out_dir/<variant>-seed<seed>.
    """
    out_dir = Path(out_dir)
    runs: List[SweepRun] = []
    for name, overrides in sweep_variants(sweep, context_lengths).items():
        for seed in seeds:
            logger.info(f"Sweep {sweep}: variant {name}, seed {seed}")
            metrics = run_variant(base, overrides, seed, dataset, out_dir / f"{name}-seed{seed}")
            config = base.merged(overrides)
            runs.append(SweepRun(
                sweep=sweep,
                variant=name,
                seed=seed,
                tau_o=config.data.tau_o,
                mode=config.loss.mode.value,
                cls_weight=config.loss.cls_weight,
                feat_weight=config.loss.feat_weight,
                **metrics,
            ))
    return runs


def summarize(runs: Sequence[SweepRun]) -> Dict[str, Dict[str, float]]:
    """Mean and standard deviation of validation top-1 per variant, in run order"""
    grouped: Dict[str, List[float]] = {}
    for run in runs:
        grouped.setdefault(run.variant, []).append(run.val_top1)
    return {name: {"mean": float(np.mean(v)), "std": float(np.std(v)), "runs": len(v)}
            for name, v in grouped.items()}


def anticipative_gain(runs: Sequence[SweepRun]) -> Optional[float]:
    """Mean anticipative top-1 minus mean naive top-1 in an ablation sweep"""
    stats = summarize(runs)
    if "naive" not in stats or "anticipative" not in stats:
        return None
    return stats["anticipative"]["mean"] - stats["naive"]["mean"]


def dataset_bounds(dataset: ActionDataset) -> Dict[str, float]:
    """Bayes rates of a generated dataset at orders 0..m"""
    spec_values = dataset.manifest.get("spec")
    if not spec_values:
        return {}
    spec = SchemaSpec.from_dict(spec_values)
    return {f"bayes_order{order}": bayes_rate(spec, order) for order in range(spec.order + 1)}


def write_sweep(path: Union[str, Path], runs: Sequence[SweepRun], bounds: Optional[Dict[str, float]] = None) -> Path:
    """CSV of every run followed by per-variant means and the dataset bounds"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sweep", "variant", "seed", "tau_o", "mode", "cls_weight", "feat_weight",
                     "val_top1", "val_recall5"])
    for r in runs:
        writer.writerow([r.sweep, r.variant, r.seed, r.tau_o, r.mode, r.cls_weight, r.feat_weight,
                         repr(r.val_top1), repr(r.val_recall5)])
    for name, stats in summarize(runs).items():
        writer.writerow(["mean", name, "", "", "", "", "", repr(stats["mean"]), ""])
    for name, value in (bounds or {}).items():
        writer.writerow(["bound", name, "", "", "", "", "", repr(value), ""])
    path = Path(path)
    atomic_write_text(path, buffer.getvalue())
    logger.info(f"Sweep summary written to {path}")
    return path
