"""
Training loop, checkpoints and prediction
SGD with per-step warmup/cosine learning rate, per-step CSV loss log,
epoch-end and best-val checkpoints, resumption, and batched inference
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import RunConfig
from data import AnticipationSample, iterate_batches
from errors import NumericalError, ValidationError, VocabularyError
from evaluation import PredictionRecord, class_mean_recall_at_k, topk_accuracy
from models import AnticipativeModel, build_model
from objectives import LossReport, total_loss
from tensor_core import SGD, Checkpoint, Tensor, load_checkpoint, lr_at_epoch, no_grad, save_checkpoint, softmax
from utils import atomic_write_text

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "l_next", "l_cls", "l_feat", "total", "lr"]
LAST_CHECKPOINT = "last.avtc"
BEST_CHECKPOINT = "best.avtc"
TRAIN_LOG = "train_log.csv"
SUMMARY = "summary.json"
PARAM_PREFIX = "param."
MOMENTUM_PREFIX = "momentum."


def predict(model: AnticipativeModel, samples: Sequence[AnticipationSample], batch_size: int = 64,
            from_features: Optional[bool] = None) -> List[PredictionRecord]:
    """Next-action distribution (y_hat_T) for every sample, in sample order"""
    from_features = (not model.has_backbone) if from_features is None else from_features
    records: List[PredictionRecord] = []
    with no_grad():
        for batch in iterate_batches(samples, batch_size, shuffle=False):
            outputs = model.forward(batch.inputs, from_features=from_features)
            last = outputs.logits.data[:, -1, :].astype(np.float64)
            probs = softmax(Tensor(last), axis=-1).data
            for sample_id, row, target in zip(batch.sample_ids, probs, batch.labels[:, -1]):
                records.append(PredictionRecord(sample_id, row, int(target)))
    return records


@dataclass
class EpochSummary:
    epoch: int
    lr: float
    l_next: float
    l_cls: float
    l_feat: float
    total: float
    val_top1: Optional[float] = None
    val_recall5: Optional[float] = None


@dataclass
class TrainingResult:
    epochs: List[EpochSummary] = field(default_factory=list)
    best_metric: float = -math.inf
    best_epoch: int = -1
    last_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None

    @property
    def final(self) -> Optional[EpochSummary]:
        return self.epochs[-1] if self.epochs else None


class Trainer:
    """
    Trains one model on in-memory samples and owns its output directory

    Files: last.avtc after every epoch, best.avtc whenever the validation
    top-1 improves (train loss when there is no validation split),
    train_log.csv with one row per optimizer step, and summary.json.
    """

    def __init__(self, model: AnticipativeModel, config: RunConfig,
                 train_samples: Sequence[AnticipationSample], val_samples: Sequence[AnticipationSample],
                 out_dir: Union[str, Path], vocab_hash: str = "", num_classes: Optional[int] = None,
                 from_features: Optional[bool] = None):
        if not train_samples:
            raise ValidationError("no training samples")
        self.model = model
        self.config = config
        self.train_samples = list(train_samples)
        self.val_samples = list(val_samples)
        self.out_dir = Path(out_dir)
        self.vocab_hash = vocab_hash
        self.num_classes = num_classes or model.head.num_classes
        self.from_features = (not model.has_backbone) if from_features is None else from_features
        self.optimizer = SGD(
            model.trainable_parameters(self.from_features),
            lr=config.optim.lr,
            momentum=config.optim.momentum,
            weight_decay=config.optim.weight_decay,
        )
        self.rng = np.random.default_rng(config.seed)
        self.log_rows: List[Dict[str, Any]] = []
        self.start_epoch = 0
        self.result = TrainingResult()

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_samples) / self.config.data.batch_size)

    def lr_for(self, epoch: int, index: int) -> float:
        optim = self.config.optim
        position = epoch + index / self.steps_per_epoch
        return lr_at_epoch(position, total=optim.epochs, warmup=optim.warmup, base=optim.lr)

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def _meta(self, epoch: int) -> Dict[str, Any]:
        return {
            "epoch": epoch,
            "step": self.optimizer.state.step,
            "best_metric": self.result.best_metric if math.isfinite(self.result.best_metric) else None,
            "best_epoch": self.result.best_epoch,
            "rng_state": self.rng.bit_generator.state,
            "vocab_hash": self.vocab_hash,
            "num_classes": self.num_classes,
            "input_dim": self.model.head.input_dim,
            "from_features": self.from_features,
        }

    def save(self, path: Path, epoch: int) -> Path:
        tensors = {f"{PARAM_PREFIX}{name}": value for name, value in self.model.state_dict().items()}
        tensors.update({f"{MOMENTUM_PREFIX}{name}": buf for name, buf in self.optimizer.state_dict().items()})
        return save_checkpoint(path, tensors, self.config.to_dict(), self._meta(epoch))

    def resume(self, path: Union[str, Path]) -> None:
        """
        Restore parameters, momentum, epoch, step, RNG and log from a checkpoint

        Raises:
            VocabularyError: The checkpoint was trained on another vocabulary
        """
        checkpoint = load_checkpoint(path)
        meta = checkpoint.meta
        if self.vocab_hash and meta.get("vocab_hash") and meta["vocab_hash"] != self.vocab_hash:
            raise VocabularyError(f"checkpoint {path} was trained with a different action vocabulary")
        self.model.load_state_dict(checkpoint.subset(PARAM_PREFIX))
        self.optimizer.load_state_dict(checkpoint.subset(MOMENTUM_PREFIX))
        self.optimizer.state.step = int(meta.get("step", 0))
        self.optimizer.state.epoch = int(meta.get("epoch", 0))
        self.rng.bit_generator.state = meta["rng_state"]
        self.start_epoch = int(meta.get("epoch", 0))
        best = meta.get("best_metric")
        self.result.best_metric = -math.inf if best is None else float(best)
        self.result.best_epoch = int(meta.get("best_epoch", -1))
        self.log_rows = [row for row in self._read_log() if int(row["epoch"]) < self.start_epoch]
        logger.info(f"Resumed from {path} at epoch {self.start_epoch}, step {self.optimizer.state.step}")

    # ------------------------------------------------------------------
    # Log
    # ------------------------------------------------------------------

    def _read_log(self) -> List[Dict[str, Any]]:
        path = self.out_dir / TRAIN_LOG
        if not path.exists():
            return []
        return list(csv.DictReader(io.StringIO(path.read_text(encoding="utf-8"))))

    def _write_log(self) -> None:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.log_rows)
        atomic_write_text(self.out_dir / TRAIN_LOG, buffer.getvalue())

    # ------------------------------------------------------------------
    # Loop
    # ------------------------------------------------------------------

    def train_step(self, inputs: np.ndarray, labels: np.ndarray, lr: float) -> LossReport:
        """
        One forward/backward/update

        Raises:
            NumericalError: Non-finite loss (parameters are left untouched)
        """
        outputs = self.model.forward(inputs, from_features=self.from_features)
        report = total_loss(outputs, labels, self.config.loss.mode, config=self.config.loss)
        if not math.isfinite(report.total):
            raise NumericalError(f"non-finite loss {report.total} at step {self.optimizer.state.step + 1}")
        report.loss.backward()
        self.optimizer.lr = lr
        self.optimizer.step()
        return report

    def evaluate(self) -> Tuple[Optional[float], Optional[float]]:
        if not self.val_samples:
            return None, None
        records = predict(self.model, self.val_samples, self.config.data.batch_size, self.from_features)
        k = min(5, self.num_classes)
        return topk_accuracy(records, 1), class_mean_recall_at_k(records, k)

    def fit(self) -> TrainingResult:
        """Train from start_epoch to optim.epochs"""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        epochs = self.config.optim.epochs
        logger.info(
            f"Training {len(self.train_samples)} samples ({self.steps_per_epoch} steps/epoch) "
            f"for epochs {self.start_epoch}..{epochs - 1}, mode {self.config.loss.mode.value}"
        )
        last_path, best_path = self.out_dir / LAST_CHECKPOINT, self.out_dir / BEST_CHECKPOINT

        for epoch in range(self.start_epoch, epochs):
            self.optimizer.state.epoch = epoch
            reports: List[LossReport] = []
            lr = self.lr_for(epoch, 0)
            batches = iterate_batches(self.train_samples, self.config.data.batch_size, self.rng, shuffle=True)
            for index, batch in enumerate(batches):
                lr = self.lr_for(epoch, index)
                try:
                    report = self.train_step(batch.inputs, batch.labels, lr)
                except NumericalError as e:
                    self._write_log()
                    kept = f"; last good checkpoint: {last_path}" if last_path.exists() else ""
                    logger.error(f"Aborting at epoch {epoch}: {e}{kept}")
                    raise NumericalError(f"{e} (epoch {epoch}){kept}") from e
                reports.append(report)
                self.log_rows.append({"epoch": epoch, "step": self.optimizer.state.step, **report.as_row(), "lr": lr})
                logger.debug(
                    f"epoch {epoch} step {self.optimizer.state.step}: total {report.total:.4f} "
                    f"(next {report.l_next:.4f}, cls {report.l_cls:.4f}, feat {report.l_feat:.4f}) lr {lr:.3g}"
                )

            val_top1, val_recall = self.evaluate()
            summary = EpochSummary(
                epoch=epoch,
                lr=lr,
                l_next=float(np.mean([r.l_next for r in reports])),
                l_cls=float(np.mean([r.l_cls for r in reports])),
                l_feat=float(np.mean([r.l_feat for r in reports])),
                total=float(np.mean([r.total for r in reports])),
                val_top1=val_top1,
                val_recall5=val_recall,
            )
            self.result.epochs.append(summary)
            metric = val_top1 if val_top1 is not None else -summary.total
            improved = metric > self.result.best_metric
            if improved:
                self.result.best_metric, self.result.best_epoch = metric, epoch

            self._write_log()
            self.save(last_path, epoch + 1)
            if improved:
                self.save(best_path, epoch + 1)
            val_text = "" if val_top1 is None else f", val top1 {val_top1:.4f}, recall@5 {val_recall:.4f}"
            logger.info(f"Epoch {epoch}: loss {summary.total:.4f} (next {summary.l_next:.4f}){val_text}")

        self.result.last_checkpoint = last_path if last_path.exists() else None
        self.result.best_checkpoint = best_path if best_path.exists() else None
        self._write_summary()
        return self.result

    def _write_summary(self) -> None:
        final = self.result.final
        summary = {
            "best_epoch": self.result.best_epoch,
            "best_metric": self.result.best_metric if math.isfinite(self.result.best_metric) else None,
            "final": None if final is None else final.__dict__,
            "epochs": len(self.result.epochs),
        }
        atomic_write_text(self.out_dir / SUMMARY, json.dumps(summary, indent=2, sort_keys=True) + "\n")


def restore_model(path: Union[str, Path]) -> Tuple[AnticipativeModel, RunConfig, Checkpoint]:
    """Rebuild a model and its run configuration from a checkpoint"""
    checkpoint = load_checkpoint(path)
    config = RunConfig.from_dict(checkpoint.config)
    meta = checkpoint.meta
    model = build_model(config, meta.get("input_dim"), int(meta["num_classes"]))
    model.load_state_dict(checkpoint.subset(PARAM_PREFIX))
    return model, config, checkpoint
