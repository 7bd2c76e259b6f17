"""
Evaluation of anticipation predictions
Top-k and class-mean metrics, verb/noun marginalization, late fusion,
per-class comparisons, prediction files and metric reports
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from data import ActionVocabulary
from errors import AlignmentError, FormatError, ValidationError, VocabularyError
from utils import atomic_write_text

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-6
LEVELS = ("action", "verb", "noun")


@dataclass
class PredictionRecord:
    """Class-probability vector of one sample plus its ground truth"""
    sample_id: str
    action_probs: np.ndarray
    true_action: int

    def __post_init__(self):
        """Validate the probability vector"""
        self.action_probs = np.asarray(self.action_probs, dtype=np.float64)
        if not self.sample_id:
            raise ValueError("Prediction sample id cannot be empty")
        if self.action_probs.ndim != 1:
            raise ValueError(f"Prediction for {self.sample_id} must be a vector")
        if abs(self.action_probs.sum() - 1.0) > PROB_TOLERANCE:
            raise ValueError(f"Probabilities for {self.sample_id} sum to {self.action_probs.sum()}, not 1")
        if not 0 <= self.true_action < self.action_probs.size:
            raise ValueError(f"True action {self.true_action} of {self.sample_id} outside [0, {self.action_probs.size})")

    @property
    def num_classes(self) -> int:
        return int(self.action_probs.size)

    def true_verb(self, vocab: ActionVocabulary) -> int:
        return vocab.verb_of(self.true_action)

    def true_noun(self, vocab: ActionVocabulary) -> int:
        return vocab.noun_of(self.true_action)


def _stack(records: Sequence[PredictionRecord], k: int) -> Tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValidationError("no prediction records to evaluate")
    sizes = {r.num_classes for r in records}
    if len(sizes) != 1:
        raise ValidationError(f"records disagree on the number of classes: {sorted(sizes)}")
    num_classes = sizes.pop()
    if not 1 <= k <= num_classes:
        raise ValidationError(f"k={k} outside [1, {num_classes}]")
    probs = np.stack([r.action_probs for r in records])
    truth = np.array([r.true_action for r in records], dtype=np.int64)
    return probs, truth


def truth_ranks(probs: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """
    0-based rank of the true class in each row

    Classes with higher probability rank first; equal probabilities rank
    by ascending class id.
    """
    rows = np.arange(len(truth))
    p_true = probs[rows, truth][:, None]
    class_ids = np.arange(probs.shape[1])[None, :]
    ahead = (probs > p_true) | ((probs == p_true) & (class_ids < truth[:, None]))
    return ahead.sum(axis=1)


def topk_hits(records: Sequence[PredictionRecord], k: int) -> np.ndarray:
    probs, truth = _stack(records, k)
    return truth_ranks(probs, truth) < k


def topk_accuracy(records: Sequence[PredictionRecord], k: int = 1) -> float:
    """
    Fraction of records whose true class is among the k most probable

    Raises:
        ValidationError: Empty record set or k outside [1, K]
    """
    hits = topk_hits(records, k)
    return int(hits.sum()) / len(hits)


def per_class_recall(records: Sequence[PredictionRecord], k: int = 5) -> Dict[int, Tuple[int, int]]:
    """Ground-truth class -> (hits within top-k, count)"""
    hits = topk_hits(records, k)
    result: Dict[int, Tuple[int, int]] = {}
    for record, hit in zip(records, hits):
        found, count = result.get(record.true_action, (0, 0))
        result[record.true_action] = (found + int(hit), count + 1)
    return dict(sorted(result.items()))


def class_mean_recall_at_k(records: Sequence[PredictionRecord], k: int = 5) -> float:
    """
    Recall@k per ground-truth class, averaged over the classes present

    Raises:
        ValidationError: Empty record set or k outside [1, K]
    """
    per_class = per_class_recall(records, k)
    return float(np.mean([found / count for found, count in per_class.values()]))


def class_mean_topk(records: Sequence[PredictionRecord], k: int = 1) -> float:
    """Class-mean top-k accuracy (top-1 by default)"""
    return class_mean_recall_at_k(records, k)


def marginalize(action_probs: np.ndarray, vocab: ActionVocabulary) -> Tuple[np.ndarray, np.ndarray]:
    """
    Verb and noun distributions implied by an action distribution

    Args:
        action_probs: (K,) or (N, K)

    Returns:
        (verb_probs, noun_probs)

    Raises:
        VocabularyError: Vocabulary does not cover the K actions
    """
    action_probs = np.asarray(action_probs, dtype=np.float64)
    if action_probs.shape[-1] != vocab.num_actions:
        raise VocabularyError(
            f"predictions cover {action_probs.shape[-1]} actions but the vocabulary maps {vocab.num_actions}"
        )
    return action_probs @ vocab.marginal_matrix("verb"), action_probs @ vocab.marginal_matrix("noun")


def marginalize_records(records: Sequence[PredictionRecord], vocab: ActionVocabulary,
                        level: str) -> List[PredictionRecord]:
    """Re-express records at the action, verb or noun level"""
    if level == "action":
        return list(records)
    if level not in LEVELS:
        raise ValidationError(f"unknown level {level!r}")
    matrix = vocab.marginal_matrix(level)
    truth = vocab.verb_of if level == "verb" else vocab.noun_of
    if records and records[0].num_classes != vocab.num_actions:
        raise VocabularyError(
            f"predictions cover {records[0].num_classes} actions but the vocabulary maps {vocab.num_actions}"
        )
    return [PredictionRecord(r.sample_id, r.action_probs @ matrix, truth(r.true_action)) for r in records]


def late_fuse(prob_sets: Sequence[Sequence[PredictionRecord]],
              weights: Optional[Sequence[float]] = None) -> List[PredictionRecord]:
    """
    Weighted mean of per-sample probability vectors from several models

    Args:
        prob_sets: One record list per model
        weights: Non-negative weight per model; equal weights by default

    Returns:
        Fused records in the order of the first set, renormalized to sum to 1

    Raises:
        AlignmentError: Sets cover different sample ids, classes or ground truth
    """
    if not prob_sets:
        raise ValidationError("nothing to fuse")
    weights = np.ones(len(prob_sets)) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(prob_sets),):
        raise ValidationError(f"{len(prob_sets)} prediction sets but {weights.size} weights")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValidationError("fusion weights must be non-negative with a positive sum")

    indexed = [{r.sample_id: r for r in records} for records in prob_sets]
    reference = indexed[0]
    offenders = set()
    for other in indexed[1:]:
        offenders |= set(reference) ^ set(other)
    if offenders:
        raise AlignmentError("prediction sets cover different samples", offenders)
    for other in indexed[1:]:
        offenders |= {sid for sid, r in other.items()
                      if r.num_classes != reference[sid].num_classes or r.true_action != reference[sid].true_action}
    if offenders:
        raise AlignmentError("prediction sets disagree on classes or ground truth", offenders)

    fused = []
    for record in prob_sets[0]:
        mixed = sum(w * index[record.sample_id].action_probs for w, index in zip(weights, indexed))
        mixed = mixed / weights.sum()
        fused.append(PredictionRecord(record.sample_id, mixed / mixed.sum(), record.true_action))
    logger.info(f"Fused {len(prob_sets)} prediction sets over {len(fused)} samples")
    return fused


@dataclass
class ClassGain:
    class_id: int
    name: str
    count: int
    baseline: float
    recall: float

    @property
    def gain(self) -> float:
        return self.recall - self.baseline


def per_class_gains(baseline: Sequence[PredictionRecord], records: Sequence[PredictionRecord],
                    vocab: ActionVocabulary, level: str = "action", k: int = 5) -> List[ClassGain]:
    """
    Per-class change in recall@k from a baseline prediction set, largest gain first

    Raises:
        AlignmentError: The two sets cover different samples
    """
    offenders = {r.sample_id for r in baseline} ^ {r.sample_id for r in records}
    if offenders:
        raise AlignmentError("prediction sets cover different samples", offenders)
    base = marginalize_records(baseline, vocab, level)
    new = marginalize_records(records, vocab, level)
    k = min(k, new[0].num_classes) if new else k
    base_recall = per_class_recall(base, k)
    new_recall = per_class_recall(new, k)
    gains = [
        ClassGain(cls, _class_name(vocab, level, cls), count, base_recall[cls][0] / count, found / count)
        for cls, (found, count) in new_recall.items()
    ]
    return sorted(gains, key=lambda g: (-g.gain, g.class_id))


def _class_name(vocab: ActionVocabulary, level: str, class_id: int) -> str:
    if level == "action":
        return vocab.name_of(class_id)
    for entry in vocab.entries:
        if (entry.verb_id if level == "verb" else entry.noun_id) == class_id:
            return entry.name.split("-")[0 if level == "verb" else 1]
    return str(class_id)


# ----------------------------------------------------------------------
# Prediction files
# ----------------------------------------------------------------------

def predictions_to_csv(records: Sequence[PredictionRecord]) -> str:
    if not records:
        raise ValidationError("no prediction records to write")
    num_classes = records[0].num_classes
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sample_id", "true_action"] + [f"p_{i}" for i in range(num_classes)])
    for r in records:
        writer.writerow([r.sample_id, r.true_action] + [repr(float(p)) for p in r.action_probs])
    return buffer.getvalue()


def write_predictions(path: Union[str, Path], records: Sequence[PredictionRecord]) -> Path:
    """Atomically write a prediction CSV (lossless repr floats)"""
    path = Path(path)
    atomic_write_text(path, predictions_to_csv(records))
    logger.info(f"Wrote {len(records)} predictions to {path}")
    return path


def read_predictions(path: Union[str, Path]) -> List[PredictionRecord]:
    """
    Raises:
        FormatError: Missing header columns or malformed rows
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"prediction file not found: {path}")
    rows = list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))
    if not rows or rows[0][:2] != ["sample_id", "true_action"]:
        raise FormatError(f"{path}: expected header 'sample_id,true_action,p_0..'", offset=0)
    header = rows[0]
    num_classes = len(header) - 2
    if header[2:] != [f"p_{i}" for i in range(num_classes)]:
        raise FormatError(f"{path}: probability columns must be p_0..p_{num_classes - 1}", offset=0)
    records = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{line}: expected {len(header)} columns, got {len(row)}")
        try:
            records.append(PredictionRecord(row[0], np.array([float(p) for p in row[2:]]), int(row[1])))
        except ValueError as e:
            raise FormatError(f"{path}:{line}: {e}") from e
    return records


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

@dataclass
class LevelMetrics:
    level: str
    num_classes: int
    k: int
    top1: float
    topk: float
    class_mean_top1: float
    class_mean_recall: float


@dataclass
class ClassRow:
    level: str
    class_id: int
    name: str
    count: int
    top1: float
    recall: float


@dataclass
class EvaluationReport:
    num_records: int
    overall: List[LevelMetrics] = field(default_factory=list)
    classes: List[ClassRow] = field(default_factory=list)

    def metric(self, level: str) -> LevelMetrics:
        for metrics in self.overall:
            if metrics.level == level:
                return metrics
        raise KeyError(level)


def build_report(records: Sequence[PredictionRecord], vocab: ActionVocabulary, k: int = 5) -> EvaluationReport:
    """
    Overall and per-class metrics at the action, verb and noun levels

    Recall uses k clipped to the number of classes at each level.
    """
    report = EvaluationReport(num_records=len(records))
    for level in LEVELS:
        level_records = marginalize_records(records, vocab, level)
        num_classes = level_records[0].num_classes if level_records else 0
        level_k = min(k, num_classes)
        top1_counts = per_class_recall(level_records, 1)
        topk_counts = per_class_recall(level_records, level_k)
        report.overall.append(LevelMetrics(
            level=level,
            num_classes=num_classes,
            k=level_k,
            top1=topk_accuracy(level_records, 1),
            topk=topk_accuracy(level_records, level_k),
            class_mean_top1=class_mean_topk(level_records, 1),
            class_mean_recall=class_mean_recall_at_k(level_records, level_k),
        ))
        for cls, (found, count) in topk_counts.items():
            report.classes.append(ClassRow(
                level, cls, _class_name(vocab, level, cls), count, top1_counts[cls][0] / count, found / count,
            ))
    return report


def report_to_csv(report: EvaluationReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["section", "level", "class_id", "name", "count", "top1", "topk", "k",
                     "class_mean_top1", "class_mean_recall"])
    for m in report.overall:
        writer.writerow(["overall", m.level, "", "", report.num_records, repr(m.top1), repr(m.topk), m.k,
                         repr(m.class_mean_top1), repr(m.class_mean_recall)])
    for row in report.classes:
        k = report.metric(row.level).k
        writer.writerow(["class", row.level, row.class_id, row.name, row.count, repr(row.top1),
                         repr(row.recall), k, "", ""])
    return buffer.getvalue()


def _table(headers: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
    return "\n".join(lines)


def report_to_text(report: EvaluationReport) -> str:
    overall = _table(
        ["level", "classes", "top1", "top-k", "k", "cm-top1", "cm-recall"],
        [[m.level, str(m.num_classes), f"{m.top1:.4f}", f"{m.topk:.4f}", str(m.k),
          f"{m.class_mean_top1:.4f}", f"{m.class_mean_recall:.4f}"] for m in report.overall],
    )
    classes = _table(
        ["level", "id", "name", "count", "top1", "recall"],
        [[r.level, str(r.class_id), r.name, str(r.count), f"{r.top1:.4f}", f"{r.recall:.4f}"]
         for r in report.classes],
    )
    return f"Evaluated {report.num_records} samples\n\n{overall}\n\nPer class\n\n{classes}\n"


def write_report(report: EvaluationReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write report.csv and report.txt into out_dir"""
    out_dir = Path(out_dir)
    csv_path, text_path = out_dir / "report.csv", out_dir / "report.txt"
    atomic_write_text(csv_path, report_to_csv(report))
    atomic_write_text(text_path, report_to_text(report))
    logger.info(f"Report written to {csv_path} and {text_path}")
    return csv_path, text_path
