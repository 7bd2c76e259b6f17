"""
Command-line subcommands
gen, train, eval, fuse, rollout, attn, extract, stat, compare and sweep;
each resolves its configuration, writes a config.txt snapshot beside its
outputs and returns a process exit status
"""

import argparse
import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import CONFIG_SNAPSHOT_NAME, BackboneMode, RunConfig, env_config, resolve_config
from data import (
    ActionDataset,
    AnticipationSample,
    DatasetManager,
    build_samples,
    load_dataset,
    save_dataset,
    write_features,
)
from errors import ConfigurationError, UnsupportedModeError, ValidationError, VocabularyError
from evaluation import (
    PredictionRecord,
    build_report,
    late_fuse,
    per_class_gains,
    read_predictions,
    report_to_text,
    write_predictions,
    write_report,
)
from experiments import SWEEPS, anticipative_gain, dataset_bounds, run_sweep, summarize, write_sweep
from models import AnticipativeModel, build_model, load_fixed_features
from rollout import head_temporal_attention, rollout, spatial_attention_maps, write_heatmap
from schema import SchemaSpec, bayes_rate, generate_schema_dataset
from training import Trainer, predict, restore_model
from utils import atomic_write_text, chunk_list, sanitize_filename

logger = logging.getLogger(__name__)

SPLIT_CHOICES = ("train", "val", "all")


# ----------------------------------------------------------------------
# Shared helpers
# ----------------------------------------------------------------------

def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    """`key=value` strings from --set into a dict"""
    overrides: Dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dedicated flags, which win over --set"""
    mapping = {
        "seed": "seed",
        "epochs": "optim.epochs",
        "mode": "loss.mode",
        "tau_o": "data.tau_o",
        "backbone": "backbone_mode",
        "dataset": "dataset",
    }
    values = parse_overrides(getattr(args, "set", None))
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    return values


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    return resolve_config(getattr(args, "preset", None), getattr(args, "config", None), flag_overrides(args))


def prepare_output_dir(path: Path, force: bool) -> Path:
    """
    Create the output directory

    Raises:
        ValidationError: Directory exists, is non-empty and force is off
    """
    if path.exists() and any(path.iterdir()) and not force:
        raise ValidationError(f"output directory {path} is not empty; use --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def default_output(args: argparse.Namespace, name: str, config: Optional[RunConfig] = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if config is not None and config.output_dir:
        return Path(config.output_dir)
    return env_config.output_root / name


def write_snapshot(out_dir: Path, command: str, config: RunConfig, extra: Optional[Dict[str, Any]] = None) -> Path:
    """config.txt: the command, its inputs and the resolved configuration"""
    header = [f"# command: {command}"]
    header.extend(f"# {key}: {value}" for key, value in (extra or {}).items() if value is not None)
    path = out_dir / CONFIG_SNAPSHOT_NAME
    atomic_write_text(path, "\n".join(header) + "\n" + config.to_text())
    return path


def split_name(split: str) -> Optional[str]:
    return None if split == "all" else split


def load_samples(config: RunConfig, dataset: ActionDataset, split: Optional[str],
                 features_dir: Optional[str] = None, expected_dim: Optional[int] = None) -> List[AnticipationSample]:
    """Clips of a split, either sampled from the dataset or read from an extracted feature file"""
    if features_dir:
        names = ["train", "val"] if split is None else [split]
        samples: List[AnticipationSample] = []
        for name in names:
            samples.extend(load_fixed_features(Path(features_dir) / f"{name}.feat", expected_dim, dataset.vocab.hash))
        return samples
    samples, _ = build_samples(dataset, split, config.data)
    return samples


def holds_frames(dataset: ActionDataset) -> bool:
    return dataset.manifest.get("render") == "frames" or len(dataset.frame_shape) == 3


def check_model_inputs(model: AnticipativeModel, dataset: ActionDataset, features_dir: Optional[str]) -> bool:
    """
    Frame datasets need a frame encoder unless extracted features are supplied

    Returns:
        Whether model inputs are feature vectors rather than frames
    """
    if holds_frames(dataset) and not model.has_backbone and not features_dir:
        raise ConfigurationError(
            "dataset holds frames but the model runs on fixed features; pass --features from `avt extract`"
        )
    return bool(features_dir) or not holds_frames(dataset)


def restore_for_dataset(checkpoint: str, dataset: ActionDataset) -> Tuple[AnticipativeModel, RunConfig, Dict[str, Any]]:
    """
    Raises:
        VocabularyError: Checkpoint and dataset vocabularies differ
    """
    model, config, saved = restore_model(checkpoint)
    trained_hash = saved.meta.get("vocab_hash")
    if trained_hash and trained_hash != dataset.vocab.hash:
        raise VocabularyError(f"checkpoint {checkpoint} was trained on a different action vocabulary than the dataset")
    return model, config, saved.meta


def find_sample(samples: Sequence[AnticipationSample], sample_id: str) -> AnticipationSample:
    for sample in samples:
        if sample.sample_id == sample_id:
            return sample
    raise ValidationError(f"sample {sample_id!r} not found")


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    """Generate a synthetic schema dataset"""
    config = resolve_run_config(args)
    out_dir = prepare_output_dir(default_output(args, "dataset", config), args.force)
    schema = config.schema
    spec = SchemaSpec.from_config(schema, config.seed)
    dataset = generate_schema_dataset(
        spec, schema.n_videos, schema.video_len, render=schema.render,
        frame_shape=config.backbone.frame_shape, val_fraction=schema.val_fraction,
    )
    save_dataset(out_dir, dataset)
    write_snapshot(out_dir, "gen", config)
    checksum = DatasetManager(out_dir).checksum()
    print(f"Dataset written to {out_dir}: {len(dataset.videos)} videos, {dataset.num_segments} segments")
    print(f"checksum {checksum}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train a model, optionally resuming from a checkpoint"""
    config = resolve_run_config(args)
    if not config.dataset:
        raise ValidationError("no dataset given (use --dataset or set `dataset` in the config)")
    out_dir = default_output(args, "train", config)
    if args.resume:
        out_dir.mkdir(parents=True, exist_ok=True)
    else:
        prepare_output_dir(out_dir, args.force)

    dataset = load_dataset(config.dataset)
    if args.features and config.backbone_mode.uses_frames:
        raise ConfigurationError("--features trains the head alone; set backbone_mode = fixed-features")
    if config.backbone_mode.uses_frames and not holds_frames(dataset):
        raise ConfigurationError(f"backbone {config.backbone_mode.value} needs a frames dataset; {config.dataset} holds features")
    if not config.backbone_mode.uses_frames and holds_frames(dataset) and not args.features:
        raise ConfigurationError(
            "dataset holds frames but backbone_mode is fixed-features; pass --features from `avt extract`"
        )
    train = load_samples(config, dataset, "train", args.features)
    val = load_samples(config, dataset, "val", args.features)
    if not train:
        raise ValidationError(f"no training samples in {config.dataset} (tau_a may exceed every segment start)")
    input_dim = None if config.backbone_mode.uses_frames else int(train[0].inputs.shape[-1])
    model = build_model(config, input_dim, len(dataset.vocab))

    write_snapshot(out_dir, "train", config, {"features": args.features, "resume": args.resume})
    trainer = Trainer(model, config, train, val, out_dir, vocab_hash=dataset.vocab.hash)
    if args.resume:
        trainer.resume(args.resume)
    result = trainer.fit()

    final = result.final
    if final is not None:
        val_text = "" if final.val_top1 is None else f", val top1 {final.val_top1:.4f}, recall@5 {final.val_recall5:.4f}"
        print(f"Trained {len(result.epochs)} epoch(s): loss {final.total:.4f}{val_text}")
    print(f"best epoch {result.best_epoch}, checkpoints in {out_dir}")
    return 0


def _report(records: List[PredictionRecord], dataset: ActionDataset, out_dir: Path) -> None:
    write_predictions(out_dir / "predictions.csv", records)
    report = build_report(records, dataset.vocab)
    write_report(report, out_dir)
    print(report_to_text(report))


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a checkpoint (or an existing prediction file) on a dataset split"""
    dataset = load_dataset(args.dataset)
    out_dir = prepare_output_dir(default_output(args, "eval"), args.force)
    if args.predictions:
        config = resolve_run_config(args)
        records = read_predictions(args.predictions)
    else:
        if not args.checkpoint:
            raise ValidationError("eval needs --checkpoint or --predictions")
        model, config, _ = restore_for_dataset(args.checkpoint, dataset)
        from_features = check_model_inputs(model, dataset, args.features)
        samples = load_samples(config, dataset, split_name(args.split), args.features, model.head.input_dim)
        records = predict(model, samples, config.data.batch_size, from_features)
    write_snapshot(out_dir, "eval", config, {"checkpoint": args.checkpoint, "predictions": args.predictions,
                                             "dataset": args.dataset, "split": args.split})
    _report(records, dataset, out_dir)
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    """Late-fuse prediction files"""
    dataset = load_dataset(args.dataset)
    out_dir = prepare_output_dir(default_output(args, "fuse"), args.force)
    prob_sets = [read_predictions(path) for path in args.predictions]
    fused = late_fuse(prob_sets, args.weights)
    write_snapshot(out_dir, "fuse", resolve_run_config(args),
                   {"predictions": " ".join(args.predictions), "weights": args.weights})
    _report(fused, dataset, out_dir)
    return 0


@dataclass
class ClipSource:
    model: AnticipativeModel
    config: RunConfig
    dataset: ActionDataset
    sample: AnticipationSample
    from_features: bool


def _clip_source(args: argparse.Namespace) -> ClipSource:
    dataset = load_dataset(args.dataset)
    model, config, _ = restore_for_dataset(args.checkpoint, dataset)
    from_features = check_model_inputs(model, dataset, args.features)
    samples = load_samples(config, dataset, None, args.features, model.head.input_dim)
    return ClipSource(model, config, dataset, find_sample(samples, args.sample), from_features)


def cmd_rollout(args: argparse.Namespace) -> int:
    """Autoregressive long-term anticipation for one sample"""
    source = _clip_source(args)
    model, config, dataset, sample = source.model, source.config, source.dataset, source.sample
    out_dir = prepare_output_dir(default_output(args, "rollout"), args.force)
    trace = rollout(model, sample.inputs, args.steps, from_features=source.from_features)

    names = [e.name for e in dataset.vocab.entries]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["step", "action", "name", "probability"])
    for step in trace.steps:
        writer.writerow([step.step, step.action, names[step.action], repr(step.probability)])
    atomic_write_text(out_dir / "rollout.csv", buffer.getvalue())
    write_snapshot(out_dir, "rollout", config, {"checkpoint": args.checkpoint, "sample": args.sample,
                                                "steps": args.steps})
    print(f"{sample.sample_id} (true next action {names[sample.next_action]}):")
    print(trace.format(names))
    return 0


def cmd_attn(args: argparse.Namespace) -> int:
    """Export spatial (frame encoder) and temporal (head) attention for one sample"""
    source = _clip_source(args)
    model, config, sample = source.model, source.config, source.sample
    spatial = not source.from_features if args.spatial is None else args.spatial
    if spatial and source.from_features:
        raise UnsupportedModeError("spatial attention needs frames and a frame encoder; this clip is feature vectors")
    out_dir = prepare_output_dir(default_output(args, "attn"), args.force)
    stem = sanitize_filename(sample.sample_id)

    temporal = head_temporal_attention(model, sample.inputs, from_features=source.from_features)
    write_heatmap(out_dir / f"{stem}_temporal", temporal[-1:])
    write_heatmap(out_dir / f"{stem}_temporal_full", temporal)
    if spatial:
        maps = spatial_attention_maps(model, sample.inputs)
        for index, heatmap in enumerate(maps, start=1):
            write_heatmap(out_dir / f"{stem}_spatial_f{index:02d}", heatmap)
    write_snapshot(out_dir, "attn", config, {"checkpoint": args.checkpoint, "sample": args.sample})
    print(f"Temporal attention of the final frame: {np.array2string(temporal[-1], precision=3)}")
    print(f"Heatmaps written to {out_dir}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    """Write frame-encoder features of every split to feature files"""
    dataset = load_dataset(args.dataset)
    model, config, _ = restore_for_dataset(args.checkpoint, dataset)
    if not model.has_backbone:
        raise UnsupportedModeError("feature extraction needs a checkpoint with a frame encoder")
    out_dir = prepare_output_dir(default_output(args, "features"), args.force)
    for split in ("train", "val"):
        samples, _ = build_samples(dataset, split, config.data)
        if not samples:
            logger.warning(f"Split {split} is empty; no feature file written")
            continue
        extracted = []
        for chunk in chunk_list(samples, config.data.batch_size):
            features = model.extract_features(np.stack([s.inputs for s in chunk]))
            extracted.extend(
                AnticipationSample(s.sample_id, f, s.track, s.times, s.num_padded) for s, f in zip(chunk, features)
            )
        write_features(out_dir / f"{split}.feat", extracted, dataset.vocab.hash)
    write_snapshot(out_dir, "extract", config, {"checkpoint": args.checkpoint, "dataset": args.dataset})
    print(f"Features written to {out_dir}")
    return 0


def cmd_stat(args: argparse.Namespace) -> int:
    """Dataset bookkeeping: videos, segments, class counts, Bayes rates"""
    dataset = load_dataset(args.dataset)
    config = resolve_run_config(args)
    chains = [len(dataset.segments.get(v.video_id, [])) for v in dataset.videos]
    counts = np.zeros(len(dataset.vocab), dtype=np.int64)
    for segments in dataset.segments.values():
        for s in segments:
            counts[s.action_id] += 1
    print(f"Dataset {args.dataset}")
    print(f"  videos: {len(dataset.videos)}, segments: {dataset.num_segments} (sum of chain lengths {sum(chains)})")
    for split in dataset.manifest.get("splits", {}):
        samples, skipped = build_samples(dataset, split, config.data)
        print(f"  {split}: {len(dataset.split_videos(split))} videos, {len(samples)} samples, {len(skipped)} skipped")
    for entry in dataset.vocab.entries:
        print(f"  {entry.action_id:>3} {entry.name:<16} {counts[entry.action_id]}")
    spec_values = dataset.manifest.get("spec")
    if spec_values:
        spec = SchemaSpec.from_dict(spec_values)
        for order in range(spec.order + 1):
            print(f"  Bayes rate, predictor order {order}: {bayes_rate(spec, order):.4f}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    """Per-class recall@5 gains of one prediction file over a baseline"""
    dataset = load_dataset(args.dataset)
    gains = per_class_gains(read_predictions(args.baseline), read_predictions(args.predictions),
                            dataset.vocab, level=args.level)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["class_id", "name", "count", "baseline", "recall", "gain"])
    for g in gains:
        writer.writerow([g.class_id, g.name, g.count, repr(g.baseline), repr(g.recall), repr(g.gain)])
        print(f"{g.class_id:>3} {g.name:<16} n={g.count:<5} {g.baseline:.3f} -> {g.recall:.3f} ({g.gain:+.3f})")
    if args.out:
        out_dir = prepare_output_dir(Path(args.out), args.force)
        atomic_write_text(out_dir / "gains.csv", buffer.getvalue())
        write_snapshot(out_dir, "compare", resolve_run_config(args),
                       {"baseline": args.baseline, "predictions": args.predictions, "level": args.level})
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    """Train every variant of an ablation or context sweep over several seeds"""
    config = resolve_run_config(args)
    if not config.dataset:
        raise ValidationError("no dataset given (use --dataset or set `dataset` in the config)")
    out_dir = prepare_output_dir(default_output(args, f"sweep-{args.sweep}", config), args.force)
    dataset = load_dataset(config.dataset)
    write_snapshot(out_dir, "sweep", config, {"sweep": args.sweep, "seeds": args.seeds})
    runs = run_sweep(config, dataset, args.sweep, args.seeds, out_dir)
    bounds = dataset_bounds(dataset)
    write_sweep(out_dir / "sweep.csv", runs, bounds)
    for name, stats in summarize(runs).items():
        print(f"{name:<16} top1 {stats['mean']:.4f} +- {stats['std']:.4f} over {stats['runs']} seed(s)")
    gain = anticipative_gain(runs)
    if gain is not None:
        print(f"anticipative - naive: {gain:+.4f}")
    for name, value in bounds.items():
        print(f"{name}: {value:.4f}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "rollout": cmd_rollout,
    "attn": cmd_attn,
    "extract": cmd_extract,
    "stat": cmd_stat,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def _config_flags(parser: argparse.ArgumentParser, preset: Optional[str] = "avt-tiny") -> None:
    parser.add_argument("--preset", default=preset, help="named preset in configs/ (default: %(default)s)")
    parser.add_argument("--config", help="config file of `key = value` lines")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int)


def _output_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="output directory (default: $AVT_OUTPUT_ROOT/<command>)")
    parser.add_argument("--force", action="store_true", help="write into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avt", description="Anticipative video transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic action-schema dataset")
    _config_flags(gen)
    _output_flags(gen)

    train = sub.add_parser("train", help="train a model")
    _config_flags(train)
    _output_flags(train)
    train.add_argument("--dataset")
    train.add_argument("--features", help="directory with train.feat/val.feat from `avt extract`")
    train.add_argument("--mode", choices=["naive", "anticipative"])
    train.add_argument("--backbone", choices=[m.value for m in BackboneMode])
    train.add_argument("--epochs", type=int)
    train.add_argument("--tau-o", dest="tau_o", type=int)
    train.add_argument("--resume", metavar="CHECKPOINT", help="continue from a last.avtc checkpoint")

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint or prediction file")
    _config_flags(evaluate, preset=None)
    _output_flags(evaluate)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--predictions", help="evaluate an existing prediction file instead")
    evaluate.add_argument("--features", help="directory with extracted feature files")
    evaluate.add_argument("--split", choices=SPLIT_CHOICES, default="val")

    fuse = sub.add_parser("fuse", help="late-fuse prediction files")
    _config_flags(fuse, preset=None)
    _output_flags(fuse)
    fuse.add_argument("--dataset", required=True)
    fuse.add_argument("--predictions", nargs="+", required=True)
    fuse.add_argument("--weights", nargs="+", type=float)

    for name, help_text in (("rollout", "long-term anticipation for one sample"),
                            ("attn", "export attention heatmaps for one sample")):
        clip = sub.add_parser(name, help=help_text)
        _output_flags(clip)
        clip.add_argument("--checkpoint", required=True)
        clip.add_argument("--dataset", required=True)
        clip.add_argument("--sample", required=True, help="sample id, e.g. v0000-s003")
        clip.add_argument("--features", help="directory with extracted feature files")
        if name == "rollout":
            clip.add_argument("--steps", type=int, default=8)
        else:
            clip.add_argument("--spatial", action=argparse.BooleanOptionalAction, default=None)

    extract = sub.add_parser("extract", help="write frame-encoder features to feature files")
    _output_flags(extract)
    extract.add_argument("--checkpoint", required=True)
    extract.add_argument("--dataset", required=True)

    stat = sub.add_parser("stat", help="dataset statistics")
    _config_flags(stat)
    stat.add_argument("--dataset", required=True)

    compare = sub.add_parser("compare", help="per-class gains between two prediction files")
    _config_flags(compare, preset=None)
    compare.add_argument("--out", help="also write gains.csv here")
    compare.add_argument("--force", action="store_true")
    compare.add_argument("--dataset", required=True)
    compare.add_argument("--baseline", required=True)
    compare.add_argument("--predictions", required=True)
    compare.add_argument("--level", choices=["action", "verb", "noun"], default="action")

    sweep = sub.add_parser("sweep", help="loss ablation, feature-weight or context sweep")
    _config_flags(sweep)
    _output_flags(sweep)
    sweep.add_argument("--dataset")
    sweep.add_argument("--sweep", choices=SWEEPS, default="ablation")
    sweep.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    sweep.add_argument("--epochs", type=int)

    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments and run one subcommand"""
    args = build_parser().parse_args(argv)
    logger.info(f"Running `avt {args.command}`")
    status = COMMANDS[args.command](args)
    logger.info(f"`avt {args.command}` finished")
    return status
