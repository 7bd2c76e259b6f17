"""Tests for sweeps and their summaries, plus the long behavioral training runs"""

import csv

import pytest

from conftest import make_dataset, tiny_config
from config import resolve_config
from data import build_samples
from errors import ValidationError
from evaluation import topk_accuracy
from experiments import (
    ABLATION_VARIANTS,
    CONTEXT_LENGTHS,
    SweepRun,
    anticipative_gain,
    dataset_bounds,
    run_sweep,
    summarize,
    sweep_variants,
    write_sweep,
)
from models import build_model
from schema import SchemaSpec, bayes_rate
from training import Trainer, predict


def sweep_run(variant, seed, top1):
    return SweepRun("ablation", variant, seed, 4, "anticipative", 1.0, 1.0, top1, 0.5)


class TestVariants:
    def test_names(self):
        assert list(sweep_variants("ablation")) == list(ABLATION_VARIANTS)
        assert list(sweep_variants("feat-weight")) == ["feat-0", "feat-0.5", "feat-1", "feat-2"]
        assert list(sweep_variants("context")) == [f"tau_o-{t}" for t in CONTEXT_LENGTHS]
        assert sweep_variants("context", [3])["tau_o-3"]["data.tau_o"] == 3

    def test_unknown_sweep(self):
        with pytest.raises(ValidationError, match="ablation"):
            sweep_variants("dropout")


class TestSummaries:
    def test_summarize_in_run_order(self):
        runs = [sweep_run("naive", 0, 0.2), sweep_run("naive", 1, 0.4), sweep_run("anticipative", 0, 0.5)]
        stats = summarize(runs)
        assert list(stats) == ["naive", "anticipative"]
        assert stats["naive"]["mean"] == pytest.approx(0.3)
        assert stats["naive"]["std"] == pytest.approx(0.1)
        assert stats["anticipative"]["runs"] == 1

    def test_anticipative_gain(self):
        runs = [sweep_run("naive", 0, 0.2), sweep_run("anticipative", 0, 0.5)]
        assert anticipative_gain(runs) == pytest.approx(0.3)
        assert anticipative_gain(runs[:1]) is None

    def test_write_sweep(self, tmp_path):
        runs = [sweep_run("naive", 0, 0.25), sweep_run("anticipative", 0, 0.5)]
        path = write_sweep(tmp_path / "sweep.csv", runs, {"bayes_order0": 0.125})
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0][0] == "sweep" and rows[0][-2:] == ["val_top1", "val_recall5"]
        assert [row[:2] for row in rows[3:]] == [["mean", "naive"], ["mean", "anticipative"],
                                                 ["bound", "bayes_order0"]]
        assert float(rows[-1][7]) == 0.125

    def test_dataset_bounds(self, dataset):
        bounds = dataset_bounds(dataset)
        assert list(bounds) == ["bayes_order0", "bayes_order1", "bayes_order2"]
        assert bounds["bayes_order0"] <= bounds["bayes_order1"] <= bounds["bayes_order2"]


def test_small_ablation_sweep(config, dataset, tmp_path):
    base = config.merged({"optim.epochs": 1, "optim.warmup": 0})
    runs = run_sweep(base, dataset, "ablation", [0], tmp_path)
    assert [r.variant for r in runs] == list(ABLATION_VARIANTS)
    assert [r.mode for r in runs] == ["naive", "anticipative", "anticipative", "anticipative"]
    assert runs[2].feat_weight == 0.0 and runs[3].cls_weight == 0.0
    for run in runs:
        assert 0.0 <= run.val_top1 <= 1.0
        assert (tmp_path / f"{run.variant}-seed0" / "last.avtc").exists()


def test_sweep_needs_validation_split(tmp_path):
    config = tiny_config(**{"schema.val_fraction": 0.0, "optim.epochs": 1, "optim.warmup": 0})
    with pytest.raises(ValidationError):
        run_sweep(config, make_dataset(config), "ablation", [0], tmp_path)


def desk_config(**overrides):
    """Fixed-feature desk preset on an order-2 schema with K=8"""
    values = {"schema.num_actions": 8, "schema.num_verbs": 4, "schema.order": 2}
    values.update(overrides)
    return resolve_config("fixed-features", None, values)


@pytest.mark.slow
def test_overfits_a_small_training_set(tmp_path):
    config = desk_config(**{"optim.epochs": 200, "schema.n_videos": 8, "schema.video_len": 120,
                            "schema.val_fraction": 0.0})
    dataset = make_dataset(config)
    samples, _ = build_samples(dataset, "train", config.data)
    samples = samples[:64]
    assert len(samples) == 64
    model = build_model(config, samples[0].inputs.shape[-1], len(dataset.vocab))
    Trainer(model, config, samples, [], tmp_path, vocab_hash=dataset.vocab.hash).fit()
    assert topk_accuracy(predict(model, samples), 1) >= 0.95


@pytest.mark.slow
def test_anticipative_beats_naive(tmp_path):
    config = desk_config(**{"schema.n_videos": 50, "schema.video_len": 100, "schema.val_fraction": 0.2})
    dataset = make_dataset(config)
    runs = run_sweep(config, dataset, "ablation", [0, 1, 2], tmp_path)
    runs = [r for r in runs if r.variant in ("naive", "anticipative")]
    stats = summarize(runs)
    assert anticipative_gain(runs) >= 0.02
    memoryless = bayes_rate(SchemaSpec.from_config(config.schema, config.seed), 1)
    assert stats["anticipative"]["mean"] > memoryless


@pytest.mark.slow
def test_longer_context_does_not_hurt(tmp_path):
    config = desk_config(**{"schema.n_videos": 50, "schema.video_len": 100, "schema.val_fraction": 0.2})
    dataset = make_dataset(config)
    stats = summarize(run_sweep(config, dataset, "context", [0, 1, 2], tmp_path))
    means = [stats[f"tau_o-{t}"]["mean"] for t in CONTEXT_LENGTHS]
    drops = [earlier - later for earlier, later in zip(means, means[1:]) if later < earlier]
    assert len(drops) <= 1
    assert all(drop <= 0.005 for drop in drops)
