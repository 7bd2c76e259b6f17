"""Tests for the training loop, checkpoints, resumption and prediction"""

import csv
import json

import numpy as np
import pytest

from conftest import tiny_config
from data import AnticipationSample, build_samples
from errors import NumericalError, ValidationError, VocabularyError
from models import build_model
from tensor_core import load_checkpoint
from training import BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_COLUMNS, SUMMARY, TRAIN_LOG, Trainer, predict, restore_model


def make_trainer(config, dataset, out_dir, **kwargs):
    train, _ = build_samples(dataset, "train", config.data)
    val, _ = build_samples(dataset, "val", config.data)
    model = build_model(config, dataset.frame_shape[0], dataset.vocab.num_actions)
    return Trainer(model, config, train, val, out_dir, vocab_hash=dataset.vocab.hash, **kwargs)


def read_log(out_dir):
    with open(out_dir / TRAIN_LOG, newline="") as f:
        return list(csv.DictReader(f))


class TestFit:
    def test_writes_run_files(self, config, dataset, tmp_path):
        trainer = make_trainer(config, dataset, tmp_path)
        result = trainer.fit()
        assert len(result.epochs) == 2
        assert (tmp_path / LAST_CHECKPOINT).exists() and (tmp_path / BEST_CHECKPOINT).exists()
        assert result.final.val_top1 is not None
        summary = json.loads((tmp_path / SUMMARY).read_text())
        assert summary["epochs"] == 2 and summary["best_epoch"] == result.best_epoch

    def test_log_has_one_row_per_step(self, config, dataset, tmp_path):
        trainer = make_trainer(config, dataset, tmp_path)
        trainer.fit()
        rows = read_log(tmp_path)
        assert list(rows[0]) == LOG_COLUMNS
        assert len(rows) == 2 * trainer.steps_per_epoch
        assert [int(r["step"]) for r in rows] == list(range(1, len(rows) + 1))

    def test_lr_column_at_epoch_boundaries(self, config, dataset, tmp_path):
        trainer = make_trainer(config, dataset, tmp_path)
        trainer.fit()
        rows = read_log(tmp_path)
        steps = trainer.steps_per_epoch
        assert float(rows[0]["lr"]) == 0.0
        assert float(rows[steps]["lr"]) == pytest.approx(config.optim.lr)
        assert float(rows[1]["lr"]) == pytest.approx(config.optim.lr / steps)
        assert float(rows[-1]["lr"]) < config.optim.lr

    def test_anticipative_total_is_the_sum(self, config, dataset, tmp_path):
        make_trainer(config, dataset, tmp_path).fit()
        for row in read_log(tmp_path):
            terms = float(row["l_next"]) + float(row["l_cls"]) + float(row["l_feat"])
            assert float(row["total"]) == terms

    def test_naive_logs_auxiliary_terms_outside_total(self, dataset, tmp_path):
        config = tiny_config(**{"loss.mode": "naive"})
        make_trainer(config, dataset, tmp_path).fit()
        for row in read_log(tmp_path):
            assert float(row["total"]) == float(row["l_next"])
            assert float(row["l_cls"]) > 0 and float(row["l_feat"]) > 0

    def test_no_training_samples(self, config, dataset, tmp_path):
        model = build_model(config, 6, dataset.vocab.num_actions)
        with pytest.raises(ValidationError):
            Trainer(model, config, [], [], tmp_path)


class TestResume:
    def test_resumed_run_matches_uninterrupted(self, dataset, tmp_path):
        full = make_trainer(tiny_config(), dataset, tmp_path / "full")
        full.fit()

        first_half = make_trainer(tiny_config(**{"optim.epochs": 1}), dataset, tmp_path / "split")
        first_half.fit()
        second_half = make_trainer(tiny_config(), dataset, tmp_path / "split")
        second_half.resume(tmp_path / "split" / LAST_CHECKPOINT)
        assert second_half.start_epoch == 1
        second_half.fit()

        for name, value in full.model.state_dict().items():
            np.testing.assert_allclose(second_half.model.state_dict()[name], value, rtol=1e-5, atol=1e-7)
        full_rows, split_rows = read_log(tmp_path / "full"), read_log(tmp_path / "split")
        assert len(full_rows) == len(split_rows)
        for a, b in zip(full_rows, split_rows):
            assert float(a["l_next"]) == pytest.approx(float(b["l_next"]), rel=1e-5)
            assert a["lr"] == b["lr"]

    def test_other_vocabulary_is_refused(self, config, dataset, tmp_path):
        make_trainer(config, dataset, tmp_path).fit()
        trainer = make_trainer(config, dataset, tmp_path / "other")
        trainer.vocab_hash = "0" * 64
        with pytest.raises(VocabularyError):
            trainer.resume(tmp_path / LAST_CHECKPOINT)


class TestNumericalFailure:
    def test_nan_aborts_and_keeps_last_checkpoint(self, dataset, tmp_path):
        make_trainer(tiny_config(**{"optim.epochs": 1}), dataset, tmp_path).fit()
        saved = (tmp_path / LAST_CHECKPOINT).read_bytes()

        trainer = make_trainer(tiny_config(), dataset, tmp_path)
        trainer.resume(tmp_path / LAST_CHECKPOINT)
        trainer.train_samples = [
            AnticipationSample(s.sample_id, np.full_like(s.inputs, np.nan), s.track)
            for s in trainer.train_samples
        ]
        with pytest.raises(NumericalError, match=LAST_CHECKPOINT):
            trainer.fit()
        assert (tmp_path / LAST_CHECKPOINT).read_bytes() == saved
        assert load_checkpoint(tmp_path / LAST_CHECKPOINT).meta["epoch"] == 1


class TestRestoreAndPredict:
    def test_restored_model_predicts_identically(self, config, dataset, tmp_path):
        trainer = make_trainer(config, dataset, tmp_path)
        trainer.fit()
        model, restored_config, checkpoint = restore_model(tmp_path / LAST_CHECKPOINT)
        assert restored_config.to_dict() == config.to_dict()
        assert checkpoint.meta["vocab_hash"] == dataset.vocab.hash
        before = predict(trainer.model, trainer.val_samples)
        after = predict(model, trainer.val_samples)
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a.action_probs, b.action_probs)

    def test_records_follow_sample_order(self, config, dataset):
        samples, _ = build_samples(dataset, "val", config.data)
        model = build_model(config, 6, dataset.vocab.num_actions)
        records = predict(model, samples, batch_size=3)
        assert [r.sample_id for r in records] == [s.sample_id for s in samples]
        assert [r.true_action for r in records] == [s.next_action for s in samples]
        for record in records:
            assert record.action_probs.sum() == pytest.approx(1.0)
