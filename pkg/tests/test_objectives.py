"""Tests for the loss terms and the naive/anticipative combinations"""

import math

import numpy as np
import pytest

from config import IGNORE_LABEL, FeatLoss, LossConfig, LossMode
from errors import ClassIndexError, ValidationError
from models import AnticipativeModel, ModelOutputs
from objectives import LabelTrack, loss_cls, loss_feat, loss_feat_nce, loss_next, total_loss
from tensor_core import Tensor, cross_entropy, gradcheck, log_softmax

from test_models import tiny_head


class TestLabelTrack:
    def test_target_must_be_valid(self):
        with pytest.raises(ValidationError):
            LabelTrack([0, 1, IGNORE_LABEL])

    def test_observed_and_target(self):
        track = LabelTrack([IGNORE_LABEL, 2, 3, 1])
        assert track.num_frames == 3
        assert track.next_action == 1
        np.testing.assert_array_equal(track.observed, [IGNORE_LABEL, 2, 3])

    def test_class_bound(self):
        with pytest.raises(ClassIndexError):
            LabelTrack([0, 5]).check_classes(5)


class TestLossNext:
    def test_uniform(self, float64):
        assert loss_next(Tensor(np.zeros(10)), 4).item() == pytest.approx(math.log(10))

    def test_point_mass(self, float64):
        logits = np.full(6, -60.0)
        logits[1] = 60.0
        assert loss_next(Tensor(logits), 1).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_cross_entropy(self, float64):
        logits = Tensor(np.random.default_rng(0).standard_normal((3, 5)))
        assert loss_next(logits, [0, 4, 2]).item() == cross_entropy(logits, [0, 4, 2]).item()

    def test_invalid_class(self):
        with pytest.raises(ClassIndexError):
            loss_next(Tensor(np.zeros(3)), 3)


class TestLossFeat:
    def test_perfect_prediction(self, float64):
        z = np.random.default_rng(0).standard_normal((4, 3))
        z_hat = np.vstack([z[1:], np.zeros((1, 3))])
        assert loss_feat(Tensor(z_hat), Tensor(z)).item() == 0.0

    def test_hand_arithmetic(self, float64):
        z_hat = Tensor(np.array([[0.0, 0.0], [9.0, 9.0]]))
        z = Tensor(np.array([[1.0, 1.0], [3.0, 4.0]]))
        assert loss_feat(z_hat, z).item() == pytest.approx(12.5)

    def test_single_step_is_zero(self, float64):
        assert loss_feat(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3)))).item() == 0.0

    def test_gradient_and_detached_target(self, float64):
        rng = np.random.default_rng(1)
        z_hat = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        z = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        loss_feat(z_hat, z).backward()
        expected = np.zeros((5, 4))
        expected[:-1] = 2 * (z_hat.data[:-1] - z.data[1:]) / (4 * 4)
        np.testing.assert_allclose(z_hat.grad, expected, atol=1e-12)
        assert z.grad is None
        z_hat.grad = None
        assert max(gradcheck(lambda a: loss_feat(a, z), [z_hat])) < 1e-4


class TestLossFeatNCE:
    def test_tied_candidates(self, float64):
        z_hat = Tensor(np.array([[[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]]))
        z = Tensor(np.array([[[0.0, 0.0], [0.0, 1.0], [0.0, 1.0]]]))
        assert loss_feat_nce(z_hat, z).item() == pytest.approx(math.log(2))

    def test_sharp_positive(self, float64):
        z_hat = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]]))
        z = Tensor(np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]]))
        assert loss_feat_nce(z_hat, z, temperature=1e-3).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_enumeration(self, float64):
        rng = np.random.default_rng(2)
        z_hat, z = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
        queries = z_hat[:, :-1].reshape(4, 4)
        keys = z[:, 1:].reshape(4, 4)
        queries = queries / np.sqrt((queries ** 2).sum(axis=1, keepdims=True) + 1e-8)
        keys = keys / np.sqrt((keys ** 2).sum(axis=1, keepdims=True) + 1e-8)
        scores = queries @ keys.T / 0.1
        expected = np.mean([-(scores[i, i] - np.log(np.exp(scores[i]).sum())) for i in range(4)])
        assert loss_feat_nce(Tensor(z_hat), Tensor(z)).item() == pytest.approx(expected, rel=1e-12)

    def test_too_few_candidates(self, float64):
        with pytest.raises(ValidationError):
            loss_feat_nce(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 3))))


class TestLossCls:
    def test_all_ignored(self, float64):
        logits = Tensor(np.random.default_rng(0).standard_normal((4, 5)))
        assert loss_cls(logits, LabelTrack([IGNORE_LABEL] * 4 + [2])).item() == 0.0

    def test_single_supervised_uniform(self, float64):
        logits = Tensor(np.zeros((3, 10)))
        track = LabelTrack([IGNORE_LABEL, IGNORE_LABEL, 7, 1])
        assert loss_cls(logits, track).item() == pytest.approx(math.log(10))

    def test_fully_labeled_is_mean_of_terms(self, float64):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.standard_normal((4, 5)))
        labels = [1, 2, 3, 4, 0]
        terms = [cross_entropy(Tensor(logits.data[t]), labels[t + 1]).item() for t in range(3)]
        assert loss_cls(logits, LabelTrack(labels)).item() == pytest.approx(np.mean(terms), rel=1e-12)

    def test_ignored_positions_do_not_matter(self, float64):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((4, 5))
        track = LabelTrack([0, 1, IGNORE_LABEL, 3, 2])
        before = loss_cls(Tensor(logits), track).item()
        logits[1] = rng.standard_normal(5) * 10
        assert loss_cls(Tensor(logits), track).item() == before

    def test_batch_is_mean_of_samples(self, float64):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((2, 4, 5))
        tracks = [LabelTrack([0, 1, 2, 3, 4]), LabelTrack([IGNORE_LABEL, IGNORE_LABEL, 2, 3, 4])]
        separate = [loss_cls(Tensor(logits[i]), tracks[i]).item() for i in range(2)]
        assert loss_cls(Tensor(logits), tracks).item() == pytest.approx(np.mean(separate), rel=1e-12)


def _outputs(rng, batch=2, steps=4, dim=3, classes=5):
    return ModelOutputs(
        z_proj=Tensor(rng.standard_normal((batch, steps, dim))),
        z_hat=Tensor(rng.standard_normal((batch, steps, dim))),
        logits=Tensor(rng.standard_normal((batch, steps, classes))),
    )


class TestTotalLoss:
    TRACKS = [LabelTrack([0, 1, 2, 3, 4]), LabelTrack([IGNORE_LABEL, 2, 2, 1, 0])]

    def test_naive_is_next_only(self, float64):
        report = total_loss(_outputs(np.random.default_rng(0)), self.TRACKS, LossMode.NAIVE)
        assert report.total == report.l_next
        assert report.l_cls > 0 and report.l_feat > 0

    def test_anticipative_decomposes_exactly(self, float64):
        report = total_loss(_outputs(np.random.default_rng(1)), self.TRACKS, "anticipative")
        assert report.total == report.l_next + report.l_cls + report.l_feat

    @pytest.mark.parametrize("seed", range(50))
    def test_decomposes_exactly_at_float32(self, seed):
        rng = np.random.default_rng(seed)
        outputs = ModelOutputs(*(
            Tensor(rng.standard_normal((3, 4, size)).astype(np.float32)) for size in (6, 6, 5)
        ))
        tracks = [LabelTrack(list(rng.integers(0, 5, size=5))) for _ in range(3)]
        report = total_loss(outputs, tracks, LossMode.ANTICIPATIVE)
        assert outputs.logits.dtype == np.float32
        assert report.total == report.l_next + report.l_cls + report.l_feat

    def test_weighted_total_uses_reported_terms(self):
        rng = np.random.default_rng(7)
        outputs = ModelOutputs(*(Tensor(rng.standard_normal((2, 4, 3)).astype(np.float32)) for _ in range(2)),
                               Tensor(rng.standard_normal((2, 4, 5)).astype(np.float32)))
        report = total_loss(outputs, self.TRACKS, config=LossConfig(cls_weight=0.5, feat_weight=2.0))
        assert report.total == report.l_next + report.l_cls * 0.5 + report.l_feat * 2.0
        assert report.loss.item() == pytest.approx(report.total, rel=1e-5)

    def test_perfect_auxiliary_predictions(self, float64):
        z = np.random.default_rng(2).standard_normal((1, 3, 2))
        z_hat = np.concatenate([z[:, 1:], np.zeros((1, 1, 2))], axis=1)
        logits = np.zeros((1, 3, 4))
        logits[0, 0, 1] = logits[0, 1, 2] = 80.0
        outputs = ModelOutputs(Tensor(z), Tensor(z_hat), Tensor(logits))
        report = total_loss(outputs, [LabelTrack([0, 1, 2, 3])], LossMode.ANTICIPATIVE)
        assert report.l_feat == 0.0
        assert report.l_cls == pytest.approx(0.0, abs=1e-30)
        assert report.total == pytest.approx(report.l_next, abs=1e-30)

    def test_zero_weight_drops_term(self, float64):
        config = LossConfig(feat_weight=0.0)
        report = total_loss(_outputs(np.random.default_rng(3)), self.TRACKS, config=config)
        assert report.total == pytest.approx(report.l_next + report.l_cls, rel=1e-15)

    def test_nce_variant(self, float64):
        config = LossConfig(feat_loss=FeatLoss.NCE)
        report = total_loss(_outputs(np.random.default_rng(4)), self.TRACKS, config=config)
        assert report.l_feat > 0

    def test_naive_gradient_ignores_auxiliary_terms(self, float64):
        rng = np.random.default_rng(5)
        outputs = _outputs(rng)
        outputs.z_hat.requires_grad = True
        outputs.logits.requires_grad = True
        total_loss(outputs, self.TRACKS, LossMode.NAIVE).loss.backward()
        assert outputs.z_hat.grad is None

    def test_gradient_through_model(self, float64):
        rng = np.random.default_rng(6)
        model = AnticipativeModel(tiny_head(rng, num_classes=5, input_dim=3))
        inputs = rng.standard_normal((2, 4, 3))
        # the projector also produces the detached future-feature targets
        params = [p for name, p in model.named_parameters() if "projector" not in name]

        def fn(*_):
            return total_loss(model.forward(inputs), self.TRACKS, LossMode.ANTICIPATIVE).loss

        assert max(gradcheck(fn, params, max_checks=6)) < 1e-4


def test_log_softmax_gather_matches_cross_entropy(float64):
    logits = Tensor(np.random.default_rng(7).standard_normal((2, 6)))
    picked = log_softmax(logits, axis=-1).data[[0, 1], [3, 5]]
    assert -picked.mean() == pytest.approx(cross_entropy(logits, [3, 5]).item(), rel=1e-14)
