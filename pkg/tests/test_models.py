"""Tests for the frame encoder, the causal head and the full model"""

import numpy as np
import pytest

from conftest import TINY_BACKBONE, tiny_config, tiny_frames_config
from config import BackboneConfig, HeadConfig, LossMode
from errors import ConfigurationError, ShapeError, ValidationError
from models import (
    AnticipativeModel,
    CausalHead,
    VisionEncoder,
    build_model,
    causal_mask,
    model_checksum,
    patchify,
    unpatchify,
)
from objectives import LabelTrack, total_loss
from tensor_core import Tensor, gradcheck, is_grad_enabled, no_grad

TOLERANCE = 1e-4


def tiny_head(rng, input_dim=5, num_classes=4, num_layers=2, max_T=16, dtype=np.float64):
    config = HeadConfig(head_dim=8, num_layers=num_layers, num_heads=2, mlp_ratio=2, max_T=max_T)
    return CausalHead(config, input_dim, num_classes, rng, dtype)


def tiny_encoder(rng, num_layers=2, dtype=np.float64):
    values = {k.split(".", 1)[1]: v for k, v in TINY_BACKBONE.items()}
    values["num_layers"] = num_layers
    return VisionEncoder(BackboneConfig(**values), rng, dtype)


class TestPatchify:
    def test_reference_counts(self):
        assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)
        assert patchify(np.zeros((32, 32, 1)), 8).shape == (16, 64)

    def test_row_major_order(self):
        frame = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        patches = patchify(frame, 2).data
        np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])

    def test_reassembly_is_exact(self):
        frames = np.random.default_rng(0).random((3, 8, 8, 2))
        patches = patchify(frames, 4).data
        np.testing.assert_array_equal(unpatchify(patches, 4, 8, 8, 2), frames)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((10, 10, 1)), 4)


class TestVisionEncoder:
    def test_identical_frames_identical_features(self, float64):
        encoder = tiny_encoder(np.random.default_rng(0))
        frame = np.random.default_rng(1).random((8, 8, 1))
        clip = encoder.encode_clip(np.stack([frame, frame, frame])).data
        np.testing.assert_array_equal(clip[0], clip[1])
        np.testing.assert_array_equal(clip[1], clip[2])

    def test_single_frame_clip_matches_encode_frame(self, float64):
        encoder = tiny_encoder(np.random.default_rng(0))
        frame = np.random.default_rng(1).random((8, 8, 1))
        np.testing.assert_array_equal(encoder.encode_clip(frame[None]).data[0], encoder.encode_frame(frame).data)

    def test_per_frame_independence(self, float64):
        encoder = tiny_encoder(np.random.default_rng(0))
        frames = np.random.default_rng(1).random((4, 8, 8, 1))
        before = encoder.encode_clip(frames).data
        frames[2] = np.random.default_rng(2).random((8, 8, 1))
        after = encoder.encode_clip(frames).data
        np.testing.assert_array_equal(before[:2], after[:2])
        np.testing.assert_array_equal(before[3], after[3])
        assert not np.array_equal(before[2], after[2])

    def test_patch_permutation_changes_output(self, float64):
        encoder = tiny_encoder(np.random.default_rng(0))
        frame = np.random.default_rng(1).random((8, 8, 1))
        swapped = frame.copy()
        swapped[:4, :4], swapped[:4, 4:] = frame[:4, 4:], frame[:4, :4]
        assert not np.allclose(encoder.encode_frame(frame).data, encoder.encode_frame(swapped).data)

    def test_token_count(self, float64):
        encoder = tiny_encoder(np.random.default_rng(0))
        tokens = encoder.forward_tokens(np.zeros((2, 8, 8, 1)))
        assert tokens.shape == (2, encoder.config.num_patches + 1, 8)
        for attention in encoder.spatial_attention():
            assert attention.shape == (2, 5, 5)

    def test_wrong_frame_shape(self):
        encoder = tiny_encoder(np.random.default_rng(0), dtype=np.float32)
        with pytest.raises(ShapeError):
            encoder.encode_frame(np.zeros((16, 16, 1)))

    def test_empty_clip(self):
        encoder = tiny_encoder(np.random.default_rng(0), dtype=np.float32)
        with pytest.raises(ValidationError):
            encoder.encode_clip(np.zeros((0, 8, 8, 1)))

    def test_gradient_through_one_layer(self, float64):
        encoder = tiny_encoder(np.random.default_rng(0), num_layers=1)
        frame = Tensor(np.random.default_rng(1).random((8, 8, 1)), requires_grad=True)
        params = [p for _, p in encoder.named_parameters()][:4]
        assert max(gradcheck(lambda f, *_: encoder.encode_frame(f), [frame, *params], max_checks=12)) < TOLERANCE


class TestCausalHead:
    def test_causal_mask(self):
        np.testing.assert_array_equal(causal_mask(1), [[True]])
        np.testing.assert_array_equal(causal_mask(3), [[1, 0, 0], [1, 1, 0], [1, 1, 1]])
        assert causal_mask(6).sum() == 6 * 7 // 2
        with pytest.raises(ValidationError):
            causal_mask(0)

    def test_identity_projector(self, float64):
        head = tiny_head(np.random.default_rng(0), input_dim=8)
        head.projector.weight.data[...] = np.eye(8)
        head.projector.bias.data[...] = 0.0
        x = np.random.default_rng(1).standard_normal((3, 8))
        np.testing.assert_array_equal(head.project_features(Tensor(x)).data, x)

    def test_zero_projector_gives_bias(self, float64):
        head = tiny_head(np.random.default_rng(0))
        head.projector.weight.data[...] = 0.0
        head.projector.bias.data[...] = 0.5
        out = head.project_features(Tensor(np.ones((2, 5)))).data
        np.testing.assert_array_equal(out, np.full((2, 8), 0.5))

    def test_projector_dim_mismatch(self):
        head = tiny_head(np.random.default_rng(0), dtype=np.float32)
        with pytest.raises(ConfigurationError):
            head.project_features(Tensor(np.ones((2, 7))))

    def test_zero_classifier_is_uniform(self, float64):
        head = tiny_head(np.random.default_rng(0))
        head.classifier.weight.data[...] = 0.0
        head.classifier.bias.data[...] = 0.0
        probs = head.probabilities(Tensor(np.random.default_rng(1).standard_normal((3, 8)))).data
        np.testing.assert_allclose(probs, 0.25)

    def test_too_long(self):
        head = tiny_head(np.random.default_rng(0), max_T=4, dtype=np.float32)
        with pytest.raises(ValidationError):
            head.decode(Tensor(np.zeros((1, 5, 8))))

    def test_single_step_attends_to_itself(self, float64):
        head = tiny_head(np.random.default_rng(0))
        head.decode(Tensor(np.random.default_rng(1).standard_normal((1, 1, 8))))
        np.testing.assert_array_equal(head.temporal_attention(), [[[1.0]]])

    def test_attention_is_zero_beyond_causal_boundary(self, float64):
        head = tiny_head(np.random.default_rng(0))
        head.decode(Tensor(np.random.default_rng(1).standard_normal((2, 5, 8))))
        attention = head.temporal_attention()
        assert np.all(attention[:, ~causal_mask(5)] == 0.0)
        np.testing.assert_allclose(attention.sum(axis=-1), 1.0, atol=1e-12)

    def test_decoder_gradient(self, float64):
        head = tiny_head(np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 8)), requires_grad=True)
        params = [p for _, p in head.named_parameters()]
        errors = gradcheck(lambda x, *_: head.decode(x), [x, *params], max_checks=10)
        assert max(errors) < TOLERANCE


class TestCausality:
    @pytest.mark.parametrize("seed", range(100))
    def test_perturbing_later_frame_leaves_earlier_outputs(self, float64, seed):
        rng = np.random.default_rng(seed)
        model = AnticipativeModel(tiny_head(rng))
        inputs = rng.standard_normal((2, 6, 5))
        base = model.forward(inputs)
        t_prime = int(rng.integers(1, 6))
        inputs[:, t_prime] = rng.standard_normal((2, 5))
        moved = model.forward(inputs)
        np.testing.assert_array_equal(base.z_hat.data[:, :t_prime], moved.z_hat.data[:, :t_prime])
        np.testing.assert_array_equal(base.logits.data[:, :t_prime], moved.logits.data[:, :t_prime])

    def test_hard_mask_at_32_bit(self):
        rng = np.random.default_rng(0)
        model = AnticipativeModel(tiny_head(rng, dtype=np.float32))
        inputs = rng.standard_normal((1, 5, 5)).astype(np.float32)
        base = model.forward(inputs).logits.data
        inputs[0, 4] = 100.0
        np.testing.assert_array_equal(base[0, :4], model.forward(inputs).logits.data[0, :4])

    def test_no_gradient_from_future_inputs(self, float64):
        rng = np.random.default_rng(3)
        model = AnticipativeModel(tiny_head(rng))
        inputs = Tensor(rng.standard_normal((1, 5, 5)), requires_grad=True)
        model.forward(inputs).logits[0, 2].sum().backward()
        assert np.all(inputs.grad[0, 3:] == 0.0)
        assert np.any(inputs.grad[0, :3] != 0.0)

    def test_end_to_end_with_frames(self, float64):
        config = tiny_frames_config()
        model = build_model(config, None, 4, dtype=np.float64)
        frames = np.random.default_rng(0).random((1, 4, 8, 8, 1))
        base = model.forward(frames).logits.data
        frames[0, 3] = np.random.default_rng(1).random((8, 8, 1))
        np.testing.assert_array_equal(base[0, :3], model.forward(frames).logits.data[0, :3])

    @pytest.mark.parametrize("seed", range(20))
    def test_prefix_consistency(self, float64, seed):
        rng = np.random.default_rng(seed)
        model = AnticipativeModel(tiny_head(rng))
        inputs = rng.standard_normal((1, 6, 5))
        full = model.forward(inputs).logits.data
        for t in range(1, 7):
            prefix = model.forward(inputs[:, :t]).logits.data
            np.testing.assert_allclose(prefix[0, -1], full[0, t - 1], atol=1e-6)


class TestAnticipativeModel:
    def test_output_shapes_and_rows(self):
        model = build_model(tiny_config(), 5, 4)
        out = model.forward(np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32))
        assert out.z_hat.shape == (3, 4, 8)
        assert out.logits.shape == (3, 4, 4)
        np.testing.assert_allclose(out.y_hat.sum(axis=-1), 1.0, atol=1e-6)
        assert out.next_action_probs.shape == (3, 4)

    def test_deterministic_under_seed(self):
        inputs = np.random.default_rng(0).standard_normal((2, 4, 5)).astype(np.float32)
        first = build_model(tiny_config(), 5, 4).forward(inputs).logits.data
        second = build_model(tiny_config(), 5, 4).forward(inputs).logits.data
        np.testing.assert_array_equal(first, second)

    def test_wrong_rank(self):
        model = build_model(tiny_config(), 5, 4)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((4, 5), dtype=np.float32))

    def test_fixed_features_needs_dim(self):
        with pytest.raises(ConfigurationError):
            build_model(tiny_config(), None, 4)

    def test_feature_path_trains_only_the_head(self, float64):
        model = build_model(tiny_frames_config(), None, 4, dtype=np.float64)
        names = [name for name, _ in model.trainable_parameters(from_features=True)]
        assert names and all(name.startswith("head.") for name in names)
        backbone_before = model_checksum(model.backbone.state_dict())
        features = model.extract_features(np.random.default_rng(0).random((1, 3, 8, 8, 1)))
        assert features.shape == (1, 3, 8)
        out = model.forward(features, from_features=True)
        out.logits.sum().backward()
        assert all(p.grad is None for _, p in model.backbone.named_parameters())
        assert model_checksum(model.backbone.state_dict()) == backbone_before

    @staticmethod
    def loss_with_constant_targets(model, inputs, tracks):
        """
        Anticipative loss whose feature targets act as constants

        The tape pass uses the model's own detached z_proj targets; the
        finite-difference passes run under no_grad and reuse the targets of
        the unperturbed model.
        """
        with no_grad():
            frozen = model.forward(inputs).z_proj

        def fn(*_):
            outputs = model.forward(inputs)
            z_true = None if is_grad_enabled() else frozen
            return total_loss(outputs, tracks, LossMode.ANTICIPATIVE, z_true=z_true).loss

        return fn

    @pytest.mark.parametrize("seed", range(10))
    def test_feature_model_loss_gradient(self, float64, seed):
        rng = np.random.default_rng(seed)
        model = build_model(tiny_config(), 3, 5, seed=seed, dtype=np.float64)
        inputs = rng.standard_normal((2, 4, 3))
        tracks = [LabelTrack(list(rng.integers(0, 5, size=5))) for _ in range(2)]
        params = [p for _, p in model.named_parameters()]
        fn = self.loss_with_constant_targets(model, inputs, tracks)
        assert max(gradcheck(fn, params, max_checks=6, seed=seed)) < TOLERANCE

    @pytest.mark.parametrize("seed", range(3))
    def test_frames_model_loss_gradient(self, float64, seed):
        rng = np.random.default_rng(seed)
        model = build_model(tiny_frames_config(), None, 3, seed=seed, dtype=np.float64)
        frames = rng.random((1, 4, 8, 8, 1))
        tracks = [LabelTrack(list(rng.integers(0, 3, size=5)))]
        params = [p for _, p in model.named_parameters()]
        fn = self.loss_with_constant_targets(model, frames, tracks)
        assert max(gradcheck(fn, params, max_checks=3, seed=seed)) < TOLERANCE

    def test_state_dict_round_trip(self):
        source = build_model(tiny_config(), 5, 4, seed=1)
        target = build_model(tiny_config(), 5, 4, seed=2)
        target.load_state_dict(source.state_dict())
        assert model_checksum(target.state_dict()) == model_checksum(source.state_dict())

    def test_no_grad_forward(self):
        model = build_model(tiny_config(), 5, 4)
        with no_grad():
            out = model.forward(np.zeros((1, 2, 5), dtype=np.float32))
        assert not out.logits.requires_grad
