"""Shared fixtures: tiny configurations, generated datasets and 64-bit precision"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import RunConfig, resolve_config  # noqa: E402
from data import save_dataset  # noqa: E402
from schema import SchemaSpec, generate_schema_dataset  # noqa: E402
from tensor_core import precision  # noqa: E402

TINY_HEAD = {
    "head.head_dim": 8,
    "head.num_layers": 2,
    "head.num_heads": 2,
    "head.mlp_ratio": 2,
    "head.max_T": 16,
}

TINY_BACKBONE = {
    "backbone.image_size": 8,
    "backbone.patch_size": 4,
    "backbone.channels": 1,
    "backbone.model_dim": 8,
    "backbone.num_layers": 2,
    "backbone.num_heads": 2,
    "backbone.mlp_ratio": 2,
}


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


def tiny_config(**overrides) -> RunConfig:
    """Fixed-feature head small enough for finite differences"""
    values = {
        "backbone_mode": "fixed-features",
        **TINY_HEAD,
        "data.tau_o": 4,
        "data.tau_a": 1,
        "data.batch_size": 4,
        "optim.lr": 0.05,
        "optim.epochs": 2,
        "optim.warmup": 1,
        "schema.feature_dim": 6,
        "schema.n_videos": 6,
        "schema.video_len": 20,
        "schema.val_fraction": 0.34,
    }
    values.update(overrides)
    return resolve_config(None, None, values)


def tiny_frames_config(**overrides) -> RunConfig:
    """avt-tiny layout shrunk to 8x8 frames and a 2x2 patch grid"""
    values = {"backbone_mode": "avt-tiny", **TINY_BACKBONE, "schema.render": "frames"}
    values.update(overrides)
    return tiny_config(**values)


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def frames_config() -> RunConfig:
    return tiny_frames_config()


def make_dataset(config: RunConfig):
    schema = config.schema
    spec = SchemaSpec.from_config(schema, config.seed)
    return generate_schema_dataset(
        spec, schema.n_videos, schema.video_len, render=schema.render,
        frame_shape=config.backbone.frame_shape, val_fraction=schema.val_fraction,
    )


@pytest.fixture
def dataset(config):
    return make_dataset(config)


@pytest.fixture
def dataset_dir(tmp_path, dataset):
    root = tmp_path / "dataset"
    save_dataset(root, dataset)
    return root


@pytest.fixture
def frames_dataset_dir(tmp_path, frames_config):
    root = tmp_path / "frames-dataset"
    save_dataset(root, make_dataset(frames_config))
    return root
