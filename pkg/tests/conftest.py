import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from config import RunConfig  # noqa: E402
from texture_data import build_split, default_class_specs, gen_class_image, make_rng, sample_patch_set  # noqa: E402

# Small enough that a full Stage-1 + Stage-2 pass takes seconds
TINY = {
    "classes": 2,
    "image_size": 32,
    "patch_size": 8,
    "train_patches_per_class": 8,
    "query_patches_per_class": 4,
    "tsn_steps": 3,
    "tsn_batch_size": 2,
    "base_width": 2,
    "style_width": 2,
    "disc_width": 2,
    "code_bits": 8,
    "hash_epochs": 2,
    "hash_batch_per_class": 2,
    "aug_patches_per_class": 2,
    "top_t": 5,
    "precision_t_grid": "2,4",
    "timing_repetitions": 3,
}


@pytest.fixture
def tiny_cfg():
    return RunConfig(TINY)


@pytest.fixture
def tiny_split(tiny_cfg):
    specs = default_class_specs(tiny_cfg.classes, tiny_cfg.data_seed)
    images = [[gen_class_image(spec, tiny_cfg.image_size)] for spec in specs]
    return build_split(images, [s.name for s in specs], tiny_cfg.train_fraction, tiny_cfg.patch_size, tiny_cfg.data_seed)


@pytest.fixture
def tiny_patches(tiny_split, tiny_cfg):
    """(train patches, train labels, test patches, test labels)."""
    train, train_labels = sample_patch_set(tiny_split, tiny_cfg.patch_size, 8, make_rng(0, 1), "train")
    test, test_labels = sample_patch_set(tiny_split, tiny_cfg.patch_size, 4, make_rng(0, 2), "test")
    return train, train_labels, test, test_labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
