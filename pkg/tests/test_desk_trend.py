import numpy as np
import pytest

from config import RunConfig
from eval_harness import map_at
from hash_learner import encode, lsh_encode, lsh_hasher, train_hash
from retrieval_index import build_index
from texture_data import (
    build_split,
    default_class_specs,
    gen_class_image,
    lbp_descriptor,
    make_rng,
    rgb_to_gray,
    sample_patch_set,
)
from tsn import train_tsn

# 8 classes, K=16, 32-bit codes, MAP@50; median over three hash seeds
DESK = {
    "classes": 8,
    "image_size": 128,
    "patch_size": 16,
    "tsn_steps": 150,
    "code_bits": 32,
    "hash_epochs": 15,
    "aug_patches_per_class": 32,
    "top_t": 50,
}
HASH_SEEDS = (3, 4, 5)
CHANCE = 1.0 / DESK["classes"]


@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig(DESK)
    specs = default_class_specs(cfg.classes, cfg.data_seed)
    images = [[gen_class_image(spec, cfg.image_size)] for spec in specs]
    split = build_split(images, [s.name for s in specs], cfg.train_fraction, cfg.patch_size, cfg.data_seed)
    db, db_labels = sample_patch_set(split, cfg.patch_size, 64, make_rng(cfg.data_seed, 1), "train")
    queries, q_labels = sample_patch_set(split, cfg.patch_size, 16, make_rng(cfg.data_seed, 2), "test")
    generator = train_tsn(split, cfg, progress=False).generator
    return cfg, generator, db, db_labels, queries, q_labels


def median_map(desk, **train_kwargs):
    cfg, generator, db, db_labels, queries, q_labels = desk
    scores = []
    for seed in HASH_SEEDS:
        run_cfg = cfg.replace(hash_seed=seed)
        result = train_hash(generator, db, db_labels, run_cfg, n_classes=cfg.classes, progress=False, **train_kwargs)
        index = build_index(encode(result.model, result.fusion, generator, db), np.arange(len(db)), db_labels)
        scores.append(map_at(index, encode(result.model, result.fusion, generator, queries), q_labels, cfg.top_t))
    return float(np.median(scores))


def lbp_lsh_map(desk):
    cfg, _, db, db_labels, queries, q_labels = desk
    db_hist = np.stack([lbp_descriptor(rgb_to_gray(p)) for p in db])
    q_hist = np.stack([lbp_descriptor(rgb_to_gray(p)) for p in queries])
    scores = []
    for seed in HASH_SEEDS:
        hasher = lsh_hasher(db_hist.shape[1], cfg.code_bits, seed)
        index = build_index(lsh_encode(hasher, db_hist), np.arange(len(db)), db_labels)
        scores.append(map_at(index, lsh_encode(hasher, q_hist), q_labels, cfg.top_t))
    return float(np.median(scores))


@pytest.mark.slow
def test_desk_scale_retrieval_trend(desk):
    full = median_map(desk)
    baseline = lbp_lsh_map(desk)
    assert full >= 4 * CHANCE
    assert full >= 2 * baseline
    assert median_map(desk, use_attention=False) <= full + 0.02
    assert median_map(desk, augmentation=False) <= full + 0.02
