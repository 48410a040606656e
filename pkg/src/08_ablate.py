# src/08_ablate.py
#
# Comparison grids at desk scale. Each preset trains the variants it compares under
# identical seeds and scores them on the same database / query split.
#
# Presets:
#   tsn-losses        Stage-1 loss combinations (l1+style, adv, adv+style, adv+style+l1)
#   no-ca             channel attention on vs off
#   no-augmentation   generated-patch augmentation on vs off
#   lsh-baseline      learned codes vs random-hyperplane LSH on the same fused descriptors
#   lbp-lsh-baseline  LSH over 256-bin LBP histograms (no networks involved)
#   code-lengths      k in {16, 32, 64}; also writes the precision-vs-bits curve
#   untrained-tsn     Stage 2 on the trained generator vs on its untrained initialisation
#
# Output (in --out):
#   ablation_<preset>.parquet / .csv (+ .csv.cfg echo)
#     columns: variant, code_bits, map_at_t, precision_radius2
#   ablation_<preset>.png             bar chart of MAP per variant
#   precision_vs_bits.{csv,svg}       code-lengths only
#
# Notes:
#   - Without --tsn, presets that need a trained generator train one from the run config first.
#   - LSH presets write two rows: hyperplanes through the origin (`<name>`) and the same
#     hyperplanes through the database mean (`<name>[centred]`), which is no longer data-independent.


import os
import sys
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from attention_fusion import extract_descriptors
from config import LOSS_PRESETS, add_config_arguments, config_from_args, write_config_echo
from eval_harness import emit_curve, map_at, precision_at_radius
from hash_learner import encode, lsh_encode, lsh_hasher, train_hash
from retrieval_index import build_index
from texture_data import lbp_descriptor, load_dataset_split, load_patch_set, rgb_to_gray
from tsn import build_networks, load_generator, train_tsn

PRESETS = (
    "tsn-losses",
    "no-ca",
    "no-augmentation",
    "lsh-baseline",
    "lbp-lsh-baseline",
    "code-lengths",
    "untrained-tsn",
)
CODE_LENGTHS = (16, 32, 64)
RESULT_COLUMNS = ["variant", "code_bits", "map_at_t", "precision_radius2"]


# === Shared plumbing ===
class AblationData:
    """Database (train) and query (test) patches of one dataset directory."""

    def __init__(self, data_dir):
        self.data_dir = data_dir
        self.db_ids, self.db_patches, self.db_labels, self.class_names = load_patch_set(data_dir, "train")
        _, self.q_patches, self.q_labels, _ = load_patch_set(data_dir, "test")

    @property
    def n_classes(self):
        return len(self.class_names)


def score(name, db_codes, q_codes, data, cfg):
    index = build_index(db_codes, data.db_ids, data.db_labels)
    return {
        "variant": name,
        "code_bits": index.k,
        "map_at_t": map_at(index, q_codes, data.q_labels, cfg.top_t),
        "precision_radius2": precision_at_radius(index, q_codes, data.q_labels, cfg.radius),
    }


def trained_generator(cfg, data_dir, tsn_path=None, loss_preset=None):
    if tsn_path is not None and loss_preset is None:
        return load_generator(tsn_path)
    run_cfg = cfg if loss_preset is None else cfg.replace(loss_preset=loss_preset)
    split = load_dataset_split(data_dir, run_cfg.train_fraction, run_cfg.patch_size, run_cfg.data_seed)
    print(f"ℹ️  Training Stage 1 with loss preset {run_cfg.loss_preset}")
    return train_tsn(split, run_cfg).generator.freeze()


def hashed_variant(name, generator, data, cfg, **train_kwargs):
    result = train_hash(generator, data.db_patches, data.db_labels, cfg, n_classes=data.n_classes, **train_kwargs)
    db_codes = encode(result.model, result.fusion, generator, data.db_patches)
    q_codes = encode(result.model, result.fusion, generator, data.q_patches)
    return score(name, db_codes, q_codes, data, cfg), result


def lsh_rows(name, db_descriptors, q_descriptors, data, cfg):
    """Origin hyperplanes, sign(<r_i, x>), plus the same planes through the database mean."""
    rows = []
    for variant, offset in ((name, None), (f"{name}[centred]", db_descriptors.mean(axis=0))):
        hasher = lsh_hasher(db_descriptors.shape[1], cfg.code_bits, cfg.hash_seed, offset=offset)
        rows.append(score(variant, lsh_encode(hasher, db_descriptors), lsh_encode(hasher, q_descriptors), data, cfg))
    return rows


# === Presets ===
def run_preset(preset, cfg, data_dir, out_dir, tsn_path=None):
    if preset not in PRESETS:
        raise ValueError(f"unknown ablation preset {preset!r}")
    data = AblationData(data_dir)
    rows = []

    if preset == "tsn-losses":
        for loss_preset in LOSS_PRESETS:
            generator = trained_generator(cfg, data_dir, loss_preset=loss_preset)
            rows.append(hashed_variant(f"tsn[{loss_preset}]", generator, data, cfg)[0])

    elif preset == "no-ca":
        generator = trained_generator(cfg, data_dir, tsn_path)
        rows.append(hashed_variant("with-ca", generator, data, cfg, use_attention=True)[0])
        rows.append(hashed_variant("no-ca", generator, data, cfg, use_attention=False)[0])

    elif preset == "no-augmentation":
        generator = trained_generator(cfg, data_dir, tsn_path)
        rows.append(hashed_variant("augmentation", generator, data, cfg, augmentation=True)[0])
        rows.append(hashed_variant("no-augmentation", generator, data, cfg, augmentation=False)[0])

    elif preset == "lsh-baseline":
        generator = trained_generator(cfg, data_dir, tsn_path)
        row, result = hashed_variant("tsn+hash", generator, data, cfg)
        rows.append(row)
        db = extract_descriptors(generator, result.fusion, data.db_patches)
        q = extract_descriptors(generator, result.fusion, data.q_patches)
        rows.extend(lsh_rows("tsn+lsh", db, q, data, cfg))

    elif preset == "lbp-lsh-baseline":
        db = np.stack([lbp_descriptor(rgb_to_gray(p)) for p in data.db_patches])
        q = np.stack([lbp_descriptor(rgb_to_gray(p)) for p in data.q_patches])
        rows.extend(lsh_rows("lbp+lsh", db, q, data, cfg))

    elif preset == "code-lengths":
        generator = trained_generator(cfg, data_dir, tsn_path)
        for bits in CODE_LENGTHS:
            rows.append(hashed_variant(f"tsn+hash[{bits}]", generator, data, cfg, code_bits=bits)[0])
        emit_curve([(r["code_bits"], r["precision_radius2"]) for r in rows], "code_bits", "precision_radius2",
                   os.path.join(out_dir, "precision_vs_bits"), "Precision (Hamming radius) vs number of bits")

    elif preset == "untrained-tsn":
        generator = trained_generator(cfg, data_dir, tsn_path)
        untrained = build_networks(cfg)[0].freeze()
        rows.append(hashed_variant("trained-tsn", generator, data, cfg)[0])
        rows.append(hashed_variant("untrained-tsn", untrained, data, cfg)[0])

    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def save_results(results, preset, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"ablation_{preset}")
    results.to_parquet(f"{stem}.parquet", index=False, engine="pyarrow")
    results.to_csv(f"{stem}.csv", index=False, lineterminator="\n", float_format="%.10g")
    write_config_echo(cfg, f"{stem}.csv")

    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(results)), 4))
    ax.bar(results["variant"], results["map_at_t"], edgecolor="black", alpha=0.8)
    ax.set_ylim(0, 1)
    ax.set_ylabel(f"MAP@{cfg.top_t}")
    ax.set_title(f"Ablation: {preset}")
    ax.grid(axis="y", alpha=0.75)
    fig.savefig(f"{stem}.png", bbox_inches="tight")
    plt.close(fig)
    return f"{stem}.parquet"


def ablate(preset, cfg, data_dir, out_dir, tsn_path=None):
    results = run_preset(preset, cfg, data_dir, out_dir, tsn_path)
    path = save_results(results, preset, cfg, out_dir)
    print(results.to_string(index=False))
    print(f"✅ Saved ablation {preset} ({len(results)} variants) to {path}")
    return results


def add_arguments(parser):
    add_config_arguments(parser)
    parser.add_argument("--data", required=True, help="dataset directory from gen-data")
    parser.add_argument("--preset", required=True, choices=PRESETS)
    parser.add_argument("--tsn", default=None, help="trained TSNW checkpoint (otherwise Stage 1 is trained here)")
    parser.add_argument("--out", required=True, help="output directory")


def run(args):
    ablate(args.preset, config_from_args(args), args.data, args.out, args.tsn)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["ablate", *sys.argv[1:]]))
