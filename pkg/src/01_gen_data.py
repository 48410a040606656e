# src/01_gen_data.py
#
# This script builds the texture dataset every later stage reads: one base image per
# procedural class (or an existing image folder), the region split, labelled patches and
# the split manifest.
#
# Rationale:
#   Patches are written once to disk so Stage 1, Stage 2, indexing and evaluation all see
#   exactly the same pixels, and the manifest pins which patch belongs to which split.
#
# Key operations:
#   - Render `classes` procedural textures (or load --images <root>/<class>/<index>.ppm)
#   - Split each image: three quadrants train, bottom-right quadrant test
#     (multi-image classes: 70/20/10 train/test/val by image)
#   - Sample train / test (/ val) patches with independent seeded streams
#
# Output:
#   <out>/images/<class>/<index>.ppm      base images
#   <out>/patches/<patch_id>.ppm          K x K patches
#   <out>/manifest.tsv (+ .cfg echo)      patch_id, class, split
#   <out>/class_gallery.png               one thumbnail per class
#
# Notes:
#   - Train patches form the retrieval database; test patches are the queries.


import os
import sys
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from tqdm import tqdm

from config import add_config_arguments, config_from_args, write_config_echo
from texture_data import (
    build_split,
    default_class_specs,
    gen_class_image,
    load_image_folder,
    make_rng,
    patch_path,
    sample_patch_set,
    write_image_folder,
    write_manifest,
    write_ppm,
)

# Independent sampling streams per split
SPLIT_STREAMS = {"train": 1, "test": 2, "val": 3}


# === Base images ===
def load_or_render_images(cfg, image_root=None):
    """Return (class_names, images_by_class)."""
    if image_root is not None:
        class_names, images_by_class = load_image_folder(image_root)
        print(f"📥 Loaded {sum(len(i) for i in images_by_class)} images in {len(class_names)} classes from {image_root}")
        return class_names, images_by_class

    specs = default_class_specs(cfg.classes, cfg.data_seed)
    images_by_class = [[gen_class_image(spec, cfg.image_size)] for spec in tqdm(specs, desc="Rendering classes")]
    return [spec.name for spec in specs], images_by_class


# === Dataset writer ===
def gen_data(cfg, out_dir, image_root=None):
    class_names, images_by_class = load_or_render_images(cfg, image_root)
    write_image_folder(os.path.join(out_dir, "images"), class_names, images_by_class)
    split = build_split(images_by_class, class_names, cfg.train_fraction, cfg.patch_size, cfg.data_seed)

    # --- Sample patches per split ---
    per_class = {"train": cfg.train_patches_per_class, "test": cfg.query_patches_per_class,
                 "val": cfg.query_patches_per_class}
    rows = []
    for split_name in ("train", "test", "val"):
        if not split.regions_for(split_name):
            continue
        patches, labels = sample_patch_set(
            split, cfg.patch_size, per_class[split_name], make_rng(cfg.data_seed, SPLIT_STREAMS[split_name]), split_name
        )
        for patch, label in tqdm(zip(patches, labels), total=len(labels), desc=f"Writing {split_name} patches"):
            patch_id = len(rows)
            write_ppm(patch, patch_path(out_dir, patch_id))
            rows.append((patch_id, class_names[label], split_name))

    manifest_path = os.path.join(out_dir, "manifest.tsv")
    manifest = write_manifest(manifest_path, rows)
    write_config_echo(cfg, manifest_path)
    save_gallery(class_names, images_by_class, os.path.join(out_dir, "class_gallery.png"))

    counts = manifest.groupby("split").size().to_dict()
    print(f"✅ Wrote {len(rows)} patches ({counts}) for {len(class_names)} classes to {out_dir}")
    return manifest


def save_gallery(class_names, images_by_class, path):
    """One thumbnail per class for a quick visual check."""
    n = len(class_names)
    cols = min(n, 4)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, name, images in zip(axes.ravel(), class_names, images_by_class):
        ax.imshow(np.clip(images[0], 0.0, 1.0))
        ax.set_title(name, fontsize=8)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


# === CLI wiring ===
def add_arguments(parser):
    add_config_arguments(parser)
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--images", default=None, help="optional image folder <root>/<class>/<index>.ppm")


def run(args):
    cfg = config_from_args(args)
    gen_data(cfg, args.out, args.images)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["gen-data", *sys.argv[1:]]))
