# src/04_train_hash.py
#
# Stage 2 training: freeze the Stage-1 generator and learn the attention fusion, the
# projection to k bits, and the classifier on binary codes.
#
# Key operations:
#   - Load the train patches (the retrieval database) and the frozen generator
#   - Optionally augment with crops of generated expansions (config: augmentation)
#   - Alternate gradient steps / ridge classifier solve / bitwise code update per epoch
#
# Output:
#   1. <out>                         HSHM model (references the .fusd and TSN checkpoint)
#   2. <out stem>.fusd               fusion + attention parameters
#   3. <out stem>_history.csv        per-epoch losses (+ .cfg echo)
#   4. <out stem>_codes.parquet      codes of the database patches, one column per bit


import os
import sys

from config import add_config_arguments, config_from_args, write_config_echo
from errors import DataError
from hash_learner import encode, export_code_matrix, save_hash_bundle, train_hash
from texture_data import load_patch_set
from tsn import load_generator


def output_paths(model_path):
    stem = os.path.splitext(model_path)[0]
    return f"{stem}_history.csv", f"{stem}_codes.parquet"


def train(cfg, data_dir, tsn_path, out_path, progress=True):
    ids, patches, labels, class_names = load_patch_set(data_dir, "train", progress=progress)
    generator = load_generator(tsn_path)
    if generator.patch_size != patches.shape[1]:
        raise DataError(f"TSN checkpoint expects {generator.patch_size}px patches, dataset has {patches.shape[1]}px")
    print(f"📥 Loaded {len(ids)} training patches in {len(class_names)} classes")

    result = train_hash(generator, patches, labels, cfg, n_classes=len(class_names), progress=progress)
    print(f"ℹ️  Training pool: {len(result.pool_labels)} patches ({int(result.augmented.sum())} augmented)")

    save_hash_bundle(out_path, result.model, result.fusion, tsn_path, cfg)
    history_path, codes_path = output_paths(out_path)
    result.history.to_csv(history_path, index=False, lineterminator="\n", float_format="%.10g")
    write_config_echo(cfg, history_path)
    codes = encode(result.model, result.fusion, generator, patches)
    export_code_matrix(codes, ids, codes_path)

    print(f"✅ Saved {result.model.code_bits}-bit hash model to {out_path}")
    return result


def add_arguments(parser):
    add_config_arguments(parser)
    parser.add_argument("--data", required=True, help="dataset directory from gen-data")
    parser.add_argument("--tsn", required=True, help="Stage-1 TSNW checkpoint")
    parser.add_argument("--out", required=True, help="output HSHM model path")


def run(args):
    train(config_from_args(args), args.data, args.tsn, args.out)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["train-hash", *sys.argv[1:]]))
