# src/05_build_index.py
#
# Encode every training patch with the trained hash model and store the packed codes as
# the retrieval database.
#
# Output:
#   <out> (TXIX index) and <out>.cfg (config echo of the model it was built with)


import sys

from config import RunConfig, write_config_echo
from hash_learner import encode, load_hash_bundle
from retrieval_index import build_index, save_index
from texture_data import load_patch_set


def build(model_path, data_dir, out_path, progress=True):
    model, fusion, generator, meta = load_hash_bundle(model_path)
    ids, patches, labels, _ = load_patch_set(data_dir, "train", progress=progress)
    codes = encode(model, fusion, generator, patches)
    index = build_index(codes, ids, labels)
    save_index(index, out_path)
    write_config_echo(RunConfig(meta.get("config", {})), out_path)
    print(f"✅ Indexed {len(index)} codes of {index.k} bits to {out_path}")
    return index


def add_arguments(parser):
    parser.add_argument("--model", required=True, help="HSHM model from train-hash")
    parser.add_argument("--data", required=True, help="dataset directory from gen-data")
    parser.add_argument("--out", required=True, help="output TXIX index path")


def run(args):
    build(args.model, args.data, args.out)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["build-index", *sys.argv[1:]]))
