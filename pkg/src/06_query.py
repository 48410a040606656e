# src/06_query.py
#
# Rank index items for one query patch, either the top-T nearest codes or every code
# within a Hamming radius. Prints one tab-separated row per hit: rank, id, label, distance.


import sys

from errors import DataError
from hash_learner import encode, load_hash_bundle
from retrieval_index import load_index, pack, query_radius, query_topk
from texture_data import as_rgb, read_ppm


def query(index_path, model_path, patch_path, top=None, radius=None):
    model, fusion, generator, _ = load_hash_bundle(model_path)
    index = load_index(index_path)
    if index.k != model.code_bits:
        raise DataError(f"index holds {index.k}-bit codes but the model emits {model.code_bits} bits")
    patch = as_rgb(read_ppm(patch_path))
    if patch.shape[:2] != (generator.patch_size, generator.patch_size):
        raise DataError(f"{patch_path}: expected a {generator.patch_size}x{generator.patch_size} patch, got {patch.shape[:2]}")

    code = pack(encode(model, fusion, generator, patch[None])[0])
    if radius is not None:
        label_of = dict(zip(index.ids.tolist(), index.labels.tolist()))
        hits = [(item_id, label_of[item_id], d) for item_id, d in query_radius(index, code, radius)]
    else:
        hits = [(item_id, label, d) for item_id, d, label in query_topk(index, code, top)]

    print("rank\tid\tlabel\tdistance")
    for rank, (item_id, label, distance) in enumerate(hits, start=1):
        print(f"{rank}\t{item_id}\t{label}\t{distance}")
    return hits


def add_arguments(parser):
    parser.add_argument("--index", required=True, help="TXIX index")
    parser.add_argument("--model", required=True, help="HSHM model used to build the index")
    parser.add_argument("--patch", required=True, help="query K x K PPM")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--top", type=int, default=10, help="number of nearest codes (default 10)")
    group.add_argument("--radius", type=int, default=None, help="return every code within this Hamming radius")


def run(args):
    query(args.index, args.model, args.patch, top=args.top, radius=args.radius)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["query", *sys.argv[1:]]))
