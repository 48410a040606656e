# src/07_evaluate.py
#
# Score the held-out query patches against the index.
#
# Key operations:
#   - Encode test patches with the model the index was built from
#   - MAP@T, precision@T grid, precision within the Hamming radius, PR curve, latency
#
# Output:
#   1. <out>                  JSON-lines report: config records, metrics, curve points
#   2. <out stem>.timing.json mean seconds per query (kept apart so reports stay byte-stable)
#   3. <out dir>/pr_curve.{csv,svg}, precision_at_t.{csv,svg}
#
# Notes:
#   - Eval keys (top_t, radius, precision_t_grid, timing_repetitions) may be overridden with
#     --config / --set; everything else is echoed from the model's training config.


import os
import sys

from config import add_config_arguments, config_from_args
from errors import DataError
from eval_harness import emit_plots, evaluate, write_report_jsonl, write_timing
from hash_learner import encode, load_hash_bundle
from retrieval_index import load_index
from texture_data import load_patch_set


def run_evaluation(index_path, model_path, data_dir, out_path, cfg=None, args=None, progress=True):
    model, fusion, generator, meta = load_hash_bundle(model_path)
    if cfg is None:
        cfg = config_from_args(args, base=meta.get("config", {}))
    index = load_index(index_path)
    if index.k != model.code_bits:
        raise DataError(f"index holds {index.k}-bit codes but the model emits {model.code_bits} bits")

    ids, patches, labels, _ = load_patch_set(data_dir, "test", progress=progress)
    codes = encode(model, fusion, generator, patches)
    report = evaluate(
        index, codes, labels, cfg.top_t, cfg.radius, cfg.precision_t_grid, cfg.timing_repetitions,
        config=cfg.as_dict(), query_ids=ids, progress=progress,
    )
    write_report_jsonl(report, out_path)
    write_timing(report, f"{os.path.splitext(out_path)[0]}.timing.json")
    emit_plots(report, os.path.dirname(os.path.abspath(out_path)))

    print(f"✅ MAP@{report.top_t} = {report.map_at_t:.4f}, precision(r<={report.radius}) = "
          f"{report.precision_radius:.4f} over {report.n_queries} queries -> {out_path}")
    return report


def add_arguments(parser):
    add_config_arguments(parser)
    parser.add_argument("--index", required=True, help="TXIX index")
    parser.add_argument("--model", required=True, help="HSHM model")
    parser.add_argument("--data", required=True, help="dataset directory (test split = queries)")
    parser.add_argument("--out", required=True, help="output report (.jsonl)")


def run(args):
    run_evaluation(args.index, args.model, args.data, args.out, args=args)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["evaluate", *sys.argv[1:]]))
