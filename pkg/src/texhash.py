# src/texhash.py
#
# Single entry point for the whole pipeline. Each subcommand lives in its numbered stage
# script; this module only builds the parser, dispatches, and turns failures into exit codes.
#
# Usage:
#   python src/texhash.py gen-data --config configs/desk.cfg --out runs/data
#   python src/texhash.py train-tsn --config configs/desk.cfg --data runs/data --out runs/tsn.tsnw
#   python src/texhash.py synth --checkpoint runs/tsn.tsnw --patch p.ppm --out big.ppm
#   python src/texhash.py train-hash --config configs/desk.cfg --data runs/data --tsn runs/tsn.tsnw --out runs/hash.hshm
#   python src/texhash.py build-index --model runs/hash.hshm --data runs/data --out runs/db.txix
#   python src/texhash.py query --index runs/db.txix --model runs/hash.hshm --patch p.ppm --top 10
#   python src/texhash.py evaluate --index runs/db.txix --model runs/hash.hshm --data runs/data --out runs/report.jsonl
#   python src/texhash.py ablate --config configs/desk.cfg --data runs/data --preset no-ca --out runs/ablations
#   python src/texhash.py export-workbook --results runs --out runs/results.xlsx
#
# Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure, 5 I/O.
# Errors print one stderr line: `error code=<CODE> exit=<n>: <message>`.


import argparse
import importlib
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import DataError, StorageError, TexhashError  # noqa: E402

# subcommand -> (stage module, help)
COMMANDS = {
    "gen-data": ("01_gen_data", "generate the procedural texture dataset and split manifest"),
    "train-tsn": ("02_train_tsn", "Stage 1: train the texture synthesis network"),
    "synth": ("03_synth", "expand one K x K patch to 2K x 2K with a trained generator"),
    "train-hash": ("04_train_hash", "Stage 2: train fusion, attention and hash layers"),
    "build-index": ("05_build_index", "encode the training patches into a binary code index"),
    "query": ("06_query", "rank index items for one query patch"),
    "evaluate": ("07_evaluate", "MAP, precision and PR metrics for the held-out queries"),
    "ablate": ("08_ablate", "run one comparison grid at desk scale"),
    "export-workbook": ("99_export_results_workbook", "collect result tables into one Excel workbook"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="texhash", description="Texture-synthesis guided deep hashing pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (module_name, help_text) in COMMANDS.items():
        stage = importlib.import_module(module_name)
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        stage.add_arguments(sub)
        sub.set_defaults(stage=stage)
    return parser


def report_error(exc):
    if isinstance(exc, TexhashError):
        code, exit_code = exc.code, exc.exit_code
    elif isinstance(exc, ValueError):
        # shape checks inside library ops
        code, exit_code = DataError.code, DataError.exit_code
    else:
        code, exit_code = StorageError.code, StorageError.exit_code
    message = " ".join(str(exc).split())
    print(f"error code={code} exit={exit_code}: {message}", file=sys.stderr)
    return exit_code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.stage.run(args)
    except (TexhashError, OSError, ValueError) as exc:
        return report_error(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
