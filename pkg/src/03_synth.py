# src/03_synth.py
#
# Expand a single K x K patch into a 2K x 2K texture with a trained generator, for visual
# inspection of Stage 1.
#
# Output:
#   <out>.ppm and <out>.ppm.cfg (config echo of the checkpoint used)


import sys

from config import RunConfig, write_config_echo
from errors import DataError
from texture_data import as_rgb, read_ppm, to_nhwc, write_ppm
from tsn import generate, load_tsn


def synth(checkpoint_path, patch_path, out_path):
    generator, _, meta = load_tsn(checkpoint_path)
    generator.freeze()
    patch = as_rgb(read_ppm(patch_path))
    k = generator.patch_size
    if patch.shape[:2] != (k, k):
        raise DataError(f"{patch_path}: patch is {patch.shape[0]}x{patch.shape[1]}, checkpoint expects {k}x{k}")

    output, _ = generate(generator, patch)
    write_ppm(to_nhwc(output.data)[0], out_path)
    write_config_echo(RunConfig(meta.get("config", {})), out_path)
    print(f"✅ Expanded {k}x{k} patch to {2 * k}x{2 * k}: {out_path}")
    return out_path


def add_arguments(parser):
    parser.add_argument("--checkpoint", required=True, help="TSNW checkpoint")
    parser.add_argument("--patch", required=True, help="input K x K PPM")
    parser.add_argument("--out", required=True, help="output 2K x 2K PPM")


def run(args):
    synth(args.checkpoint, args.patch, args.out)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["synth", *sys.argv[1:]]))
