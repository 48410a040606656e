# src/02_train_tsn.py
#
# Stage 1 training: teach the generator to expand K x K patches into 2K x 2K textures.
#
# Key operations:
#   - Rebuild the region split from <data>/images with the run config's split settings
#   - Alternate discriminator / generator Adam steps on (input, ground truth) pairs
#   - Save the TSNW checkpoint, the per-step loss history and a loss plot
#
# Output:
#   1. <out>                       TSNW checkpoint (config echo embedded)
#   2. <out stem>_losses.csv       step,adv,style,l1,total (+ .cfg echo)
#   3. <out stem>_losses.png       loss curves
#
# Notes:
#   - Divergence (any NaN loss) aborts with exit code 4 and the last finite losses.


import os
import sys
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from config import add_config_arguments, config_from_args, write_config_echo
from texture_data import load_dataset_split
from tsn import save_tsn, train_tsn, write_loss_history


def history_paths(checkpoint_path):
    stem = os.path.splitext(checkpoint_path)[0]
    return f"{stem}_losses.csv", f"{stem}_losses.png"


def plot_losses(history, path):
    fig, ax = plt.subplots(figsize=(8, 5))
    for column in ("adv", "style", "l1", "total"):
        if history[column].abs().sum() > 0:
            ax.plot(history["step"], history[column], label=column, linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Stage-1 losses")
    ax.legend(loc="best")
    ax.grid(alpha=0.5)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def train(cfg, data_dir, out_path, progress=True):
    split = load_dataset_split(data_dir, cfg.train_fraction, cfg.patch_size, cfg.data_seed)
    print(f"📥 Loaded {len(split.images)} images / {split.n_classes} classes from {data_dir}")
    result = train_tsn(split, cfg, progress=progress)

    save_tsn(out_path, result.generator, result.discriminator, cfg)
    csv_path, png_path = history_paths(out_path)
    write_loss_history(result.history, csv_path)
    write_config_echo(cfg, csv_path)
    plot_losses(result.history, png_path)

    last = result.history.iloc[-1] if len(result.history) else None
    summary = f" final l1={last['l1']:.4f} total={last['total']:.4f}" if last is not None else ""
    print(f"✅ Saved Stage-1 checkpoint to {out_path}{summary}")
    return result


def add_arguments(parser):
    add_config_arguments(parser)
    parser.add_argument("--data", required=True, help="dataset directory from gen-data")
    parser.add_argument("--out", required=True, help="output TSNW checkpoint path")


def run(args):
    train(config_from_args(args), args.data, args.out)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["train-tsn", *sys.argv[1:]]))
