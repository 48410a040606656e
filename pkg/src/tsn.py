# src/tsn.py
#
# Stage 1: the texture synthesis network. A K x K patch goes into an encoder-decoder
# generator that paints a 2K x 2K expansion; a small fully convolutional discriminator
# judges expansions against real 2K x 2K crops.
#
# Key operations:
#   - GeneratorNet: stem conv at K, strided convs down to 2x2, bottleneck, deconvs up to 2K.
#     Every intermediate activation is kept (act_enc[M], act_dec[M]) for the Stage-2 fusion
#   - DiscriminatorNet: four strided conv blocks to a 1-channel score map
#   - StyleExtractor: frozen, seeded random conv stack whose five taps feed a Gram-matrix loss
#   - Losses: adversarial (cross-entropy on logits), style, L1, weighted total
#   - train_tsn: alternating D/G Adam updates with a per-step loss history
#   - TSNW checkpoint save/load
#
# Notes:
#   - Loss presets without "adv" skip the discriminator entirely; presets without "style"
#     never build the StyleExtractor.
#   - Generator output is tanh rescaled to [0, 1].


import math
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from tqdm import tqdm

import autodiff as ad
from autodiff import Tensor, Tape
from checkpoint import load_blobs, save_blobs
from config import LOSS_PRESETS, STYLE_TAP_WEIGHTS
from errors import CheckpointFormatError, ConfigError, DataError, NumericError
from texture_data import make_rng, sample_stage1_pair, to_nchw, to_nhwc

TSN_MAGIC = "TSNW"
HISTORY_COLUMNS = ["step", "adv", "style", "l1", "total"]


def _is_power_of_two(n):
    return n >= 1 and not n & (n - 1)


# === Parameter container shared by every network ===
class ParamNet:
    """Named parameter tensors with state_dict round-tripping."""

    def __init__(self):
        self.params = {}

    def _conv_param(self, name, shape, rng, std, bias=True, trainable=True):
        self.params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=trainable)
        if bias:
            out_channels = shape[1] if name.startswith("dec.") else shape[0]
            self.params[f"{name}.b"] = Tensor(np.zeros(out_channels), requires_grad=trainable)

    def parameters(self):
        return [self.params[name] for name in sorted(self.params)]

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, arrays):
        missing = sorted(set(self.params) - set(arrays))
        unexpected = sorted(set(arrays) - set(self.params))
        if missing or unexpected:
            raise CheckpointFormatError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
        for name, tensor in self.params.items():
            if arrays[name].shape != tensor.data.shape:
                raise CheckpointFormatError(
                    f"parameter {name}: stored shape {arrays[name].shape} != built shape {tensor.data.shape}"
                )
            tensor.data = np.array(arrays[name], dtype=np.float64)

    def freeze(self):
        for tensor in self.params.values():
            tensor.requires_grad = False
            tensor.grad = None
        return self


# === Generator ===
class GeneratorNet(ParamNet):
    """
    Encoder-decoder expanding K x K patches to 2K x 2K.
    enc_sizes: K, K/2, ..., 2   dec_sizes: 2, 4, ..., 2K
    """

    def __init__(self, patch_size, base_width=8, rng=None, init_std=0.02):
        super().__init__()
        if patch_size < 4 or not _is_power_of_two(patch_size):
            raise ConfigError(f"patch_size must be a power of two >= 4, got {patch_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.patch_size = patch_size
        self.base_width = base_width
        n_enc = int(math.log2(patch_size))
        self.enc_sizes = [patch_size >> i for i in range(n_enc)]
        self.dec_sizes = [2 << i for i in range(n_enc + 1)]
        self.enc_widths = {m: min(base_width * 2 ** i, 8 * base_width) for i, m in enumerate(self.enc_sizes)}
        self.dec_widths = {m: self.enc_widths.get(m, base_width) for m in self.dec_sizes}

        self._conv_param(f"enc.{patch_size}", (self.enc_widths[patch_size], 3, 3, 3), rng, init_std)
        for prev, m in zip(self.enc_sizes, self.enc_sizes[1:]):
            self._conv_param(f"enc.{m}", (self.enc_widths[m], self.enc_widths[prev], 3, 3), rng, init_std)
        self._conv_param("bottleneck", (self.enc_widths[2], self.enc_widths[2], 3, 3), rng, init_std)
        for prev, m in zip(self.dec_sizes, self.dec_sizes[1:]):
            self._conv_param(f"dec.{m}", (self.dec_widths[prev], self.dec_widths[m], 4, 4), rng, init_std)
        self._conv_param("out", (3, base_width, 3, 3), rng, init_std)

    def forward(self, x):
        """x: Tensor [N, 3, K, K] in [0, 1] -> (Tensor [N, 3, 2K, 2K], {"enc": {M: T}, "dec": {M: T}})."""
        if x.shape[1:] != (3, self.patch_size, self.patch_size):
            raise DataError(
                f"generator built for 3x{self.patch_size}x{self.patch_size} patches, got input shape {x.shape}"
            )
        p = self.params
        enc, dec = {}, {}
        k = self.patch_size
        h = ad.relu(ad.conv2d(ad.affine(x, 1.0, -0.5), p[f"enc.{k}.w"], p[f"enc.{k}.b"], stride=1, padding=1))
        enc[k] = h
        for m in self.enc_sizes[1:]:
            h = ad.relu(ad.conv2d(h, p[f"enc.{m}.w"], p[f"enc.{m}.b"], stride=2, padding=1))
            enc[m] = h
        h = ad.relu(ad.conv2d(h, p["bottleneck.w"], p["bottleneck.b"], stride=1, padding=1))
        dec[2] = h
        for m in self.dec_sizes[1:]:
            h = ad.relu(ad.deconv2d(h, p[f"dec.{m}.w"], p[f"dec.{m}.b"], stride=2, padding=1))
            dec[m] = h
        out = ad.affine(ad.tanh(ad.conv2d(h, p["out.w"], p["out.b"], stride=1, padding=1)), 0.5, 0.5)
        return out, {"enc": enc, "dec": dec}


def generate(g, patch):
    """Expand one K x K x 3 patch (array) or an NCHW Tensor batch; returns (output, activation table)."""
    if isinstance(patch, Tensor):
        return g.forward(patch)
    patch = np.asarray(patch, dtype=np.float64)
    if patch.min() < 0.0 or patch.max() > 1.0:
        raise DataError("patch values must lie in [0, 1]")
    return g.forward(Tensor(to_nchw(patch)))


def expand_patches(g, patches, batch_size=16):
    """[N, K, K, 3] patches -> [N, 2K, 2K, 3] expansions (no tape)."""
    patches = np.asarray(patches, dtype=np.float64)
    outputs = []
    for start in range(0, len(patches), batch_size):
        out, _ = g.forward(Tensor(to_nchw(patches[start : start + batch_size])))
        outputs.append(to_nhwc(out.data))
    return np.concatenate(outputs) if outputs else np.empty((0, 2 * g.patch_size, 2 * g.patch_size, 3))


# === Discriminator ===
class DiscriminatorNet(ParamNet):
    def __init__(self, disc_width=8, rng=None, init_std=0.02):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [3, disc_width, 2 * disc_width, 4 * disc_width, 1]
        self.n_blocks = len(widths) - 1
        for i in range(self.n_blocks):
            self._conv_param(f"block{i}", (widths[i + 1], widths[i], 4, 4), rng, init_std)

    def forward(self, image):
        """image Tensor [N, 3, S, S] -> logits [N, 1, S/16, S/16]."""
        h = ad.affine(image, 1.0, -0.5)
        for i in range(self.n_blocks):
            h = ad.conv2d(h, self.params[f"block{i}.w"], self.params[f"block{i}.b"], stride=2, padding=1)
            if i < self.n_blocks - 1:
                h = ad.leaky_relu(h, 0.2)
        return h


# === Style extractor ===
class StyleExtractor(ParamNet):
    """Frozen random conv stack (He-normal, seeded). Five taps, shallow to deep."""

    def __init__(self, style_width=8, seed=0, tap_weights=STYLE_TAP_WEIGHTS):
        super().__init__()
        rng = np.random.default_rng(seed)
        widths = [3, style_width, 2 * style_width, 4 * style_width, 8 * style_width, 8 * style_width]
        self.tap_weights = tuple(tap_weights)
        if len(self.tap_weights) != len(widths) - 1:
            raise ConfigError(f"expected {len(widths) - 1} style tap weights, got {len(self.tap_weights)}")
        for i in range(len(widths) - 1):
            fan_in = widths[i] * 9
            self._conv_param(f"tap{i}", (widths[i + 1], widths[i], 3, 3), rng, math.sqrt(2.0 / fan_in),
                             bias=False, trainable=False)

    def taps(self, image):
        h, taps = image, []
        for i in range(len(self.tap_weights)):
            h = ad.relu(ad.conv2d(h, self.params[f"tap{i}.w"], stride=1 if i == 0 else 2, padding=1))
            taps.append(h)
        return taps


# === Losses ===
@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 100.0
    gamma2: float = 1.0
    tap_weights: tuple = field(default=STYLE_TAP_WEIGHTS)

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0 or any(w < 0 for w in self.tap_weights):
            raise ConfigError("loss weights must be >= 0")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def adversarial_loss(d_real_scores, d_fake_scores, side):
    """Non-saturating cross-entropy on logits. side: "discriminator" or "generator"."""
    fake = _as_tensor(d_fake_scores)
    if side == "generator":
        return ad.mean(ad.softplus(ad.scale(fake, -1.0)))
    if side == "discriminator":
        real = _as_tensor(d_real_scores)
        return ad.add(ad.mean(ad.softplus(ad.scale(real, -1.0))), ad.mean(ad.softplus(fake)))
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def style_loss(generated, ground_truth, extractor, tap_weights=None):
    """Sum over taps of w_t * mean squared Gram-matrix difference."""
    generated, ground_truth = _as_tensor(generated), _as_tensor(ground_truth)
    if generated.shape != ground_truth.shape:
        raise DataError(f"style_loss: shape mismatch {generated.shape} vs {ground_truth.shape}")
    weights = extractor.tap_weights if tap_weights is None else tap_weights
    total = None
    for w, tap_a, tap_b in zip(weights, extractor.taps(generated), extractor.taps(ground_truth)):
        diff = ad.sub(ad.gram_matrix(tap_a), ad.gram_matrix(tap_b))
        term = ad.scale(ad.mean(ad.mul(diff, diff)), w)
        total = term if total is None else ad.add(total, term)
    return total


def l1_loss(generated, ground_truth):
    return ad.l1_distance(_as_tensor(generated), _as_tensor(ground_truth))


def total_loss(adv, style, l1, weights):
    """adv + gamma1 * style + gamma2 * l1; None components count as absent."""
    terms = [(adv, 1.0), (style, weights.gamma1), (l1, weights.gamma2)]
    if not any(isinstance(term, Tensor) for term, _ in terms):
        return math.fsum(coef * float(term) for term, coef in terms if term is not None)
    total = None
    for term, coef in terms:
        if term is None:
            continue
        piece = ad.scale(_as_tensor(term), coef)
        total = piece if total is None else ad.add(total, piece)
    return total


# === Stage-1 training ===
@dataclass
class TsnResult:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    history: pd.DataFrame


def build_networks(cfg):
    """Seeded generator + discriminator (or None when the preset has no adversarial term)."""
    rng = make_rng(cfg.tsn_seed, 0)
    generator = GeneratorNet(cfg.patch_size, cfg.base_width, rng, cfg.init_std)
    discriminator = None
    if "adv" in LOSS_PRESETS[cfg.loss_preset]:
        discriminator = DiscriminatorNet(cfg.disc_width, rng, cfg.init_std)
    return generator, discriminator


def _sample_batch(split, cfg, rng):
    pairs = [sample_stage1_pair(split, cfg.patch_size, rng) for _ in range(cfg.tsn_batch_size)]
    x = Tensor(to_nchw(np.stack([p.input for p in pairs])))
    gt = Tensor(to_nchw(np.stack([p.ground_truth for p in pairs])))
    return x, gt


def train_tsn(split, cfg, progress=True):
    """Alternating discriminator/generator Adam steps; deterministic for a fixed tsn_seed."""
    losses = LOSS_PRESETS[cfg.loss_preset]
    weights = LossWeights(cfg.gamma1, cfg.gamma2)
    generator, discriminator = build_networks(cfg)
    extractor = StyleExtractor(cfg.style_width, seed=cfg.tsn_seed) if "style" in losses else None
    opt_g = ad.Adam(generator.parameters(), lr=cfg.tsn_lr, beta1=cfg.adam_beta1)
    opt_d = ad.Adam(discriminator.parameters(), lr=cfg.tsn_lr, beta1=cfg.adam_beta1) if discriminator else None
    sample_rng = make_rng(cfg.tsn_seed, 1)

    rows, last_finite = [], {}
    bar = tqdm(range(cfg.tsn_steps), desc=f"Training TSN ({cfg.loss_preset})", disable=not progress)
    for step in bar:
        x, gt = _sample_batch(split, cfg, sample_rng)

        # --- D-step on a tape-free generator pass ---
        if discriminator is not None:
            fake, _ = generator.forward(x)
            opt_d.zero_grad()
            with Tape():
                d_loss = adversarial_loss(discriminator.forward(gt), discriminator.forward(ad.detach(fake)),
                                          "discriminator")
                ad.backward(d_loss)
            if not np.isfinite(d_loss.data):
                raise NumericError(
                    f"Stage-1 training diverged at step {step}: discriminator loss is not finite "
                    f"(last finite losses: {last_finite})",
                    step=step, last_finite=last_finite,
                )
            opt_d.step()

        # --- G-step ---
        opt_g.zero_grad()
        with Tape():
            out, _ = generator.forward(x)
            l1 = l1_loss(out, gt)
            adv = adversarial_loss(None, discriminator.forward(out), "generator") if discriminator else None
            style = style_loss(out, gt, extractor) if extractor else None
            total = total_loss(adv, style, l1 if "l1" in losses else None, weights)
            ad.backward(total)

        record = {
            "adv": float(adv.data) if adv is not None else 0.0,
            "style": float(style.data) if style is not None else 0.0,
            "l1": float(l1.data),
            "total": float(total.data),
        }
        if not all(np.isfinite(v) for v in record.values()):
            raise NumericError(
                f"Stage-1 training diverged at step {step}: losses {record} "
                f"(last finite losses: {last_finite})",
                step=step, last_finite=last_finite,
            )
        opt_g.step()
        last_finite = dict(record, step=step)
        rows.append({"step": step, **record})
        if progress and step % 50 == 0:
            bar.set_postfix(l1=f"{record['l1']:.4f}", total=f"{record['total']:.4f}")

    if discriminator is not None:
        opt_d.zero_grad()
    opt_g.zero_grad()
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TsnResult(generator=generator, discriminator=discriminator, history=history)


def write_loss_history(history, path):
    history.to_csv(path, index=False, columns=HISTORY_COLUMNS, lineterminator="\n", float_format="%.10g")


# === TSNW checkpoint ===
def save_tsn(path, generator, discriminator, cfg):
    meta = {
        "kind": "tsn",
        "patch_size": generator.patch_size,
        "base_width": generator.base_width,
        "disc_width": cfg.disc_width,
        "has_discriminator": discriminator is not None,
        "config": cfg.as_dict(),
    }
    params = generator.state_dict()
    if discriminator is not None:
        params.update({f"disc.{name}": value for name, value in discriminator.state_dict().items()})
    save_blobs(path, TSN_MAGIC, meta, params)


def load_tsn(path):
    """Return (generator, discriminator or None, meta) from a TSNW checkpoint."""
    meta, params = load_blobs(path, TSN_MAGIC)
    try:
        generator = GeneratorNet(int(meta["patch_size"]), int(meta["base_width"]))
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: config echo lacks {exc}") from None
    generator.load_state_dict({n: v for n, v in params.items() if not n.startswith("disc.")})
    discriminator = None
    if meta.get("has_discriminator"):
        discriminator = DiscriminatorNet(int(meta["disc_width"]))
        discriminator.load_state_dict({n[len("disc."):]: v for n, v in params.items() if n.startswith("disc.")})
    return generator, discriminator, meta


def load_generator(path):
    """Frozen generator for Stage 2 / synthesis."""
    generator, _, _ = load_tsn(path)
    return generator.freeze()
