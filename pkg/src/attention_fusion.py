# src/attention_fusion.py
#
# Stage-2 feature extractor head: channel-wise attention over the generator's paired
# encoder/decoder activations, then a progressive strided cascade that folds every scale
# into one d-dimensional descriptor.
#
# Key operations:
#   - fuse_pair: depth-concatenate act_enc[M] and act_dec[M] (decoder only at M = 2K)
#   - channel_attention: q = global average pool, A = softmax(W q + b), scale channels by A
#   - progressive_combine: CA^{2K} -> strided conv -> (+ 1x1 conv of CA^{K}) -> strided conv
#     ... down to 1x1, flattened to the descriptor
#   - FusionPipeline: per-size CA / 1x1 / strided parameters, FUSD checkpoint
#
# Notes:
#   - One CA module per spatial size, never shared across sizes.
#   - Fusion convs carry no bias: all-zero activations give an all-zero descriptor.
#   - Generator activations are detached before fusion, so no gradient reaches the
#     frozen generator.


from dataclasses import dataclass
import math
import numpy as np

import autodiff as ad
from autodiff import Tensor
from checkpoint import load_blobs, save_blobs
from errors import CheckpointFormatError, DataError
from texture_data import to_nchw
from tsn import ParamNet

FUSION_MAGIC = "FUSD"


@dataclass
class CaParams:
    weight: Tensor  # (C, C)
    bias: Tensor  # (C,)

    @property
    def channels(self):
        return self.bias.shape[0]


# === Pairing and attention ===
def fuse_pair(act_enc, act_dec):
    """Depth-wise concat [enc, dec]; with no encoder activation the decoder passes through alone."""
    if act_enc is None:
        return act_dec
    if act_enc.shape[0] != act_dec.shape[0] or act_enc.shape[2:] != act_dec.shape[2:]:
        raise DataError(f"fuse_pair: encoder {act_enc.shape} and decoder {act_dec.shape} differ in size")
    return ad.channel_concat([act_enc, act_dec])


def attention_weights(x, p):
    """A = softmax(W q + b) with q the channel means of x; shape [N, C]."""
    channels = x.shape[1]
    if p.channels != channels:
        raise DataError(f"channel_attention: input has {channels} channels but CA params expect {p.channels}")
    return ad.softmax(ad.fully_connected(ad.global_avg_pool(x), p.weight, p.bias))


def channel_attention(x, p):
    return ad.channel_scale(x, attention_weights(x, p))


# === Progressive combination ===
class FusionPipeline(ParamNet):
    """
    Parameters for sizes 2K, K, ..., 2:
      ca.{M}.w / ca.{M}.b     attention on the fused pair at M
      proj.{M}.w              1x1 conv halving depth (absent at 2K)
      down.{M}.w              3x3 stride-2 conv taking the cascade from M to M/2
    """

    def __init__(self, patch_size, enc_widths, dec_widths, rng=None, use_attention=True, descriptor_dim=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.patch_size = int(patch_size)
        self.enc_widths = {int(m): int(w) for m, w in enc_widths.items()}
        self.dec_widths = {int(m): int(w) for m, w in dec_widths.items()}
        self.use_attention = bool(use_attention)
        top = 2 * self.patch_size
        self.sizes = [top >> i for i in range(int(math.log2(top)))]  # 2K, K, ..., 2
        self.descriptor_dim = int(descriptor_dim or self.enc_widths[2])
        self.visits = {m: 0 for m in self.sizes}

        self.fused_depth = {m: self.dec_widths[m] + (self.enc_widths[m] if m != top else 0) for m in self.sizes}
        cascade_in = self.fused_depth[top]
        for m in self.sizes:
            c = self.fused_depth[m]
            if self.use_attention:
                self.params[f"ca.{m}.w"] = Tensor(rng.normal(0.0, 0.02, size=(c, c)), requires_grad=True)
                self.params[f"ca.{m}.b"] = Tensor(np.zeros(c), requires_grad=True)
            if m != top:
                half = c // 2
                self._conv_param(f"proj.{m}", (half, c, 1, 1), rng, math.sqrt(1.0 / c), bias=False)
                cascade_in += half
            out = self.descriptor_dim if m == 2 else self.enc_widths[m // 2]
            self._conv_param(f"down.{m}", (out, cascade_in, 3, 3), rng, math.sqrt(1.0 / (9 * cascade_in)), bias=False)
            cascade_in = out

    @classmethod
    def build(cls, generator, seed, use_attention=True, descriptor_dim=None):
        return cls(generator.patch_size, generator.enc_widths, generator.dec_widths,
                   np.random.default_rng(seed), use_attention, descriptor_dim)

    def ca_params(self, size):
        if not self.use_attention:
            return None
        return CaParams(self.params[f"ca.{size}.w"], self.params[f"ca.{size}.b"])

    def attend(self, size, fused):
        """CA^M; identity when attention is disabled."""
        return channel_attention(fused, self.ca_params(size)) if self.use_attention else fused

    def forward(self, table):
        """Activation table -> descriptor Tensor [N, d]."""
        top = self.sizes[0]
        ca_outputs = {}
        for m in self.sizes:
            if m not in table["dec"]:
                raise DataError(f"activation table lacks decoder activation at size {m}")
            enc = None if m == top else table["enc"].get(m)
            if m != top and enc is None:
                raise DataError(f"activation table lacks encoder activation at size {m}")
            fused = fuse_pair(_frozen(enc), _frozen(table["dec"][m]))
            ca_outputs[m] = self.attend(m, fused)
        return progressive_combine(ca_outputs, self)

    def describe(self):
        return {
            "patch_size": self.patch_size,
            "enc_widths": {str(m): w for m, w in sorted(self.enc_widths.items())},
            "dec_widths": {str(m): w for m, w in sorted(self.dec_widths.items())},
            "use_attention": self.use_attention,
            "descriptor_dim": self.descriptor_dim,
        }


def _frozen(t):
    return None if t is None else ad.detach(t)


def progressive_combine(ca_outputs, fp):
    """Cascade CA^{2K}..CA^{2} into [N, d]; every size is consumed exactly once."""
    for m in fp.sizes:
        if m not in ca_outputs:
            raise DataError(f"progressive_combine: missing CA output for size {m}")
    fp.visits = {m: 0 for m in fp.sizes}
    top = fp.sizes[0]
    h = None
    for m in fp.sizes:
        ca = ca_outputs[m]
        fp.visits[m] += 1
        if ca.shape[1] != fp.fused_depth[m] or ca.shape[2] != m:
            raise DataError(
                f"progressive_combine: CA output at size {m} has shape {ca.shape}, "
                f"expected depth {fp.fused_depth[m]} at {m}x{m}"
            )
        if m == top:
            stage_in = ca
        else:
            if h.shape[2] != m:
                raise DataError(f"progressive_combine: cascade reached {h.shape[2]}x{h.shape[3]} at size {m}")
            stage_in = ad.channel_concat([h, ad.conv2d(ca, fp.params[f"proj.{m}.w"])])
        h = ad.conv2d(stage_in, fp.params[f"down.{m}.w"], stride=2, padding=1)
        if m != 2:
            h = ad.leaky_relu(h, 0.2)
    return ad.reshape(h, (h.shape[0], fp.descriptor_dim))


# === Descriptor extraction ===
def extract_descriptor(generator, fusion, patch):
    """Frozen generator -> fused pairs -> CA -> cascade. Accepts K x K x 3 arrays or NCHW Tensors."""
    x = patch if isinstance(patch, Tensor) else Tensor(to_nchw(patch))
    _, table = generator.forward(x)
    return fusion.forward(table)


def extract_descriptors(generator, fusion, patches, batch_size=32):
    """[N, K, K, 3] -> [N, d] float64 (no tape)."""
    patches = np.asarray(patches, dtype=np.float64)
    chunks = [
        extract_descriptor(generator, fusion, Tensor(to_nchw(patches[i : i + batch_size]))).data
        for i in range(0, len(patches), batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.empty((0, fusion.descriptor_dim))


# === FUSD checkpoint ===
def save_fusion(path, fusion, extra_meta=None):
    meta = dict(fusion.describe(), kind="fusion", **(extra_meta or {}))
    save_blobs(path, FUSION_MAGIC, meta, fusion.state_dict())


def load_fusion(path):
    meta, params = load_blobs(path, FUSION_MAGIC)
    try:
        fusion = FusionPipeline(
            meta["patch_size"], meta["enc_widths"], meta["dec_widths"],
            use_attention=meta["use_attention"], descriptor_dim=meta["descriptor_dim"],
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: config echo lacks {exc}") from None
    fusion.load_state_dict(params)
    return fusion
