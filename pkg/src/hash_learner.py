# src/hash_learner.py
#
# Stage 2: map fused descriptors to k-bit codes.
#
# Rationale:
# The hashing loss combines a pairwise likelihood on continuous codes (similar pairs pulled
# together, dissimilar pairs pushed apart in Hamming space) with a linear classifier fitted
# on the binary codes. Training alternates three steps per epoch:
#   (a) Adam on the projection + fusion/attention parameters against the pairwise loss and a
#       quadratic penalty tying continuous codes to the current binary codes,
#   (b) closed-form ridge solve for the classifier W,
#   (c) one cyclic bit-row sweep over the binary codes B.
#
# Key operations:
#   - hamming_from_inner, pairwise_loss, classification_loss, solve_classifier, update_codes
#   - train_hash with optional augmentation from generator expansions
#   - Random-hyperplane LSH baseline
#   - HSHM checkpoint (fusion and TSN checkpoints referenced by path) and parquet code export
#
# Notes:
#   - sign(0) is +1 everywhere.
#   - Code matrices are k x N in the math below and N x k when handed to the index.


import math
import os
from dataclasses import dataclass
import numpy as np
import pandas as pd
from tqdm import tqdm

import autodiff as ad
from autodiff import Tensor, Tape
from attention_fusion import FusionPipeline, extract_descriptor, extract_descriptors, load_fusion, save_fusion
from checkpoint import load_blobs, save_blobs
from errors import CheckpointFormatError, DataError, NumericError
from texture_data import make_rng, to_nchw
from tsn import expand_patches, load_generator

HASH_MAGIC = "HSHM"
HISTORY_COLUMNS = ["epoch", "pair_loss", "classification_loss", "surrogate"]
SPREAD_FLOOR = 1e-12


def sign_pm1(x):
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def one_hot(labels, n_classes=None):
    """L x N one-hot label matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    y = np.zeros((n_classes, labels.size))
    y[labels, np.arange(labels.size)] = 1.0
    return y


# === Code geometry ===
def hamming_from_inner(k, inner):
    """(k - <b_i, b_j>) / 2 for +-1 codes of length k."""
    if abs(inner) > k or (k - inner) % 2:
        raise DataError(f"inner product {inner} impossible for +-1 codes of length {k}")
    return (k - inner) // 2


# === Pairwise likelihood ===
def pairwise_loss(u_i, u_j, s_ij):
    """softplus(theta) - s * theta with theta = <u_i, u_j> / 2, for 1-d continuous code Tensors."""
    theta = ad.scale(ad.sum(ad.mul(u_i, u_j)), 0.5)
    return ad.sub(ad.softplus(theta), ad.scale(theta, float(s_ij)))


def pairwise_batch_loss(u, labels):
    """Mean pairwise loss over all intra-batch pairs i < j; u is a Tensor [B, k]."""
    labels = np.asarray(labels)
    n = labels.size
    if n < 2:
        raise DataError("a mini-batch needs at least two codes to form a pair")
    theta = ad.scale(ad.matmul(u, ad.transpose(u)), 0.5)
    similar = (labels[:, None] == labels[None, :]).astype(np.float64)
    upper = np.triu(np.ones((n, n)), k=1) / (n * (n - 1) / 2)
    per_pair = ad.sub(ad.softplus(theta), ad.mul(theta, Tensor(similar)))
    return ad.sum(ad.mul(per_pair, Tensor(upper)))


# === Classifier on binary codes ===
def classification_loss(B, W, labels, ridge, n_classes=None):
    """Q = ||Y - W^T B||_F^2 / N + ridge * ||W||_F^2."""
    B = np.asarray(B, dtype=np.float64)
    n_classes = W.shape[1] if n_classes is None else n_classes
    residual = one_hot(labels, n_classes) - W.T @ B
    return float(np.sum(residual ** 2) / B.shape[1] + ridge * np.sum(W ** 2))


def solve_classifier(B, labels, ridge, n_classes=None):
    """W = (B B^T + ridge N I)^-1 B Y^T, the exact minimiser of Q for fixed B."""
    B = np.asarray(B, dtype=np.float64)
    k, n = B.shape
    if k > n:
        raise DataError(f"solve_classifier needs k <= N, got k={k}, N={n}")
    system = B @ B.T + ridge * n * np.eye(k)
    if ridge == 0 and np.linalg.matrix_rank(system) < k:
        raise NumericError(f"classifier system is singular (rank {np.linalg.matrix_rank(system)} < k={k}) with ridge=0")
    try:
        return np.linalg.solve(system, B @ one_hot(labels, n_classes).T)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"classifier solve failed: {exc}") from None


# === Discrete code update ===
def surrogate_objective(B, U, W, Y, nu, mu=1.0):
    """nu ||Y - W^T B||^2 / N + mu ||B - U||^2 / N."""
    n = B.shape[1]
    return float(nu * np.sum((Y - W.T @ B) ** 2) / n + mu * np.sum((B - U) ** 2) / n)


def update_codes(B, U, W, Y, nu, mu=1.0):
    """
    One cyclic sweep over the k bit rows. Each row takes the exact minimiser of the
    surrogate with the other rows held fixed, so the surrogate never increases.
    """
    B = np.array(B, dtype=np.float64)
    P = nu * (W @ Y) + mu * np.asarray(U, dtype=np.float64)
    G = W @ W.T
    for r in range(B.shape[0]):
        coupling = G[r] @ B - G[r, r] * B[r]
        B[r] = sign_pm1(P[r] - nu * coupling)
    return B


# === Hash model ===
class HashModel:
    """
    Projection d -> k, classifier W (k x L), training code matrix B (k x N).

    Descriptors are standardised with the per-dimension mean and spread of the training pool
    before the projection, so every bit splits the pool instead of reading a shared offset.
    """

    def __init__(self, descriptor_dim, code_bits, n_classes, nu=0.1, ridge=1.0, mu=1.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.descriptor_dim, self.code_bits, self.n_classes = int(descriptor_dim), int(code_bits), int(n_classes)
        self.nu, self.ridge, self.mu = float(nu), float(ridge), float(mu)
        self.weight = ad.gaussian_parameter(rng, (self.descriptor_dim, self.code_bits), math.sqrt(1.0 / self.descriptor_dim))
        self.bias = Tensor(np.zeros(self.code_bits), requires_grad=True)
        self.center = np.zeros(self.descriptor_dim)
        self.spread = np.ones(self.descriptor_dim)
        self.W = np.zeros((self.code_bits, self.n_classes))
        self.B = np.zeros((self.code_bits, 0))

    def parameters(self):
        return [self.weight, self.bias]

    def fit_normalizer(self, descriptors):
        d = np.asarray(descriptors, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != self.descriptor_dim or d.shape[0] == 0:
            raise DataError(f"normalizer needs [N, {self.descriptor_dim}] descriptors, got {d.shape}")
        self.center = d.mean(axis=0)
        std = d.std(axis=0)
        # constant dimensions stay at zero after centring
        self.spread = np.where(std > SPREAD_FLOOR, std, 1.0)

    def standardize(self, descriptors):
        return (np.asarray(descriptors, dtype=np.float64) - self.center) / self.spread

    def continuous(self, descriptors):
        """Tensor [N, d] -> continuous codes Tensor [N, k]."""
        n = descriptors.shape[0]
        centred = ad.sub(descriptors, Tensor(np.tile(self.center, (n, 1))))
        scaled = ad.mul(centred, Tensor(np.tile(1.0 / self.spread, (n, 1))))
        return ad.fully_connected(scaled, self.weight, self.bias)

    def continuous_codes(self, descriptors):
        return self.standardize(descriptors) @ self.weight.data + self.bias.data

    def encode_descriptors(self, descriptors):
        """[N, d] descriptors -> [N, k] codes in {-1, +1}."""
        return sign_pm1(self.continuous_codes(descriptors)).astype(np.int8)


def encode(model, fusion, generator, patches, batch_size=32):
    return model.encode_descriptors(extract_descriptors(generator, fusion, patches, batch_size))


# === Training pool ===
def build_training_pool(patches, labels, generator, cfg, rng, augmentation=None):
    """
    Original training patches plus, when augmentation is on, aug_patches_per_class random
    K x K crops of generator expansions of same-class training patches.
    Returns (patches, labels, augmented_mask).
    """
    augmentation = cfg.augmentation if augmentation is None else augmentation
    patches = np.asarray(patches, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not augmentation or cfg.aug_patches_per_class == 0:
        return patches, labels, np.zeros(labels.size, dtype=bool)

    k = patches.shape[1]
    extra, extra_labels = [], []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        chosen = rng.choice(members, size=cfg.aug_patches_per_class, replace=members.size < cfg.aug_patches_per_class)
        expansions = expand_patches(generator, patches[chosen])
        for expansion in expansions:
            y, x = rng.integers(0, k + 1, size=2)
            extra.append(expansion[y : y + k, x : x + k])
            extra_labels.append(label)
    pool = np.concatenate([patches, np.stack(extra)])
    pool_labels = np.concatenate([labels, np.asarray(extra_labels, dtype=np.int64)])
    mask = np.concatenate([np.zeros(labels.size, dtype=bool), np.ones(len(extra), dtype=bool)])
    return pool, pool_labels, mask


def balanced_batches(labels, per_class, rng):
    """
    Class-balanced index batches covering every item at least once per epoch. A class with
    fewer than per_class members contributes all of them once, so no index repeats in a batch.
    """
    classes = np.unique(labels)
    queues = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    n_batches = max(math.ceil(q.size / per_class) for q in queues.values())
    batches = []
    for b in range(n_batches):
        batch = []
        for c in classes:
            q = queues[c]
            take = min(per_class, q.size)
            batch.extend(q[(b * take + np.arange(take)) % q.size])
        batches.append(np.asarray(batch, dtype=np.int64))
    return batches


# === Stage-2 training ===
@dataclass
class HashTrainResult:
    model: HashModel
    fusion: FusionPipeline
    history: pd.DataFrame
    pool_labels: np.ndarray
    augmented: np.ndarray


def _check_finite(value, what, epoch, last_finite):
    if not np.isfinite(value):
        raise NumericError(
            f"Stage-2 training diverged in epoch {epoch}: {what} is not finite (last finite: {last_finite})",
            step=epoch, last_finite=last_finite,
        )


def train_hash(generator, patches, labels, cfg, n_classes=None, use_attention=None, augmentation=None,
               code_bits=None, progress=True):
    """Joint training of fusion/CA + projection with alternating classifier and code updates."""
    generator.freeze()
    use_attention = cfg.channel_attention if use_attention is None else use_attention
    code_bits = cfg.code_bits if code_bits is None else code_bits
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    init_rng, sample_rng = make_rng(cfg.hash_seed, 0), make_rng(cfg.hash_seed, 1)

    pool, pool_labels, augmented = build_training_pool(patches, labels, generator, cfg, sample_rng, augmentation)
    n = pool_labels.size
    if code_bits > n:
        raise DataError(f"code_bits={code_bits} exceeds the training pool size {n}")
    fusion = FusionPipeline.build(generator, seed=cfg.hash_seed, use_attention=use_attention)
    model = HashModel(fusion.descriptor_dim, code_bits, n_classes, cfg.nu, cfg.ridge, cfg.mu, init_rng)
    optimizer = ad.Adam(fusion.parameters() + model.parameters(), lr=cfg.hash_lr, beta1=0.9)
    Y = one_hot(pool_labels, n_classes)

    descriptors = extract_descriptors(generator, fusion, pool)
    model.fit_normalizer(descriptors)
    U = model.continuous_codes(descriptors).T
    B = sign_pm1(U)
    W = solve_classifier(B, pool_labels, cfg.ridge, n_classes)

    rows, last_finite = [], {}
    bar = tqdm(range(cfg.hash_epochs), desc=f"Training hash ({code_bits} bits)", disable=not progress)
    for epoch in bar:
        batch_losses = []
        for idx in balanced_batches(pool_labels, cfg.hash_batch_per_class, sample_rng):
            optimizer.zero_grad()
            with Tape():
                u = model.continuous(extract_descriptor(generator, fusion, Tensor(to_nchw(pool[idx]))))
                fit = ad.sub(Tensor(B[:, idx].T), u)
                loss = ad.add(pairwise_batch_loss(u, pool_labels[idx]), ad.scale(ad.mean(ad.mul(fit, fit)), cfg.mu))
                ad.backward(loss)
            _check_finite(float(loss.data), "pairwise loss", epoch, last_finite)
            optimizer.step()
            batch_losses.append(float(loss.data))

        # --- fusion weights moved: re-centre and take U from the whole pool ---
        descriptors = extract_descriptors(generator, fusion, pool)
        model.fit_normalizer(descriptors)
        U = model.continuous_codes(descriptors).T
        W = solve_classifier(B, pool_labels, cfg.ridge, n_classes)
        B = update_codes(B, U, W, Y, cfg.nu, cfg.mu)
        record = {
            "epoch": epoch,
            "pair_loss": float(np.mean(batch_losses)),
            "classification_loss": classification_loss(B, W, pool_labels, cfg.ridge, n_classes),
            "surrogate": surrogate_objective(B, U, W, Y, cfg.nu, cfg.mu),
        }
        for key in ("classification_loss", "surrogate"):
            _check_finite(record[key], key, epoch, last_finite)
        last_finite = record
        rows.append(record)
        if progress:
            bar.set_postfix(pair=f"{record['pair_loss']:.4f}", q=f"{record['classification_loss']:.4f}")

    model.W, model.B = W, B
    optimizer.zero_grad()
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return HashTrainResult(model=model, fusion=fusion, history=history, pool_labels=pool_labels, augmented=augmented)


# === LSH baseline ===
@dataclass
class LshHasher:
    planes: np.ndarray  # (d, k)
    offset: np.ndarray  # (d,)

    @property
    def code_bits(self):
        return self.planes.shape[1]


def lsh_hasher(d, k, seed, offset=None):
    """k seeded Gaussian hyperplanes through `offset` (origin by default)."""
    planes = np.random.default_rng(seed).standard_normal((d, k))
    offset = np.zeros(d) if offset is None else np.asarray(offset, dtype=np.float64)
    if offset.shape != (d,):
        raise DataError(f"LSH offset must have shape ({d},), got {offset.shape}")
    return LshHasher(planes=planes, offset=offset)


def lsh_encode(hasher, descriptor):
    """bit i = sign(<r_i, x - offset>); accepts (d,) or (N, d)."""
    x = np.asarray(descriptor, dtype=np.float64)
    if x.shape[-1] != hasher.planes.shape[0]:
        raise DataError(f"descriptor length {x.shape[-1]} != LSH input dimension {hasher.planes.shape[0]}")
    return sign_pm1((x - hasher.offset) @ hasher.planes).astype(np.int8)


# === HSHM checkpoint and code export ===
def fusion_path_for(model_path):
    return f"{os.path.splitext(model_path)[0]}.fusd"


def save_hash_bundle(model_path, model, fusion, tsn_path, cfg, variant="tsn"):
    """Write the HSHM model and its FUSD sibling; both reference each other by relative path."""
    fusion_path = fusion_path_for(model_path)
    model_dir = os.path.dirname(os.path.abspath(model_path))
    save_fusion(fusion_path, fusion, {"config": cfg.as_dict()})
    meta = {
        "kind": "hash",
        "variant": variant,
        "code_bits": model.code_bits,
        "descriptor_dim": model.descriptor_dim,
        "n_classes": model.n_classes,
        "nu": model.nu,
        "ridge": model.ridge,
        "mu": model.mu,
        "fusion_file": os.path.basename(fusion_path),
        "tsn_checkpoint": os.path.relpath(os.path.abspath(tsn_path), model_dir) if tsn_path else None,
        "config": cfg.as_dict(),
    }
    params = {
        "proj.w": model.weight.data, "proj.b": model.bias.data, "proj.center": model.center,
        "proj.spread": model.spread, "classifier.W": model.W, "codes.B": model.B,
    }
    save_blobs(model_path, HASH_MAGIC, meta, params)
    return fusion_path


def load_hash_model(model_path):
    """Return (HashModel, meta)."""
    meta, params = load_blobs(model_path, HASH_MAGIC)
    try:
        model = HashModel(meta["descriptor_dim"], meta["code_bits"], meta["n_classes"],
                          meta["nu"], meta["ridge"], meta["mu"])
        model.weight.data = params["proj.w"]
        model.bias.data = params["proj.b"]
        model.center = params["proj.center"]
        model.spread = params["proj.spread"]
        model.W = params["classifier.W"]
        model.B = params["codes.B"]
    except KeyError as exc:
        raise CheckpointFormatError(f"{model_path}: missing {exc}") from None
    if model.weight.data.shape != (model.descriptor_dim, model.code_bits):
        raise CheckpointFormatError(f"{model_path}: projection shape {model.weight.data.shape} does not match k/d")
    return model, meta


def load_hash_bundle(model_path):
    """Return (model, fusion, frozen generator, meta) with referenced files resolved next to the model."""
    model, meta = load_hash_model(model_path)
    model_dir = os.path.dirname(os.path.abspath(model_path))
    fusion_path = os.path.join(model_dir, meta["fusion_file"])
    if not os.path.exists(fusion_path):
        raise FileNotFoundError(f"Missing fusion parameters referenced by {model_path}: {fusion_path}")
    if not meta.get("tsn_checkpoint"):
        raise CheckpointFormatError(f"{model_path}: no TSN checkpoint reference")
    tsn_path = os.path.join(model_dir, meta["tsn_checkpoint"])
    if not os.path.exists(tsn_path):
        raise FileNotFoundError(f"Missing TSN checkpoint referenced by {model_path}: {tsn_path}")
    return model, load_fusion(fusion_path), load_generator(tsn_path), meta


def export_code_matrix(codes, ids, path):
    """Parquet with an `id` column plus one int8 column per bit."""
    codes = np.asarray(codes, dtype=np.int8)
    df = pd.DataFrame(codes, columns=[f"bit_{i:02d}" for i in range(codes.shape[1])])
    df.insert(0, "id", np.asarray(ids, dtype=np.int64))
    df.to_parquet(path, index=False, engine="pyarrow")
    return df
