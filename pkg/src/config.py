# config.py
#
# Desk-scale defaults for every stage plus the flat key=value run-config loader.
# A run config file only needs the keys it changes; everything else falls back to the
# defaults below. Unknown keys are rejected so a typo never silently runs the default.

import os
from errors import ConfigError

# === Dataset (texture-data) ===
DEFAULT_CLASSES = 8  # Number of procedural texture classes
DEFAULT_IMAGE_SIZE = 256  # Side of each class's base image; must be >= 4 * patch_size
DEFAULT_PATCH_SIZE = 32  # K: input patch side (generator output is 2K)
DEFAULT_TRAIN_FRACTION = 0.75  # Three quadrants train, one quadrant test
DEFAULT_TRAIN_PATCHES_PER_CLASS = 256
DEFAULT_QUERY_PATCHES_PER_CLASS = 64
DEFAULT_DATA_SEED = 7

# === Stage 1: texture synthesis network ===
DEFAULT_TSN_STEPS = 2000  # Replaces the "100000 epochs" of full-scale training
DEFAULT_TSN_BATCH_SIZE = 4
DEFAULT_BASE_WIDTH = 8  # c0; widths double per encoder stage, capped at 8 * c0
DEFAULT_STYLE_WIDTH = 8  # Width of the first block of the fixed style extractor
DEFAULT_DISC_WIDTH = 8
DEFAULT_LOSS_PRESET = "adv+style+l1"
DEFAULT_GAMMA1 = 100.0  # Style weight
DEFAULT_GAMMA2 = 1.0  # L1 weight
DEFAULT_TSN_LR = 0.0002
DEFAULT_ADAM_BETA1 = 0.5
DEFAULT_INIT_STD = 0.02  # Gaussian init for every trainable conv
DEFAULT_TSN_SEED = 1

# Style tap weights, shallow to deep
STYLE_TAP_WEIGHTS = (0.244, 0.061, 0.15, 0.004, 0.004)

# Loss combinations available to Stage 1 (ablation grid uses all four)
LOSS_PRESETS = {
    "l1+style": frozenset({"l1", "style"}),
    "adv": frozenset({"adv"}),
    "adv+style": frozenset({"adv", "style"}),
    "adv+style+l1": frozenset({"adv", "style", "l1"}),
}

# === Stage 2: hashing ===
DEFAULT_CODE_BITS = 32  # k
DEFAULT_NU = 0.1  # Classification weight
DEFAULT_RIDGE = 1.0  # lambda, ridge weight on the linear classifier
DEFAULT_MU = 1.0  # Code-fitting penalty weight
DEFAULT_HASH_EPOCHS = 30
DEFAULT_HASH_BATCH_PER_CLASS = 4  # Class-balanced mini-batches: classes * this many patches
DEFAULT_HASH_LR = 0.001
DEFAULT_HASH_SEED = 3
DEFAULT_AUGMENTATION = True  # Add crops of generated textures to the training pool
DEFAULT_AUG_PATCHES_PER_CLASS = 64
DEFAULT_CHANNEL_ATTENTION = True

# === Evaluation ===
DEFAULT_TOP_T = 50  # MAP@T (500 at full scale)
DEFAULT_RADIUS = 2
DEFAULT_PRECISION_T_GRID = (10, 20, 50, 100)
DEFAULT_TIMING_REPETITIONS = 5

DEFAULTS = {
    "classes": DEFAULT_CLASSES,
    "image_size": DEFAULT_IMAGE_SIZE,
    "patch_size": DEFAULT_PATCH_SIZE,
    "train_fraction": DEFAULT_TRAIN_FRACTION,
    "train_patches_per_class": DEFAULT_TRAIN_PATCHES_PER_CLASS,
    "query_patches_per_class": DEFAULT_QUERY_PATCHES_PER_CLASS,
    "data_seed": DEFAULT_DATA_SEED,
    "tsn_steps": DEFAULT_TSN_STEPS,
    "tsn_batch_size": DEFAULT_TSN_BATCH_SIZE,
    "base_width": DEFAULT_BASE_WIDTH,
    "style_width": DEFAULT_STYLE_WIDTH,
    "disc_width": DEFAULT_DISC_WIDTH,
    "loss_preset": DEFAULT_LOSS_PRESET,
    "gamma1": DEFAULT_GAMMA1,
    "gamma2": DEFAULT_GAMMA2,
    "tsn_lr": DEFAULT_TSN_LR,
    "adam_beta1": DEFAULT_ADAM_BETA1,
    "init_std": DEFAULT_INIT_STD,
    "tsn_seed": DEFAULT_TSN_SEED,
    "code_bits": DEFAULT_CODE_BITS,
    "nu": DEFAULT_NU,
    "ridge": DEFAULT_RIDGE,
    "mu": DEFAULT_MU,
    "hash_epochs": DEFAULT_HASH_EPOCHS,
    "hash_batch_per_class": DEFAULT_HASH_BATCH_PER_CLASS,
    "hash_lr": DEFAULT_HASH_LR,
    "hash_seed": DEFAULT_HASH_SEED,
    "augmentation": DEFAULT_AUGMENTATION,
    "aug_patches_per_class": DEFAULT_AUG_PATCHES_PER_CLASS,
    "channel_attention": DEFAULT_CHANNEL_ATTENTION,
    "top_t": DEFAULT_TOP_T,
    "radius": DEFAULT_RADIUS,
    "precision_t_grid": DEFAULT_PRECISION_T_GRID,
    "timing_repetitions": DEFAULT_TIMING_REPETITIONS,
}

# Full-scale protocol. Shipped for reference; far too slow for CI on a numpy backend.
FULL_PRESET = {
    "image_size": 1024,
    "patch_size": 128,
    "train_patches_per_class": 2000,
    "query_patches_per_class": 200,
    "tsn_steps": 100000,
    "base_width": 64,
    "style_width": 64,
    "disc_width": 64,
    "code_bits": 64,
    "top_t": 500,
    "precision_t_grid": (100, 200, 500, 1000),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


# === Value coercion: every value takes the type of its default ===
def _coerce(key, raw):
    default = DEFAULTS[key]
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            values = tuple(int(part) for part in text.split(",") if part.strip())
            if not values:
                raise ValueError("expected a comma-separated list of integers")
            return values
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Immutable flat run configuration with attribute access (`cfg.code_bits`)."""

    def __init__(self, values=None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            merged[key] = _coerce(key, _format_value(value) if not isinstance(value, str) else value)
        object.__setattr__(self, "_values", merged)
        self._validate()

    def _validate(self):
        v = self._values
        if v["loss_preset"] not in LOSS_PRESETS:
            raise ConfigError(f"unknown loss_preset {v['loss_preset']!r}; choose from {sorted(LOSS_PRESETS)}")
        k = v["patch_size"]
        if k < 8 or k & (k - 1):
            raise ConfigError(f"patch_size must be a power of two >= 8 (the discriminator needs 2K >= 16), got {k}")
        if v["image_size"] < 4 * k or v["image_size"] % 2:
            raise ConfigError(f"image_size must be even and >= 4 * patch_size ({4 * k}), got {v['image_size']}")
        if not 0.0 < v["train_fraction"] < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        for key in ("classes", "tsn_batch_size", "base_width", "style_width", "disc_width",
                    "code_bits", "hash_batch_per_class", "top_t", "train_patches_per_class",
                    "query_patches_per_class"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        for key in ("gamma1", "gamma2", "nu", "ridge", "mu"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {v[key]}")
        if v["timing_repetitions"] < 3:
            raise ConfigError("timing_repetitions must be >= 3")

    def __getattr__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key) from None

    def __setattr__(self, key, value):
        raise AttributeError("RunConfig is immutable; use replace()")

    def __getitem__(self, key):
        return self._values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def as_dict(self):
        return dict(self._values)

    def replace(self, **changes):
        values = dict(self._values)
        values.update(changes)
        return RunConfig(values)

    def echo(self):
        """Canonical provenance text: one sorted `key=value` line per key."""
        return "".join(f"{key}={_format_value(self._values[key])}\n" for key in sorted(self._values))


# === Parsing: flat key=value text, '#' comments ===
def parse_config_text(text, source="<config>"):
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected key=value, got {line.strip()!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{line_no}: unknown config key: {key}")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key: {key}")
        values[key] = value
    return values


def load_run_config(path=None, overrides=None):
    """
    Build a RunConfig from an optional key=value file plus `key=value` override strings.
    Missing keys fall back to DEFAULTS; unknown keys raise ConfigError.
    """
    values = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Missing config file: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read(), source=path))
    for item in overrides or ():
        values.update(parse_config_text(item, source="--set"))
    return RunConfig(values)


def write_config_echo(cfg, artifact_path):
    """Write the `<artifact>.cfg` provenance sidecar next to an artifact."""
    sidecar = f"{artifact_path}.cfg"
    with open(sidecar, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.echo())
    return sidecar


# === Shared CLI arguments ===
def add_config_arguments(parser):
    parser.add_argument("--config", type=str, default=None, help="key=value run config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def config_from_args(args, base=None):
    """RunConfig from `base` values (e.g. a checkpoint's echo), then --config, then --set."""
    values = {key: value for key, value in (base or {}).items() if key in DEFAULTS}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        if not os.path.exists(config_path):
            raise ConfigError(f"Missing config file: {config_path}")
        with open(config_path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read(), source=config_path))
    for item in getattr(args, "overrides", None) or ():
        values.update(parse_config_text(item, source="--set"))
    return RunConfig(values)
