# src/texture_data.py
#
# Texture images and the patch protocol both training stages draw from.
#
# Key operations:
#   - Procedural texture classes (six parametric families, seeded) as base images
#   - Region split: three image quadrants for training, one for testing, so test patches
#     never share a pixel with training patches
#   - Image-folder datasets (`<root>/<class>/<index>.ppm`); multi-image classes get an
#     image-level 70/20/10 train/test/val split
#   - Stage-1 pairs (K x K input inside a 2K x 2K ground truth) and Stage-2 labelled patches
#   - LBP histogram descriptor for the hand-crafted baseline
#   - Binary PPM/PGM reading and writing; TSV split manifest
#
# Notes:
#   - Images are float64 arrays in [0, 1], H x W x 3 (or H x W for gray).
#   - Every sampler takes an explicit numpy Generator; use make_rng(seed, stream) to give
#     each worker its own stream.


import os
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from tqdm import tqdm
from errors import DataError, ImageFormatError

KINDS = (
    "sinusoid-grating",
    "checkerboard",
    "blotch-noise",
    "stripe-mix",
    "dot-lattice",
    "gradient-warp",
)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# LBP neighbours, clockwise from top-left; the first neighbour is the most significant bit
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))

MANIFEST_COLUMNS = ["patch_id", "class", "split"]
SPLITS = ("train", "test", "val")


def make_rng(seed, stream=0):
    """Independent, reproducible random stream per (seed, stream id)."""
    return np.random.default_rng([int(seed), int(stream)])


# === Procedural texture classes ===
@dataclass(frozen=True)
class TextureClassSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict, hash=False)
    seed: int = 0

    def param(self, key, default):
        return self.params.get(key, default)


def _smooth_field(rng, size, scale):
    """Zero-mean, unit-variance stationary noise, Gaussian low-passed in the Fourier domain."""
    white = rng.standard_normal((size, size))
    freqs = np.fft.fftfreq(size)
    fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
    transfer = np.exp(-2.0 * (np.pi * scale) ** 2 * (fx ** 2 + fy ** 2))
    smooth = np.real(np.fft.ifft2(np.fft.fft2(white) * transfer))
    smooth -= smooth.mean()
    std = smooth.std()
    return smooth / std if std > 0 else smooth


def _directional(xx, yy, orientation):
    return xx * np.cos(orientation) + yy * np.sin(orientation)


def gen_class_image(spec, size):
    """Render the base RGB image of a texture class; pure in (spec, size)."""
    if spec.kind not in KINDS:
        raise DataError(f"unknown texture kind {spec.kind!r}; choose from {', '.join(KINDS)}")
    if size < 4:
        raise DataError(f"image size must be >= 4, got {size}")
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    if spec.kind == "sinusoid-grating":
        # orientation 0: intensity depends on x only (columns are constant)
        freq = spec.param("frequency", 0.1)
        arg = _directional(xx, yy, spec.param("orientation", 0.0))
        t = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * arg + spec.param("phase", 0.0))
    elif spec.kind == "checkerboard":
        period = int(spec.param("period", 8))
        t = ((xx // period + yy // period) % 2).astype(np.float64)
    elif spec.kind == "blotch-noise":
        smooth = _smooth_field(rng, size, spec.param("scale", 4.0))
        t = 0.5 * (1.0 + np.tanh(smooth / max(spec.param("softness", 0.5), 1e-6)))
    elif spec.kind == "stripe-mix":
        a = _directional(xx, yy, spec.param("orientation_a", 0.0))
        b = _directional(xx, yy, spec.param("orientation_b", np.pi / 2))
        t = (0.5 + 0.25 * np.sin(2.0 * np.pi * spec.param("frequency_a", 0.1) * a)
             + 0.25 * np.sin(2.0 * np.pi * spec.param("frequency_b", 0.05) * b))
    elif spec.kind == "dot-lattice":
        spacing = float(spec.param("spacing", 8))
        radius = float(spec.param("radius", 2.5))
        dy = np.mod(yy, spacing) - spacing / 2.0
        dx = np.mod(xx, spacing) - spacing / 2.0
        t = np.clip(radius - np.hypot(dx, dy) + 0.5, 0.0, 1.0)
    else:  # gradient-warp
        warp = _smooth_field(rng, size, spec.param("warp_scale", 8.0))
        arg = _directional(xx, yy, spec.param("orientation", 0.0)) + spec.param("warp", 4.0) * warp
        t = 0.5 + 0.5 * np.sin(2.0 * np.pi * spec.param("frequency", 0.08) * arg)

    noise = spec.param("noise", 0.0)
    if noise > 0:
        t = t + noise * rng.standard_normal(t.shape)
    t = np.clip(t, 0.0, 1.0)[:, :, None]
    color_a = np.asarray(spec.param("color_a", (0.1, 0.1, 0.1)), dtype=np.float64)
    color_b = np.asarray(spec.param("color_b", (0.9, 0.9, 0.9)), dtype=np.float64)
    return np.clip(color_a * (1.0 - t) + color_b * t, 0.0, 1.0)


def _palette(rng):
    base = rng.uniform(0.05, 0.45, size=3)
    return tuple(float(c) for c in base), tuple(float(c) for c in base + rng.uniform(0.35, 0.5, size=3))


def default_class_specs(n_classes, seed=0):
    """Varied catalog cycling through the six kinds; parameters drawn from a seeded stream."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_classes):
        kind = KINDS[i % len(KINDS)]
        color_a, color_b = _palette(rng)
        params = {"color_a": color_a, "color_b": color_b, "noise": 0.03}
        if kind == "sinusoid-grating":
            params.update(frequency=float(rng.uniform(0.06, 0.2)), orientation=float(rng.uniform(0, np.pi)),
                          phase=float(rng.uniform(0, 2 * np.pi)))
        elif kind == "checkerboard":
            params.update(period=int(rng.integers(3, 9)))
        elif kind == "blotch-noise":
            params.update(scale=float(rng.uniform(1.5, 5.0)), softness=float(rng.uniform(0.2, 0.8)))
        elif kind == "stripe-mix":
            params.update(frequency_a=float(rng.uniform(0.08, 0.2)), frequency_b=float(rng.uniform(0.03, 0.08)),
                          orientation_a=float(rng.uniform(0, np.pi)), orientation_b=float(rng.uniform(0, np.pi)))
        elif kind == "dot-lattice":
            spacing = int(rng.integers(5, 11))
            params.update(spacing=spacing, radius=float(rng.uniform(1.0, spacing / 2.5)))
        else:
            params.update(frequency=float(rng.uniform(0.05, 0.12)), orientation=float(rng.uniform(0, np.pi)),
                          warp=float(rng.uniform(2.0, 6.0)), warp_scale=float(rng.uniform(4.0, 10.0)))
        specs.append(TextureClassSpec(name=f"c{i:02d}_{kind}", kind=kind, params=params, seed=seed * 1000 + i))
    return specs


def rgb_to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    return image if image.ndim == 2 else image @ LUMA_WEIGHTS


# === Region / image splits ===
@dataclass(frozen=True)
class Region:
    image_id: int
    label: int
    y0: int
    x0: int
    height: int
    width: int
    split: str

    def contains(self, y, x, size):
        return (self.y0 <= y and y + size <= self.y0 + self.height
                and self.x0 <= x and x + size <= self.x0 + self.width)


@dataclass
class DatasetSplit:
    images: list
    class_names: list
    regions: list

    @property
    def n_classes(self):
        return len(self.class_names)

    def regions_for(self, split, label=None):
        return [r for r in self.regions if r.split == split and (label is None or r.label == label)]


@dataclass
class PatchPair:
    input: np.ndarray
    ground_truth: np.ndarray
    label: int
    image_id: int
    gt_origin: tuple
    input_origin: tuple


def anchor_range(region_size, crop_size):
    """Inclusive range of valid top-left anchors for a crop inside a region."""
    if crop_size > region_size:
        raise DataError(f"crop of {crop_size} does not fit a region of {region_size}")
    return 0, region_size - crop_size


def _quadrant_regions(image_shape, train_fraction, patch_size, image_id, label):
    height, width = image_shape[:2]
    if height % 2 or width % 2:
        raise DataError(f"image side must be divisible by 2, got {height}x{width}")
    half_h, half_w = height // 2, width // 2
    if min(half_h, half_w) < 2 * patch_size:
        raise DataError(
            f"image {height}x{width} too small: each quadrant must hold one {2 * patch_size}x{2 * patch_size} patch"
        )
    n_test = int(np.clip(round((1.0 - train_fraction) * 4), 1, 3))
    quadrants = [(0, 0), (0, half_w), (half_h, 0), (half_h, half_w)]  # TL, TR, BL, BR
    return [
        Region(image_id, label, y0, x0, half_h, half_w, "test" if i >= 4 - n_test else "train")
        for i, (y0, x0) in enumerate(quadrants)
    ]


def make_region_split(image, train_fraction=0.75, patch_size=32, label=0, class_name="class_0"):
    """Quadrant split of a single image: training quadrants first, bottom-right is test."""
    regions = _quadrant_regions(np.shape(image), train_fraction, patch_size, 0, label)
    return DatasetSplit(images=[np.asarray(image, dtype=np.float64)], class_names=[class_name], regions=regions)


def build_split(images_by_class, class_names, train_fraction=0.75, patch_size=32, seed=0):
    """
    Split a whole dataset. Single-image classes are divided into quadrants; classes with
    several images are split image-wise 70/20/10 into train/test/val.
    """
    if len(images_by_class) != len(class_names):
        raise DataError("images_by_class and class_names differ in length")
    images, regions = [], []
    for label, class_images in enumerate(images_by_class):
        if not class_images:
            raise DataError(f"class {class_names[label]!r} has no images")
        if len(class_images) == 1:
            image_id = len(images)
            images.append(np.asarray(class_images[0], dtype=np.float64))
            regions.extend(_quadrant_regions(images[-1].shape, train_fraction, patch_size, image_id, label))
            continue

        order = make_rng(seed, label).permutation(len(class_images))
        n = len(order)
        n_train = max(1, int(round(0.7 * n)))
        n_test = max(1, int(round(0.2 * n)))
        if n_train + n_test > n:
            n_train = n - n_test
        for rank, idx in enumerate(order):
            image = np.asarray(class_images[idx], dtype=np.float64)
            if min(image.shape[:2]) < 2 * patch_size:
                raise DataError(
                    f"image {idx} of class {class_names[label]!r} is smaller than a {2 * patch_size}px patch"
                )
            split = "train" if rank < n_train else ("test" if rank < n_train + n_test else "val")
            regions.append(Region(len(images), label, 0, 0, image.shape[0], image.shape[1], split))
            images.append(image)
    return DatasetSplit(images=images, class_names=list(class_names), regions=regions)


# === Patch sampling ===
def sample_patch_origin(split, size, rng, which="train", label=None):
    """Pick (image_id, y, x, label) for a size x size crop lying inside one `which` region."""
    regions = split.regions_for(which, label)
    if not regions:
        raise DataError(f"no {which!r} regions" + (f" for class {label}" if label is not None else ""))
    region = regions[int(rng.integers(len(regions)))]
    _, max_y = anchor_range(region.height, size)
    _, max_x = anchor_range(region.width, size)
    y = region.y0 + int(rng.integers(0, max_y + 1))
    x = region.x0 + int(rng.integers(0, max_x + 1))
    return region.image_id, y, x, region.label


def sample_stage1_pair(split, patch_size, rng):
    """2K x 2K ground truth from a training region plus a K x K input cropped inside it."""
    if patch_size < 1 or patch_size & (patch_size - 1):
        raise DataError(f"patch size must be a power of two, got {patch_size}")
    label = int(rng.integers(split.n_classes))
    image_id, gy, gx, label = sample_patch_origin(split, 2 * patch_size, rng, "train", label)
    iy = int(rng.integers(0, patch_size + 1))
    ix = int(rng.integers(0, patch_size + 1))
    image = split.images[image_id]
    ground_truth = image[gy : gy + 2 * patch_size, gx : gx + 2 * patch_size]
    return PatchPair(
        input=ground_truth[iy : iy + patch_size, ix : ix + patch_size].copy(),
        ground_truth=ground_truth.copy(),
        label=label,
        image_id=image_id,
        gt_origin=(gy, gx),
        input_origin=(gy + iy, gx + ix),
    )


def sample_stage2_patch(split, patch_size, rng, which="train", label=None):
    """Random labelled K x K patch from the requested split."""
    image_id, y, x, label = sample_patch_origin(split, patch_size, rng, which, label)
    return split.images[image_id][y : y + patch_size, x : x + patch_size].copy(), label


def sample_patch_set(split, patch_size, per_class, rng, which="train"):
    """Class-balanced stack: (patches [N, K, K, C], labels [N]) ordered class by class."""
    patches, labels = [], []
    for label in range(split.n_classes):
        for _ in range(per_class):
            patch, lab = sample_stage2_patch(split, patch_size, rng, which, label)
            patches.append(patch)
            labels.append(lab)
    return np.stack(patches), np.asarray(labels, dtype=np.int64)


def as_rgb(image):
    """H x W gray (PGM) -> H x W x 3 by repeating the channel; RGB passes through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim == 3 and image.shape[2] == 3:
        return image
    raise DataError(f"expected an H x W gray or H x W x 3 image, got shape {image.shape}")


def to_nchw(images):
    """[N, H, W, 3] (or a single H x W x 3) image stack -> NCHW float64."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3 and images.shape[2] == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[3] != 3:
        raise DataError(f"expected RGB images [N, H, W, 3], got shape {images.shape}; convert gray input with as_rgb")
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def to_nhwc(batch):
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 2, 3, 1))


# === LBP baseline descriptor ===
def lbp_codes(gray):
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or min(gray.shape) < 3:
        raise DataError(f"LBP needs a 2-d image of at least 3x3, got shape {gray.shape}")
    h, w = gray.shape
    center = gray[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        neighbour = gray[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        codes |= (neighbour >= center).astype(np.int64) << (7 - bit)
    return codes


def lbp_descriptor(gray):
    """256-bin normalised histogram of 8-neighbour LBP codes over interior pixels."""
    codes = lbp_codes(gray)
    hist = np.bincount(codes.ravel(), minlength=256).astype(np.float64)
    return hist / codes.size


# === PPM / PGM I/O ===
def _to_bytes(image):
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.rint(np.clip(image.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(image, path):
    """Binary P6 for H x W x 3 images, P5 for H x W gray images (maxval 255)."""
    pixels = _to_bytes(image)
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise DataError(f"cannot write image of shape {pixels.shape} as PPM/PGM")
    height, width = pixels.shape[:2]
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{width} {height}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes())


def _skip_space_and_comments(raw, pos):
    while pos < len(raw):
        if raw[pos : pos + 1].isspace():
            pos += 1
        elif raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    return pos


def _read_header_int(raw, pos, what):
    pos = _skip_space_and_comments(raw, pos)
    start = pos
    while pos < len(raw) and raw[pos : pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise ImageFormatError(f"malformed header: expected {what}", offset=start)
    return int(raw[start:pos]), pos


def parse_ppm(raw):
    """Decode P6/P5 bytes into a float64 image in [0, 1]."""
    magic = raw[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"malformed header: bad magic {magic!r}, expected P6 or P5", offset=0)
    width, pos = _read_header_int(raw, 2, "width")
    height, pos = _read_header_int(raw, pos, "height")
    maxval, pos = _read_header_int(raw, pos, "maxval")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 255 is supported", offset=pos)
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace after maxval", offset=pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    actual = len(raw) - pos
    if actual < expected:
        raise ImageFormatError(f"truncated payload: expected {expected} bytes, got {actual}", offset=pos)
    if actual > expected:
        raise ImageFormatError(f"{actual - expected} trailing bytes after payload", offset=pos + expected)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).astype(np.float64) / 255.0


def read_ppm(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Missing image file: {path}")
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


# === Dataset directory: images/<class>/<index>.ppm, patches/<id>.ppm, manifest.tsv ===
def write_image_folder(root, class_names, images_by_class):
    for name, class_images in zip(class_names, images_by_class):
        for index, image in enumerate(class_images):
            write_ppm(image, os.path.join(root, name, f"{index:04d}.ppm"))


def load_image_folder(root):
    """Return (class_names, images_by_class) from `<root>/<class_name>/<index>.ppm`."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"Missing image folder: {root}")
    class_names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not class_names:
        raise DataError(f"no class directories under {root}")
    images_by_class = []
    for name in class_names:
        files = sorted(f for f in os.listdir(os.path.join(root, name)) if f.endswith((".ppm", ".pgm")))
        if not files:
            raise DataError(f"class directory {name!r} holds no .ppm or .pgm files")
        images_by_class.append([as_rgb(read_ppm(os.path.join(root, name, f))) for f in files])
    return class_names, images_by_class


def patch_path(data_dir, patch_id):
    return os.path.join(data_dir, "patches", f"{int(patch_id):06d}.ppm")


def write_manifest(path, rows):
    """rows: iterable of (patch_id, class_name, split)."""
    df = pd.DataFrame(list(rows), columns=MANIFEST_COLUMNS)
    df.to_csv(path, sep="\t", index=False, lineterminator="\n")
    return df


def read_manifest(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Missing split manifest: {path}")
    df = pd.read_csv(path, sep="\t", dtype={"patch_id": "int64", "class": "string", "split": "string"})
    if list(df.columns) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: manifest columns {list(df.columns)} != {MANIFEST_COLUMNS}")
    bad = set(df["split"]) - set(SPLITS)
    if bad:
        raise DataError(f"{path}: unknown split names {sorted(bad)}")
    if df["patch_id"].duplicated().any():
        raise DataError(f"{path}: duplicate patch ids")
    return df


def load_patch_set(data_dir, split, progress=False):
    """
    Load one split of a generated dataset.
    Returns (ids [N], patches [N, K, K, 3], labels [N], class_names).
    """
    manifest = read_manifest(os.path.join(data_dir, "manifest.tsv"))
    class_names = sorted(manifest["class"].unique())
    label_of = {name: i for i, name in enumerate(class_names)}
    rows = manifest[manifest["split"] == split]
    if rows.empty:
        raise DataError(f"{data_dir}: manifest has no {split!r} patches")
    ids = rows["patch_id"].to_numpy(dtype=np.int64)
    iterator = tqdm(ids, desc=f"Loading {split} patches", disable=not progress)
    patches = np.stack([as_rgb(read_ppm(patch_path(data_dir, pid))) for pid in iterator])
    labels = np.asarray([label_of[c] for c in rows["class"]], dtype=np.int64)
    return ids, patches, labels, class_names


def load_dataset_split(data_dir, train_fraction, patch_size, seed):
    """Rebuild the region split of a generated dataset from its images/ folder."""
    class_names, images_by_class = load_image_folder(os.path.join(data_dir, "images"))
    return build_split(images_by_class, class_names, train_fraction, patch_size, seed)
