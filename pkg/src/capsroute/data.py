"""Dataset ingestion, augmentation, fold splitting, and the synthetic
shape-segmentation generator.

Disk layout: ``<name>.pgm`` (or ``.png``) images paired with
``<name>_mask.pgm`` masks; 8-bit grayscale PGM (P5) is the bit-exact
reference format. Images are normalized to [0, 1]; masks binarized at 0.5.
An optional exclusion list (one identifier per line) drops samples at load.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage


class DatasetError(ValueError):
    """A dataset directory or file violates the pairing/extent contract."""


@dataclass
class Sample:
    image: np.ndarray  # (h, w) float in [0, 1]
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    identifier: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DatasetError(
                f"sample {self.identifier!r}: image {self.image.shape} and mask "
                f"{self.mask.shape} extents differ"
            )


@dataclass
class FoldSplit:
    folds: list  # k lists of identifiers
    seed: int

    @property
    def k(self):
        return len(self.folds)

    def train_val_ids(self, fold_index):
        """Identifiers for training (all other folds) and validation (this fold)."""
        val = list(self.folds[fold_index])
        train = [i for j, f in enumerate(self.folds) if j != fold_index for i in f]
        return train, val


# ---------------------------------------------------------------------------
# PGM / PNG io


def write_pgm(path, values):
    """Write (h, w) uint8 values as binary PGM (P5)."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise ValueError(f"write_pgm expects uint8, got {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    """Read a binary PGM (P5) into (h, w) uint8."""
    data = Path(path).read_bytes()
    m = re.match(
        rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data
    )
    if not m:
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    raster = data[m.end():]
    if len(raster) < h * w:
        raise DatasetError(f"{path}: truncated raster ({len(raster)} < {h * w})")
    return np.frombuffer(raster[: h * w], dtype=np.uint8).reshape(h, w)


def read_gray(path):
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    raise DatasetError(f"{path}: unsupported image format {path.suffix!r}")


def load_sample(image_path, mask_path, identifier):
    try:
        img = read_gray(image_path)
        msk = read_gray(mask_path)
    except DatasetError:
        raise
    except OSError as exc:
        raise DatasetError(f"sample {identifier!r}: unreadable file ({exc})") from exc
    if img.shape != msk.shape:
        raise DatasetError(
            f"sample {identifier!r}: image {img.shape} and mask {msk.shape} "
            f"extents differ"
        )
    image = img.astype(np.float64) / 255.0
    mask = (msk.astype(np.float64) / 255.0 > 0.5).astype(np.uint8)
    return Sample(image, mask, identifier)


def load_dataset(directory, exclude=None):
    """All paired samples under ``directory``, ordered by identifier.

    ``exclude`` is an optional path to a plain-text identifier list. An
    image without its ``_mask`` partner (or vice versa) is an error; an
    empty directory yields an empty list.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory}: not a directory")
    excluded = set()
    if exclude is not None:
        for line in Path(exclude).read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                excluded.add(line)
    images, masks = {}, {}
    for path in directory.iterdir():
        if path.suffix.lower() not in (".pgm", ".png"):
            continue
        stem = path.stem
        if stem.endswith("_mask"):
            masks[stem[: -len("_mask")]] = path
        else:
            images[stem] = path
    unpaired = sorted(set(images) ^ set(masks))
    unpaired = [u for u in unpaired if u not in excluded]
    if unpaired:
        raise DatasetError(f"unpaired samples: {', '.join(unpaired)}")
    samples = []
    for ident in sorted(images):
        if ident in excluded:
            continue
        samples.append(load_sample(images[ident], masks[ident], ident))
    return samples


def save_sample(sample, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    write_pgm(directory / f"{sample.identifier}.pgm", img)
    write_pgm(directory / f"{sample.identifier}_mask.pgm",
              (sample.mask * 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    probability: float = 0.5  # independent chance of applying each transform
    scale_range: tuple = (0.9, 1.1)
    flip_enabled: bool = True
    shift_fraction: float = 0.1
    rotate_degrees: float = 15.0
    elastic_alpha_fraction: float = 0.015  # peak displacement as extent fraction
    elastic_sigma: float = 8.0
    noise_std: float = 0.01

    @classmethod
    def disabled(cls):
        return cls(probability=0.0)


def _geometric(image, mask, transform):
    img = transform(image, 1)
    msk = transform(mask.astype(np.float64), 0)
    return img, (msk > 0.5).astype(np.uint8)


def augment(sample, rng, config=None):
    """One augmented copy of ``sample``; image and mask share each draw.

    Each transform fires with independent probability ``config.probability``:
    scale, horizontal flip, shift, rotation, elastic deformation, and
    additive Gaussian noise (image only). Extents never change and the mask
    stays binary.
    """
    config = config or AugmentConfig()
    img = sample.image.copy()
    msk = sample.mask.copy()
    h, w = img.shape
    p = config.probability

    if rng.random() < p:  # scale about the center, crop/pad back
        f = rng.uniform(*config.scale_range)
        c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])

        def tf_scale(a, order, f=f, c=c):
            return ndimage.affine_transform(
                a, np.diag([1.0 / f, 1.0 / f]), offset=c - c / f,
                order=order, mode="constant", cval=0.0, output_shape=(h, w),
            )

        img, msk = _geometric(img, msk, tf_scale)

    if rng.random() < p and config.flip_enabled:  # horizontal flip
        img = img[:, ::-1].copy()
        msk = msk[:, ::-1].copy()

    if rng.random() < p:  # shift
        dy = rng.uniform(-config.shift_fraction, config.shift_fraction) * h
        dx = rng.uniform(-config.shift_fraction, config.shift_fraction) * w

        def tf_shift(a, order, dy=dy, dx=dx):
            return ndimage.shift(a, (dy, dx), order=order, mode="constant", cval=0.0)

        img, msk = _geometric(img, msk, tf_shift)

    if rng.random() < p:  # rotate
        angle = rng.uniform(-config.rotate_degrees, config.rotate_degrees)

        def tf_rot(a, order, angle=angle):
            return ndimage.rotate(a, angle, reshape=False, order=order,
                                  mode="constant", cval=0.0)

        img, msk = _geometric(img, msk, tf_rot)

    if rng.random() < p:  # elastic deformation
        alpha = config.elastic_alpha_fraction * max(h, w)
        dy, dx = elastic_displacement(
            (h, w), alpha, config.elastic_sigma, rng
        )
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = (yy + dy, xx + dx)

        def tf_elastic(a, order, coords=coords):
            return ndimage.map_coordinates(a, coords, order=order,
                                           mode="constant", cval=0.0)

        img, msk = _geometric(img, msk, tf_elastic)

    if rng.random() < p:  # additive noise, image only
        img = img + rng.normal(0.0, config.noise_std, size=img.shape)

    img = np.clip(img, 0.0, 1.0)
    return replace(sample, image=img, mask=msk)


def elastic_displacement(shape, alpha, sigma, rng):
    """Smoothed random displacement field normalized to peak magnitude alpha."""
    fields = []
    for _ in range(2):
        raw = rng.uniform(-1.0, 1.0, size=shape)
        smooth = ndimage.gaussian_filter(raw, sigma, mode="constant", cval=0.0)
        peak = np.abs(smooth).max()
        fields.append(smooth / peak * alpha if peak > 0 else smooth)
    return fields


# ---------------------------------------------------------------------------
# fold splitting


def kfold_split(ids, k, seed):
    """Seeded shuffle then round-robin assignment into k folds."""
    ids = list(ids)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the {len(ids)} available samples")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    folds = [order[i::k] for i in range(k)]
    return FoldSplit(folds=folds, seed=seed)


# ---------------------------------------------------------------------------
# synthetic shapes


def _synth_one(rng, h, w):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coarse = rng.uniform(0.10, 0.45, size=(max(2, h // 8), max(2, w // 8)))
    bg = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=1)
    bg = bg[:h, :w] + rng.normal(0.0, 0.015, size=(h, w))
    image = bg.copy()
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        ry = rng.uniform(0.10, 0.28) * h
        rx = rng.uniform(0.10, 0.28) * w
        theta = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.55, 0.95)
        ct, st = np.cos(theta), np.sin(theta)
        u = (yy - cy) * ct + (xx - cx) * st
        v = -(yy - cy) * st + (xx - cx) * ct
        r = np.sqrt((u / ry) ** 2 + (v / rx) ** 2)
        soft = np.clip((1.0 - r) / 0.08 + 0.5, 0.0, 1.0)
        image = np.maximum(image, amp * soft)
        mask |= (r <= 1.0).astype(np.uint8)
    image = np.clip(image, 0.0, 1.0)
    return image, mask


def synth_generate(n, extents, seed):
    """Deterministic synthetic samples: textured background plus 1-3 soft
    ellipses; mask foreground fraction kept within [0.02, 0.60] by
    resampling."""
    if isinstance(extents, int):
        h = w = extents
    else:
        h, w = extents
    if min(h, w) < 16:
        raise ValueError(f"extents must be >= 16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        while True:
            image, mask = _synth_one(rng, h, w)
            frac = mask.mean()
            if 0.02 <= frac <= 0.60:
                break
        # round-trip through uint8 so regenerated files are byte-identical
        image = np.clip(np.rint(image * 255.0), 0, 255) / 255.0
        samples.append(Sample(image, mask, f"synth_{i:04d}"))
    return samples
