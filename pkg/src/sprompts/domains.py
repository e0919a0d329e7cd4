"""Synthetic multi-domain shape streams, a pretraining corpus, and a directory loader.

Every domain renders fresh instances of the same shape classes and applies its
own transform, so label marginals are identical and only the input
distribution moves. The ``rot90_hue`` domain turns horizontal bars into
vertical ones (and back); a single shared prompt cannot serve it and the
upright domains at once.
"""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

SPLITS = ("train", "test", "ood", "pretrain")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str
    domain: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ classes


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    return ys + 0.5, xs + 0.5


def _disk(ys, xs, cy, cx, s):
    return ((ys - cy) ** 2 + (xs - cx) ** 2 <= (7.0 * s) ** 2)


def _square(ys, xs, cy, cx, s):
    h = 6.5 * s
    return (np.abs(ys - cy) <= h) & (np.abs(xs - cx) <= h)


def _hbar(ys, xs, cy, cx, s):
    return (np.abs(ys - cy) <= 2.5 * s) & (np.abs(xs - cx) <= 10.0 * s)


def _vbar(ys, xs, cy, cx, s):
    return (np.abs(xs - cx) <= 2.5 * s) & (np.abs(ys - cy) <= 10.0 * s)


def _triangle(ys, xs, cy, cx, s):
    h = 8.0 * s
    top, bottom = cy - h, cy + h
    t = (ys - top) / (bottom - top)
    return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= t * h)


def _cross(ys, xs, cy, cx, s):
    return _hbar(ys, xs, cy, cx, s * 0.85) | _vbar(ys, xs, cy, cx, s * 0.85)


def _ring(ys, xs, cy, cx, s):
    r2 = (ys - cy) ** 2 + (xs - cx) ** 2
    return (r2 <= (8.0 * s) ** 2) & (r2 >= (5.0 * s) ** 2)


SHAPES: dict[str, Callable] = {
    "hbar": _hbar,
    "vbar": _vbar,
    "disk": _disk,
    "triangle": _triangle,
    "square": _square,
    "cross": _cross,
    "ring": _ring,
}


def render(shape: str, rng: np.random.Generator, size: int = 32) -> tuple[np.ndarray, float]:
    """Binary mask of one jittered instance plus its foreground intensity."""
    if shape not in SHAPES:
        raise DatasetError(f"unknown shape class {shape!r}")
    ys, xs = _grid(size)
    c = size / 2
    cy, cx = c + rng.uniform(-4, 4), c + rng.uniform(-4, 4)
    s = rng.uniform(0.8, 1.15) * size / 32
    mask = SHAPES[shape](ys, xs, cy, cx, s).astype(np.float32)
    return mask, float(rng.uniform(0.8, 1.0))


def base_image(mask: np.ndarray, intensity: float) -> np.ndarray:
    return np.repeat((mask * intensity)[..., None], 3, axis=-1).astype(np.float32)


# --------------------------------------------------------------- transforms


def _compose(mask, fg, bg):
    return mask[..., None] * fg + (1 - mask[..., None]) * bg


def t_identity(mask, inten, rng):
    return base_image(mask, inten)


def t_rot90_hue(mask, inten, rng):
    m = np.rot90(mask).copy()
    fg = np.array([1.0, 0.55, 0.1], np.float32) * inten
    bg = np.array([0.05, 0.1, 0.35], np.float32)
    return _compose(m, fg, bg)


def t_noise(mask, inten, rng):
    img = base_image(mask, inten) + rng.normal(0.0, 0.35, mask.shape)[..., None]
    return np.clip(img, 0, 1)


def t_texture(mask, inten, rng):
    ys, xs = _grid(mask.shape[0])
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 6.0)
    wave = 0.5 * (1 + np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / period))
    bg = (0.5 * wave)[..., None] * np.array([0.9, 0.15, 0.7], np.float32)
    return _compose(mask, inten, bg)


def t_invert(mask, inten, rng):
    return 1.0 - base_image(mask, inten)


def t_salt_pepper(mask, inten, rng):
    img = base_image(mask, inten)
    u = rng.uniform(size=mask.shape)
    img[u < 0.08] = 0.0
    img[u > 0.92] = 1.0
    return img


def t_checkerboard(mask, inten, rng):
    ys, xs = _grid(mask.shape[0])
    cell = int(rng.integers(3, 6))
    board = ((ys // cell + xs // cell) % 2).astype(np.float32) * 0.4
    return _compose(mask, np.array([inten, inten * 0.4, inten * 0.8], np.float32), board[..., None])


def t_dim(mask, inten, rng):
    return base_image(mask, inten * rng.uniform(0.35, 0.75))


def t_blur(mask, inten, rng):
    img = base_image(mask, inten)
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = mask.shape
    return sum(pad[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def t_gray_background(mask, inten, rng):
    return _compose(mask, inten, rng.uniform(0.15, 0.4))


def t_soft_noise(mask, inten, rng):
    return np.clip(base_image(mask, inten) + rng.normal(0.0, 0.08, mask.shape + (3,)), 0, 1)


TRANSFORMS: dict[str, Callable] = {
    "identity": t_identity,
    "rot90_hue": t_rot90_hue,
    "noise": t_noise,
    "texture": t_texture,
    "invert": t_invert,
    "salt_pepper": t_salt_pepper,
    "checkerboard": t_checkerboard,
    "dim": t_dim,
    "blur": t_blur,
    "gray_background": t_gray_background,
    "soft_noise": t_soft_noise,
}

PRETRAIN_TRANSFORMS = ("dim", "blur")


@dataclass(frozen=True)
class StreamSpec:
    classes: tuple[str, ...] = ("hbar", "vbar", "disk", "triangle")
    domains: tuple[str, ...] = ("identity", "rot90_hue", "noise", "texture")
    train_per_class: int = 50
    test_per_class: int = 25
    ood: tuple[str, ...] = ("invert", "salt_pepper", "checkerboard")
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("classes", "domains", "ood"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for c in self.classes:
            if c not in SHAPES:
                raise DatasetError(f"unknown shape class {c!r}")
        for t in self.domains + self.ood:
            if t not in TRANSFORMS:
                raise DatasetError(f"unknown transform {t!r}")
        if not self.classes or not self.domains:
            raise DatasetError("stream needs at least one class and one domain")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Stream:
    spec: StreamSpec
    train: list[LabeledDataset]
    test: list[LabeledDataset]
    ood: list[LabeledDataset]

    @property
    def num_domains(self) -> int:
        return len(self.train)


def make_domain_set(classes, transform: str, per_class: int, seed_key, split: str,
                    image_size: int = 32) -> LabeledDataset:
    if per_class <= 0:
        raise DatasetError("need at least one sample per class")
    rng = np.random.default_rng(seed_key)
    fn = TRANSFORMS[transform]
    images, labels = [], []
    for label, shape in enumerate(classes):
        for _ in range(per_class):
            mask, inten = render(shape, rng, image_size)
            images.append(fn(mask, inten, rng))
            labels.append(label)
    return LabeledDataset(np.stack(images), np.array(labels), split, transform)


def generate_stream(spec: StreamSpec) -> Stream:
    """Build the ordered (train, test) domain list plus held-out OOD test sets.

    Seeds are derived per (domain, split), so no image is shared between domains
    or splits and the whole stream is a pure function of ``spec``.
    """
    if spec.train_per_class <= 0 or spec.test_per_class <= 0:
        raise DatasetError("zero samples requested")
    train, test, ood = [], [], []
    for d, name in enumerate(spec.domains):
        train.append(make_domain_set(spec.classes, name, spec.train_per_class,
                                     [spec.seed, d, 0], "train", spec.image_size))
        test.append(make_domain_set(spec.classes, name, spec.test_per_class,
                                    [spec.seed, d, 1], "test", spec.image_size))
    for o, name in enumerate(spec.ood):
        ood.append(make_domain_set(spec.classes, name, spec.test_per_class,
                                   [spec.seed, 1000 + o, 2], "ood", spec.image_size))
    return Stream(spec, train, test, ood)


def pretrain_corpus(spec: StreamSpec, seed: int = 0, n_samples: int = 10_000,
                    transforms: tuple[str, ...] = PRETRAIN_TRANSFORMS) -> LabeledDataset:
    """Shared-label pretraining data drawn from a transform family disjoint from the stream."""
    overlap = sorted(set(transforms) & (set(spec.domains) | set(spec.ood)))
    notes = []
    if overlap:
        msg = f"pretraining transforms overlap the stream: {overlap}"
        warnings.warn(msg)
        notes.append(msg)
    rng = np.random.default_rng([seed, 7919])
    images = np.empty((n_samples, spec.image_size, spec.image_size, 3), np.float32)
    labels = np.empty(n_samples, np.int64)
    for i in range(n_samples):
        label = i % len(spec.classes)
        t = transforms[(i // len(spec.classes)) % len(transforms)]
        mask, inten = render(spec.classes[label], rng, spec.image_size)
        images[i] = TRANSFORMS[t](mask, inten, rng)
        labels[i] = label
    return LabeledDataset(images, labels, "pretrain", "pretrain",
                          provenance={"transforms": list(transforms), "warnings": notes, "seed": seed})


# ------------------------------------------------------------------ on disk

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


def load_directory_dataset(path, image_size: int = 32, classes=None, split: str = "train") -> LabeledDataset:
    """Load ``<path>/<class>/<image files>`` in lexicographic path order.

    ``classes`` fixes the label order; any class directory outside it is an
    error. Undecodable files are collected and reported together.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} contains no class directories")
    names = [p.name for p in class_dirs]
    if classes is None:
        classes = names
    unknown = [n for n in names if n not in classes]
    if unknown:
        raise DatasetError(f"unknown class directories under {root}: {unknown}")
    images, labels, failures = [], [], []
    for cdir in class_dirs:
        label = list(classes).index(cdir.name)
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES or not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    images.append(np.asarray(im, dtype=np.float32) / 255.0)
                    labels.append(label)
            except Exception as exc:  # PIL raises several unrelated types
                failures.append(f"{f}: {exc}")
    if failures:
        raise DatasetError("undecodable images:\n" + "\n".join(failures))
    if not images:
        raise DatasetError(f"{root} contains no images")
    return LabeledDataset(np.stack(images), np.array(labels), split, root.name,
                          provenance={"path": str(root), "classes": list(classes)})


def load_directory_stream(root, image_size: int = 32, split: str = "train",
                          classes=None) -> list[LabeledDataset]:
    """One dataset per ``<root>/<domain>`` directory, domains in lexicographic order.

    Labels follow ``classes`` when given, else the sorted union of class names.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    domains = sorted(p for p in root.iterdir() if p.is_dir())
    if not domains:
        raise DatasetError(f"{root} is empty")
    if classes is None:
        classes = sorted({c.name for d in domains for c in d.iterdir() if c.is_dir()})
    return [load_directory_dataset(d, image_size, classes, split) for d in domains]


def export_png_tree(datasets: list[LabeledDataset], root, class_names) -> int:
    """Write datasets as ``<root>/<domain>/<class>/<index>.png``; returns file count."""
    from PIL import Image

    count = 0
    for ds in datasets:
        for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
            d = Path(root) / (ds.domain or "domain") / class_names[label]
            os.makedirs(d, exist_ok=True)
            Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(d / f"{i:05d}.png")
            count += 1
    return count


# ------------------------------------------------------------- augmentation


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip and pad-then-crop, per sample."""
    n, h, w, _ = images.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], images[:, :, ::-1], images)
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    return np.stack([padded[i, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])
