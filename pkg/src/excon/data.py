"""Dataset ingestion, the synthetic toy task, splits and normalization.

Three sources are supported: class-named image folders, CIFAR-style binary
record files, and a generated shapes-on-texture toy task. The toy task is
the main desk-scale vehicle: each image carries one class-determined shape
(square / disc / triangle / cross) at a random position over a smoothed
noise background, and the shape region is stored as a ground-truth mask so
explainer quality can be judged against a known salient region.

All images are float32 in [0, 1], channel-first. Per-channel normalization
stats are computed from the training split only.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError

# Ordered so the 2-class task contrasts maximally different geometry.
TOY_SHAPES = ("square", "cross", "disc", "triangle")


@dataclass
class ArrayDataset:
    """In-memory dataset: images (N, C, H, W) in [0, 1], labels, string ids.

    ``masks`` (N, H, W) bool marks the ground-truth salient region where the
    source provides one (toy task only).
    """

    images: torch.Tensor
    labels: torch.Tensor
    ids: list[str]
    masks: torch.Tensor | None = None

    def __post_init__(self):
        n = self.images.shape[0]
        if self.labels.shape != (n,) or len(self.ids) != n:
            raise ConfigurationError("images, labels and ids must have equal length")
        if self.masks is not None and self.masks.shape[0] != n:
            raise ConfigurationError("masks length must match images")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "ArrayDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ArrayDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            ids=[self.ids[i] for i in idx.tolist()],
            masks=self.masks[idx] if self.masks is not None else None,
        )

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass
class Normalizer:
    """Per-channel (x - mean) / std, applied after augmentation/masking."""

    mean: torch.Tensor
    std: torch.Tensor

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        mean = self.mean.view(-1, 1, 1)
        std = self.std.view(-1, 1, 1)
        return (images - mean) / std


def compute_normalizer(train: ArrayDataset) -> Normalizer:
    mean = train.images.mean(dim=(0, 2, 3))
    std = train.images.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return Normalizer(mean=mean, std=std)


@dataclass
class DatasetSpec:
    """Where the data comes from and how to present it.

    ``source`` is one of image_folder / cifar_binary / synthetic_toy.
    Folder and binary sources need ``path``; the toy source regenerates
    deterministically from (num_classes, per_class, resolution, data_seed)
    unless ``path`` points at a materialized toy directory.
    """

    source: str = "synthetic_toy"
    path: str = ""
    resolution: int = 64
    num_classes: int = 2
    per_class: int = 64
    data_seed: int = 0
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self):
        if self.source not in ("image_folder", "cifar_binary", "synthetic_toy"):
            raise ConfigurationError(f"unknown dataset source {self.source!r}")
        if self.source != "synthetic_toy" and not self.path:
            raise ConfigurationError(f"source {self.source!r} requires a path")
        if self.resolution < 8 or self.resolution % 8:
            raise ConfigurationError(
                f"resolution must be a positive multiple of 8, got {self.resolution}"
            )


def _smooth_noise(rng: np.random.Generator, size: int, passes: int = 3) -> np.ndarray:
    noise = rng.random((size, size), dtype=np.float64)
    kernel = np.ones(5) / 5.0
    for _ in range(passes):
        noise = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 0, noise)
        noise = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, noise)
    lo, hi = noise.min(), noise.max()
    return (noise - lo) / (hi - lo) if hi > lo else np.zeros_like(noise)


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one random shape, area between 5% and 40% of pixels."""
    yy, xx = np.mgrid[0:size, 0:size]
    while True:
        # Lower size bounds keep shape interiors wider than one cell of the
        # downsampled feature grid, so saliency peaks can land inside the mask.
        if kind == "square":
            side = int(rng.uniform(0.40, 0.60) * size)
            top = rng.integers(1, size - side)
            left = rng.integers(1, size - side)
            mask = (yy >= top) & (yy < top + side) & (xx >= left) & (xx < left + side)
        elif kind == "disc":
            radius = rng.uniform(0.22, 0.34) * size
            cy = rng.uniform(radius + 1, size - radius - 1)
            cx = rng.uniform(radius + 1, size - radius - 1)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        elif kind == "triangle":
            base = int(rng.uniform(0.55, 0.80) * size)
            height = int(base * 0.9)
            top = rng.integers(1, size - height)
            left = rng.integers(1, size - base)
            rel_y = (yy - top) / height
            center = left + base / 2
            half_width = (base / 2) * rel_y
            mask = (rel_y >= 0) & (rel_y <= 1) & (np.abs(xx - center) <= half_width)
        elif kind == "cross":
            bar = int(rng.uniform(0.22, 0.30) * size)
            length = int(rng.uniform(0.55, 0.75) * size)
            cy = rng.integers(length // 2 + 1, size - length // 2 - 1)
            cx = rng.integers(length // 2 + 1, size - length // 2 - 1)
            horiz = (np.abs(yy - cy) <= bar // 2) & (np.abs(xx - cx) <= length // 2)
            vert = (np.abs(xx - cx) <= bar // 2) & (np.abs(yy - cy) <= length // 2)
            mask = horiz | vert
        else:
            raise ConfigurationError(f"unknown toy shape {kind!r}")
        area = mask.mean()
        if 0.05 <= area <= 0.40:
            return mask


def make_synthetic_toy(
    num_classes: int, per_class: int, resolution: int, seed: int
) -> ArrayDataset:
    """Generate the toy dataset with ground-truth shape masks.

    Backgrounds are dim, low-contrast smoothed noise with identical statistics
    across classes, so everything class-specific lives inside the shape. Shape
    pixels get a warm color modulated by an oriented stripe pattern whose
    angle is tied to the class. Geometry alone would place all discriminative
    evidence on the shape outline, where saliency peaks straddle the mask
    boundary; the stripes put class evidence across the whole interior, so the
    ground-truth mask really is the salient region it claims to be.
    """
    if num_classes < 1 or per_class < 1 or resolution < 8:
        raise ConfigurationError("num_classes, per_class and resolution must be positive")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    images = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    masks = np.empty((n, resolution, resolution), dtype=bool)
    ids = []
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    period = max(4.0, resolution / 8)
    i = 0
    for cls in range(num_classes):
        kind = TOY_SHAPES[cls % len(TOY_SHAPES)]
        angle = math.pi * cls / num_classes
        axis = math.cos(angle) * yy + math.sin(angle) * xx
        for _ in range(per_class):
            background = _smooth_noise(rng, resolution) * 0.12 + 0.1
            tint = rng.uniform(0.8, 1.2, size=3)
            img = np.stack([np.clip(background * t, 0, 1) for t in tint])
            mask = _shape_mask(kind, resolution, rng)
            brightness = rng.uniform(0.75, 0.95)
            phase = rng.uniform(0, 2 * math.pi)
            stripes = 0.65 + 0.45 * np.sin(2 * math.pi * axis / period + phase)
            color = np.array([1.0, 0.85, 0.55]) * brightness
            for ch in range(3):
                img[ch][mask] = np.clip(color[ch] * stripes[mask], 0.0, 1.0)
            images[i] = img.astype(np.float32)
            labels[i] = cls
            masks[i] = mask
            ids.append(f"toy-{i:05d}")
            i += 1
    return ArrayDataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels),
        ids=ids,
        masks=torch.from_numpy(masks),
    )


def save_toy_dataset(dataset: ArrayDataset, spec: DatasetSpec, out_dir) -> Path:
    """Materialize a toy dataset as data.npz + spec.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(
        out_dir / "data.npz",
        images=dataset.images.numpy(),
        labels=dataset.labels.numpy(),
        masks=dataset.masks.numpy(),
        ids=np.array(dataset.ids),
    )
    meta = {
        "source": "synthetic_toy",
        "num_classes": spec.num_classes,
        "per_class": spec.per_class,
        "resolution": spec.resolution,
        "data_seed": spec.data_seed,
    }
    (out_dir / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def _load_toy_dir(path: Path) -> ArrayDataset:
    with np.load(path / "data.npz", allow_pickle=False) as archive:
        return ArrayDataset(
            images=torch.from_numpy(archive["images"]),
            labels=torch.from_numpy(archive["labels"]),
            ids=[str(s) for s in archive["ids"]],
            masks=torch.from_numpy(archive["masks"]),
        )


def _load_image_folder(path: Path, resolution: int) -> ArrayDataset:
    class_dirs = sorted(d for d in path.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigurationError(f"{path} contains no class subdirectories")
    images, labels, ids = [], [], []
    for label, class_dir in enumerate(class_dirs):
        for img_path in sorted(class_dir.iterdir()):
            if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            with Image.open(img_path) as img:
                img = img.convert("RGB")
                if img.size != (resolution, resolution):
                    img = img.resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(img, dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
            ids.append(f"{class_dir.name}/{img_path.name}")
    if not images:
        raise ConfigurationError(f"{path} contains no images")
    return ArrayDataset(
        images=torch.from_numpy(np.stack(images)),
        labels=torch.tensor(labels, dtype=torch.long),
        ids=ids,
    )


def _load_cifar_binary(path: Path, num_classes: int, resolution: int) -> ArrayDataset:
    # 1 label byte per record (CIFAR-10 layout) or 2 (CIFAR-100, coarse+fine).
    label_bytes = 2 if num_classes > 10 else 1
    record = label_bytes + 3072
    files = sorted(path.glob("*.bin"))
    if not files:
        raise ConfigurationError(f"no .bin record files under {path}")
    images, labels, ids = [], [], []
    for f in files:
        blob = np.fromfile(f, dtype=np.uint8)
        if blob.size % record:
            raise ConfigurationError(
                f"{f} size {blob.size} is not a multiple of the {record}-byte record"
            )
        recs = blob.reshape(-1, record)
        labels.append(recs[:, label_bytes - 1].astype(np.int64))
        images.append(recs[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        ids.extend(f"{f.stem}/{i}" for i in range(recs.shape[0]))
    imgs = torch.from_numpy(np.concatenate(images))
    if resolution != 32:
        imgs = torch.nn.functional.interpolate(
            imgs, size=(resolution, resolution), mode="bilinear", align_corners=False
        )
    return ArrayDataset(
        images=imgs,
        labels=torch.from_numpy(np.concatenate(labels)),
        ids=ids,
    )


def load_dataset(spec: DatasetSpec) -> ArrayDataset:
    if spec.source == "synthetic_toy":
        if spec.path:
            return _load_toy_dir(Path(spec.path))
        return make_synthetic_toy(spec.num_classes, spec.per_class, spec.resolution, spec.data_seed)
    if spec.source == "image_folder":
        return _load_image_folder(Path(spec.path), spec.resolution)
    return _load_cifar_binary(Path(spec.path), spec.num_classes, spec.resolution)


def split_train_val(
    dataset: ArrayDataset, val_fraction: float, generator: torch.Generator
) -> tuple[ArrayDataset, ArrayDataset]:
    """Stratified split: per class, the first ceil(val_fraction * count) of a
    seeded permutation go to validation. Stable for a fixed generator state."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train_idx, val_idx = [], []
    for cls in sorted(set(dataset.labels.tolist())):
        cls_idx = (dataset.labels == cls).nonzero().flatten()
        perm = cls_idx[torch.randperm(len(cls_idx), generator=generator)]
        n_val = int(np.ceil(val_fraction * len(cls_idx)))
        val_idx.extend(perm[:n_val].tolist())
        train_idx.extend(perm[n_val:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))


@dataclass
class DatasetBundle:
    """A loaded dataset, its split, and the train-split normalizer."""

    spec: DatasetSpec
    full: ArrayDataset
    train: ArrayDataset
    val: ArrayDataset
    normalizer: Normalizer


def prepare_dataset(
    spec: DatasetSpec, val_fraction: float, split_generator: torch.Generator
) -> DatasetBundle:
    full = load_dataset(spec)
    train, val = split_train_val(full, val_fraction, split_generator)
    if spec.mean and spec.std:
        normalizer = Normalizer(
            mean=torch.tensor(spec.mean, dtype=torch.float32),
            std=torch.tensor(spec.std, dtype=torch.float32),
        )
    else:
        normalizer = compute_normalizer(train)
    return DatasetBundle(spec=spec, full=full, train=train, val=val, normalizer=normalizer)
