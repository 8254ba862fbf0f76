"""Multiview batch construction: random views plus saliency-masked images.

For every original example the builder computes a saliency map, masks the
least-salient pixels, and classifies the masked image with the current
model (pure inference; nothing here reaches the training gradient). The
classification outcome routes the example:

  (a) masked image predicted correctly: the masked image joins the batch as
      an anchor with the true label, alongside one random view; the second
      random view is discarded.
  (b) predicted incorrectly with background mode on: both random views are
      anchors; the masked image is kept as an unlabeled background negative.
  (c) predicted incorrectly with background mode off: the masked image is
      discarded; both random views are anchors.

Anchors always number 2 per original, so the anchor count is 2n in every
branch mix; total items are 2n + b with b the branch-(b) count.

Random views are sampled crop / flip / color-jitter / grayscale transforms
driven by an explicit generator, so runs are reproducible and both batch
builders (plain two-view and explanation-driven) consume the augmentation
stream identically.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from .errors import ConfigurationError, ContractViolation
from .explain import MaskSpec, apply_mask, compute_saliency

logger = logging.getLogger(__name__)

BACKGROUND_LABEL = -1


class BatchRole(str, Enum):
    RANDOM_VIEW = "random_view"
    MASKED_POSITIVE = "masked_positive"
    BACKGROUND_NEGATIVE = "background_negative"


@dataclass
class AugmentPolicy:
    """Random-view transform parameters.

    Strengths of exactly 0 skip the corresponding op entirely, so the
    all-zero policy with crop_scale (1, 1) is a bitwise identity.
    """

    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("flip_prob", "grayscale_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.hue <= 0.5:
            raise ConfigurationError(f"hue strength must be in [0, 0.5], got {self.hue}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} strength must be >= 0")


def identity_policy() -> AugmentPolicy:
    return AugmentPolicy(
        crop_scale=(1.0, 1.0), flip_prob=0.0, brightness=0.0, contrast=0.0,
        saturation=0.0, hue=0.0, grayscale_prob=0.0,
    )


def _uniform(lo: float, hi: float, generator: torch.Generator) -> float:
    return float(torch.rand((), generator=generator)) * (hi - lo) + lo


def _random_crop(image: torch.Tensor, policy: AugmentPolicy, generator: torch.Generator):
    _, h, w = image.shape
    area_frac = _uniform(*policy.crop_scale, generator)
    log_ratio = _uniform(float(np.log(3 / 4)), float(np.log(4 / 3)), generator)
    ratio = float(np.exp(log_ratio))
    area = area_frac * h * w
    ch = max(1, min(h, int(round(np.sqrt(area / ratio)))))
    cw = max(1, min(w, int(round(np.sqrt(area * ratio)))))
    top = int(torch.randint(0, h - ch + 1, (), generator=generator))
    left = int(torch.randint(0, w - cw + 1, (), generator=generator))
    crop = image[:, top : top + ch, left : left + cw]
    return TF.resize(crop, [h, w], antialias=False)


def augment_once(image: torch.Tensor, policy: AugmentPolicy, generator: torch.Generator) -> torch.Tensor:
    """One sampled transform of a [0, 1] image, same resolution out."""
    out = image
    if policy.crop_scale != (1.0, 1.0):
        out = _random_crop(out, policy, generator)
    if policy.flip_prob > 0 and _uniform(0, 1, generator) < policy.flip_prob:
        out = TF.horizontal_flip(out)
    if policy.brightness > 0:
        out = TF.adjust_brightness(out, _uniform(max(0, 1 - policy.brightness), 1 + policy.brightness, generator))
    if policy.contrast > 0:
        out = TF.adjust_contrast(out, _uniform(max(0, 1 - policy.contrast), 1 + policy.contrast, generator))
    if policy.saturation > 0:
        out = TF.adjust_saturation(out, _uniform(max(0, 1 - policy.saturation), 1 + policy.saturation, generator))
    if policy.hue > 0:
        out = TF.adjust_hue(out, _uniform(-policy.hue, policy.hue, generator))
    if policy.grayscale_prob > 0 and _uniform(0, 1, generator) < policy.grayscale_prob:
        out = TF.rgb_to_grayscale(out, num_output_channels=out.shape[0])
    return out.clamp(0.0, 1.0)


def random_views(
    image: torch.Tensor,
    policy: AugmentPolicy,
    count: int = 2,
    generator: torch.Generator | None = None,
) -> list[torch.Tensor]:
    """``count`` independently sampled views of one image.

    Without an explicit generator a fresh one seeded from ``policy.seed`` is
    used, making the output a pure function of (image, policy, count).
    """
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(policy.seed)
    return [augment_once(image, policy, generator) for _ in range(count)]


@dataclass
class BatchItem:
    image: torch.Tensor  # raw [0, 1], (C, H, W)
    label: int  # class label, or BACKGROUND_LABEL for background items
    role: BatchRole
    origin_id: str


@dataclass
class MultiviewBatch:
    """The effective contrastive batch: 2n anchors plus b background items."""

    items: list[BatchItem]
    num_originals: int
    num_background: int
    branch_counts: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)

    def __post_init__(self):
        for item in self.items:
            is_background = item.role is BatchRole.BACKGROUND_NEGATIVE
            if is_background != (item.label == BACKGROUND_LABEL):
                raise ContractViolation(
                    f"item from {item.origin_id}: role {item.role.value} inconsistent "
                    f"with label {item.label}"
                )
        if len(self.background_items()) != self.num_background:
            raise ContractViolation(
                f"background count {self.num_background} does not match items"
            )

    def anchor_items(self) -> list[BatchItem]:
        return [i for i in self.items if i.role is not BatchRole.BACKGROUND_NEGATIVE]

    def background_items(self) -> list[BatchItem]:
        return [i for i in self.items if i.role is BatchRole.BACKGROUND_NEGATIVE]

    def anchor_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        anchors = self.anchor_items()
        images = torch.stack([i.image for i in anchors])
        labels = torch.tensor([i.label for i in anchors], dtype=torch.long)
        return images, labels

    def background_images(self) -> torch.Tensor | None:
        bg = self.background_items()
        if not bg:
            return None
        return torch.stack([i.image for i in bg])


def build_supcon_batch(
    images: torch.Tensor,
    labels: torch.Tensor,
    ids: list[str],
    policy: AugmentPolicy,
    generator: torch.Generator | None = None,
) -> MultiviewBatch:
    """Plain two-view batch: every original contributes 2 random-view anchors."""
    items = []
    for i in range(images.shape[0]):
        for view in random_views(images[i], policy, 2, generator):
            items.append(BatchItem(view, int(labels[i]), BatchRole.RANDOM_VIEW, ids[i]))
    return MultiviewBatch(items, num_originals=images.shape[0], num_background=0)


def build_multiview_batch(
    images: torch.Tensor,
    labels: torch.Tensor,
    ids: list[str],
    model,
    policy: AugmentPolicy,
    background_mode: bool,
    mask_spec: MaskSpec | None = None,
    explainer=None,
    normalizer=None,
    generator: torch.Generator | None = None,
    gradcam_target: str = "true_label",
    scenario_a_include_view: bool = True,
    fill_value=None,
) -> MultiviewBatch:
    """Explanation-driven batch per the three routing branches.

    ``images`` are raw [0, 1]; ``normalizer`` (if given) maps them to model
    input space for the saliency and classification passes. The model is
    used strictly in inference mode; its parameters receive no gradients
    from anything done here. If the explainer fails on an example, that
    example falls back to branch (c) with a warning.
    """
    if mask_spec is None:
        mask_spec = MaskSpec()
    if explainer is None:
        explainer = compute_saliency
    if gradcam_target not in ("true_label", "predicted_label"):
        raise ConfigurationError(f"unknown gradcam_target {gradcam_target!r}")
    n = images.shape[0]
    norm = normalizer if normalizer is not None else (lambda x: x)

    was_training = model.training
    model.eval()
    try:
        model_in = norm(images)
        if gradcam_target == "true_label":
            targets = labels.clone()
        else:
            with torch.no_grad():
                targets = model.logits(model_in).argmax(dim=1)

        maps = None
        failed: set[int] = set()
        try:
            maps = explainer(model, model_in, targets)
        except Exception:
            maps = torch.zeros(n, *images.shape[-2:], dtype=images.dtype)
            for i in range(n):
                try:
                    maps[i] = explainer(model, model_in[i : i + 1], targets[i : i + 1])[0]
                except Exception as exc:
                    failed.add(i)
                    logger.warning(
                        "explainer failed on %s (%s); falling back to random views",
                        ids[i], exc,
                    )

        masked = apply_mask(images, maps, mask_spec, fill_value)
        with torch.no_grad():
            preds = model.logits(norm(masked)).argmax(dim=1)
    finally:
        if was_training:
            model.train()

    items = []
    branch_counts = {"a": 0, "b": 0, "c": 0}
    predictions = {}
    num_background = 0
    for i in range(n):
        label = int(labels[i])
        views = random_views(images[i], policy, 2, generator)
        pred = int(preds[i])
        predictions[ids[i]] = pred
        correct = pred == label and i not in failed
        if correct:
            branch_counts["a"] += 1
            items.append(BatchItem(masked[i], label, BatchRole.MASKED_POSITIVE, ids[i]))
            if scenario_a_include_view:
                items.append(BatchItem(views[0], label, BatchRole.RANDOM_VIEW, ids[i]))
        else:
            items.append(BatchItem(views[0], label, BatchRole.RANDOM_VIEW, ids[i]))
            items.append(BatchItem(views[1], label, BatchRole.RANDOM_VIEW, ids[i]))
            if background_mode and i not in failed:
                branch_counts["b"] += 1
                num_background += 1
                items.append(
                    BatchItem(masked[i], BACKGROUND_LABEL, BatchRole.BACKGROUND_NEGATIVE, ids[i])
                )
            else:
                branch_counts["c"] += 1

    batch = MultiviewBatch(
        items,
        num_originals=n,
        num_background=num_background,
        branch_counts=branch_counts,
        predictions=predictions,
    )
    if scenario_a_include_view and len(batch.anchor_items()) != 2 * n:
        raise ContractViolation(
            f"anchor count {len(batch.anchor_items())} != 2n = {2 * n}"
        )
    return batch


def dump_batch_debug(batch: MultiviewBatch, out_dir, batch_index: int) -> Path:
    """Append one manifest line per original to batches.jsonl and dump masked
    images as PNGs. Debugging aid, off by default in training."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "masked").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "batches.jsonl"
    branch_of = {}
    for item in batch.items:
        if item.role is BatchRole.MASKED_POSITIVE:
            branch_of[item.origin_id] = "a"
        elif item.role is BatchRole.BACKGROUND_NEGATIVE:
            branch_of[item.origin_id] = "b"
    masked_paths = {}
    for item in batch.items:
        if item.role in (BatchRole.MASKED_POSITIVE, BatchRole.BACKGROUND_NEGATIVE):
            arr = np.round(item.image.numpy().transpose(1, 2, 0) * 255).astype(np.uint8)
            path = out_dir / "masked" / f"b{batch_index:04d}_{item.origin_id}.png"
            Image.fromarray(arr).save(path)
            masked_paths[item.origin_id] = str(path)
    with manifest.open("a") as fh:
        for origin_id in dict.fromkeys(i.origin_id for i in batch.items):
            fh.write(json.dumps({
                "batch": batch_index,
                "example_id": origin_id,
                "branch": branch_of.get(origin_id, "c"),
                "prediction": batch.predictions.get(origin_id),
                "masked_image": masked_paths.get(origin_id),
            }, sort_keys=True) + "\n")
    return manifest
