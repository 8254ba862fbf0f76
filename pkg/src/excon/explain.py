"""Gradient-weighted class activation maps and the masking operators built on them.

The saliency pipeline has three stages: a raw class-activation map at the
final-conv resolution (channel activations weighted by spatially averaged
logit gradients, then ReLU), bilinear upsampling plus per-image min-max
normalization to [0, 1] at input resolution, and one of two masking
operators (threshold the least-salient pixels away, or retain only the
top-p% most salient pixels). The map computation is the only stage that
touches the model; everything downstream is pure tensor arithmetic.

Other saliency explainers can be plugged into the batch builder and the
explanation-quality metric: anything with the
``(model, images, target_classes) -> maps in [0, 1]`` signature of
:func:`compute_saliency` qualifies.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, ContractViolation
from .models import ExConModel


@dataclass
class SaliencyMap:
    """Normalized per-example importance map at input resolution.

    ``values`` lie in [0, 1] with min exactly 0 and max exactly 1 unless the
    raw map was constant (then all zeros). ``raw_min``/``raw_max`` are the
    pre-normalization bounds, kept for the export sidecar.
    """

    values: torch.Tensor
    target_class: int = -1
    source_example_id: str = ""
    raw_min: float = 0.0
    raw_max: float = 0.0

    def __post_init__(self):
        v = self.values
        if v.dim() != 2:
            raise ContractViolation(f"saliency values must be 2-D, got shape {tuple(v.shape)}")
        lo, hi = float(v.min()), float(v.max())
        if lo < 0.0 or hi > 1.0:
            raise ContractViolation(f"saliency values outside [0, 1]: min {lo}, max {hi}")
        if hi > 0.0 and (lo != 0.0 or hi != 1.0):
            raise ContractViolation(
                f"non-constant saliency must span [0, 1] after normalization, "
                f"got [{lo}, {hi}]"
            )


@dataclass
class MaskSpec:
    """Which masking operator to apply and what to put in masked pixels.

    ``threshold`` mode drops pixels whose saliency falls below ``threshold``
    (0.5 by default); ``top_percent`` mode keeps only the ``percent`` most
    salient pixels (the evaluation suite uses 15/30/45). Fill is black or
    the per-channel dataset mean.
    """

    mode: str = "threshold"
    threshold: float = 0.5
    percent: float = 15.0
    fill: str = "zeros"

    def __post_init__(self):
        if self.mode not in ("threshold", "top_percent"):
            raise ConfigurationError(f"unknown mask mode {self.mode!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must be in [0, 1], got {self.threshold}")
        if not 0.0 < self.percent <= 100.0:
            raise ConfigurationError(f"percent must be in (0, 100], got {self.percent}")
        if self.fill not in ("zeros", "dataset_mean"):
            raise ConfigurationError(f"unknown fill {self.fill!r}")


def gradcam_batch(
    model: ExConModel, images: torch.Tensor, target_classes: torch.Tensor
) -> torch.Tensor:
    """Raw class-activation maps for a batch, one backward pass total.

    For each example, channel weights are the spatial means of the gradient
    of its target-class logit with respect to the final-conv activations;
    the map is the ReLU of the weighted activation sum. Per-example maps are
    exact despite the single backward pass because no layer mixes examples.

    Returns a detached (N, h', w') tensor, nonnegative.
    """
    n = images.shape[0]
    targets = torch.as_tensor(target_classes, dtype=torch.long)
    if targets.shape != (n,):
        raise ConfigurationError(f"need {n} target classes, got shape {tuple(targets.shape)}")
    num_classes = model.config.num_classes
    if bool((targets < 0).any()) or bool((targets >= num_classes).any()):
        raise IndexError(
            f"target classes must lie in [0, {num_classes}), got "
            f"{sorted(set(targets.tolist()))}"
        )

    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            r, acts = model.encode_with_activations(images.detach())
            logits = model.classify(r)
            selected = logits[torch.arange(n), targets].sum()
            if not acts.requires_grad:
                raise ConfigurationError(
                    "final-conv activations are not on the autograd graph; "
                    "the encoder is not differentiable as configured"
                )
            grads = torch.autograd.grad(selected, acts)[0]
    finally:
        if was_training:
            model.train()

    alpha = grads.mean(dim=(2, 3))  # (N, K)
    raw = F.relu((alpha[:, :, None, None] * acts).sum(dim=1))
    return raw.detach()


def gradcam(model: ExConModel, image: torch.Tensor, target_class: int) -> torch.Tensor:
    """Single-image raw map, shape (h', w'). See :func:`gradcam_batch`."""
    return gradcam_batch(model, image.unsqueeze(0), torch.tensor([target_class]))[0]


def _min_max_normalize(maps: torch.Tensor) -> torch.Tensor:
    flat = maps.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    # Interpolating a constant map leaves float dust in the span; a relative
    # cutoff keeps such maps constant (-> all zeros) instead of normalizing
    # rounding noise into a full-range map.
    constant = span <= hi.abs() * 1e-6
    out = torch.where(constant, torch.zeros_like(maps), (maps - lo) / span.clamp_min(1e-12))
    return out


def normalize_upsample_batch(
    raw_maps: torch.Tensor, size: tuple[int, int], mode: str = "bilinear"
) -> torch.Tensor:
    """Upsample raw maps (N, h', w') to ``size`` and min-max normalize each.

    A constant raw map normalizes to all zeros. ``mode`` is bilinear by
    convention; nearest is available for ablation.
    """
    if mode not in ("bilinear", "nearest"):
        raise ConfigurationError(f"unknown upsample mode {mode!r}")
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    up = F.interpolate(raw_maps.unsqueeze(1), size=size, mode=mode, **kwargs).squeeze(1)
    return _min_max_normalize(up)


def normalize_upsample(
    raw_map: torch.Tensor,
    size: tuple[int, int],
    target_class: int = -1,
    example_id: str = "",
    mode: str = "bilinear",
) -> SaliencyMap:
    """Single-map version of :func:`normalize_upsample_batch` with metadata."""
    up = normalize_upsample_batch(raw_map.unsqueeze(0), size, mode=mode)[0]
    return SaliencyMap(
        values=up,
        target_class=target_class,
        source_example_id=example_id,
        raw_min=float(raw_map.min()),
        raw_max=float(raw_map.max()),
    )


def compute_saliency(
    model: ExConModel, images: torch.Tensor, target_classes: torch.Tensor
) -> torch.Tensor:
    """Normalized input-resolution saliency maps (N, H, W) for a batch.

    This is the default explainer plugged into the augmentation pipeline and
    the explanation-quality metric.
    """
    raw = gradcam_batch(model, images, target_classes)
    return normalize_upsample_batch(raw, images.shape[-2:])


def _saliency_values(saliency) -> torch.Tensor:
    return saliency.values if isinstance(saliency, SaliencyMap) else saliency


def _resolve_fill(images: torch.Tensor, fill, fill_value) -> torch.Tensor:
    channels = images.shape[-3]
    if fill == "zeros":
        return images.new_zeros(channels)
    if fill == "dataset_mean":
        if fill_value is None:
            raise ConfigurationError("fill='dataset_mean' requires fill_value (per-channel means)")
        value = torch.as_tensor(fill_value, dtype=images.dtype)
        if value.shape != (channels,):
            raise ConfigurationError(
                f"fill_value must have shape ({channels},), got {tuple(value.shape)}"
            )
        return value
    raise ConfigurationError(f"unknown fill {fill!r}")


def _apply_keep_mask(images: torch.Tensor, keep: torch.Tensor, fill_color: torch.Tensor):
    # torch.where keeps retained pixels bit-identical to the input.
    fill_img = fill_color.view(1, -1, 1, 1).expand_as(images)
    return torch.where(keep.unsqueeze(-3), images, fill_img)


def _check_resolution(images: torch.Tensor, maps: torch.Tensor):
    if images.shape[-2:] != maps.shape[-2:]:
        raise ContractViolation(
            f"saliency resolution {tuple(maps.shape[-2:])} does not match "
            f"image resolution {tuple(images.shape[-2:])}"
        )


def mask_below_threshold(
    images: torch.Tensor,
    saliency,
    threshold: float,
    fill: str = "zeros",
    fill_value=None,
) -> torch.Tensor:
    """Replace pixels with saliency < threshold by the fill color.

    Works on a single image (C, H, W) with a single map or on batches
    (N, C, H, W) with maps (N, H, W). Pixels at or above the threshold pass
    through untouched.
    """
    single = images.dim() == 3
    imgs = images.unsqueeze(0) if single else images
    maps = _saliency_values(saliency)
    maps = maps.unsqueeze(0) if maps.dim() == 2 else maps
    _check_resolution(imgs, maps)
    keep = maps >= threshold
    out = _apply_keep_mask(imgs, keep, _resolve_fill(imgs, fill, fill_value))
    return out[0] if single else out


def top_percent_keep_mask(maps: torch.Tensor, percent: float) -> torch.Tensor:
    """Boolean masks keeping the ceil(p * H * W / 100) most salient pixels.

    Ties are broken by row-major pixel index (stable sort), so the kept sets
    are nested across increasing percents.
    """
    if not 0.0 < percent <= 100.0:
        raise ConfigurationError(f"percent must be in (0, 100], got {percent}")
    n, h, w = maps.shape
    k = int(np.ceil(percent * h * w / 100.0))
    flat = maps.flatten(1)
    order = torch.argsort(flat, dim=1, descending=True, stable=True)
    keep = torch.zeros_like(flat, dtype=torch.bool)
    keep.scatter_(1, order[:, :k], True)
    return keep.view(n, h, w)


def retain_top_percent(
    images: torch.Tensor,
    saliency,
    percent: float,
    fill: str = "zeros",
    fill_value=None,
) -> torch.Tensor:
    """Keep the top-p% most salient pixels, fill the rest."""
    single = images.dim() == 3
    imgs = images.unsqueeze(0) if single else images
    maps = _saliency_values(saliency)
    maps = maps.unsqueeze(0) if maps.dim() == 2 else maps
    _check_resolution(imgs, maps)
    keep = top_percent_keep_mask(maps, percent)
    out = _apply_keep_mask(imgs, keep, _resolve_fill(imgs, fill, fill_value))
    return out[0] if single else out


def apply_mask(images: torch.Tensor, saliency, spec: MaskSpec, fill_value=None):
    """Dispatch on :class:`MaskSpec` mode."""
    if spec.mode == "threshold":
        return mask_below_threshold(images, saliency, spec.threshold, spec.fill, fill_value)
    return retain_top_percent(images, saliency, spec.percent, spec.fill, fill_value)


def export_saliency(saliency: SaliencyMap, out_dir, stem: str) -> dict:
    """Write a map as grayscale PNG + flat float array + JSON sidecar.

    Returns the paths written, keyed ``png``/``npy``/``json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = saliency.values.detach().cpu().numpy().astype(np.float32)

    png_path = out_dir / f"{stem}.png"
    Image.fromarray(np.round(values * 255).astype(np.uint8), mode="L").save(png_path)

    npy_path = out_dir / f"{stem}.npy"
    np.save(npy_path, values.flatten())

    sidecar = {
        "example_id": saliency.source_example_id,
        "target_class": saliency.target_class,
        "height": int(values.shape[0]),
        "width": int(values.shape[1]),
        "raw_min": saliency.raw_min,
        "raw_max": saliency.raw_max,
    }
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return {"png": png_path, "npy": npy_path, "json": json_path}
