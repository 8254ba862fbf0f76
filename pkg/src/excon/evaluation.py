"""Evaluation suite: accuracy, explanation quality, FGSM robustness, calibration.

Explanation quality follows the retention protocol: keep only the top-p%
most salient pixels of each image and compare the target-class softmax
score before (Y) and after (O) masking. Reported are the average relative
drop max(0, Y-O)/Y, the average relative increase max(0, O-Y)/Y, and the
fraction of examples whose score dropped, all as percentages.

FGSM perturbs inputs by budget * sign(input gradient of the cross-entropy
loss) and clips to the valid pixel range; ``use_sign=False`` reproduces the
raw-gradient variant. Calibration is the standard binned estimator: equal-
width confidence bins, weighted mean absolute gap between per-bin accuracy
and per-bin mean confidence.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import ArrayDataset, Normalizer
from .errors import ConfigurationError, ContractViolation
from .explain import compute_saliency, retain_top_percent
from .models import ExConModel

logger = logging.getLogger(__name__)


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def _identity(x):
    return x


def top1_accuracy(
    model: ExConModel,
    dataset: ArrayDataset,
    normalizer: Normalizer | None = None,
    batch_size: int = 256,
) -> float:
    """Fraction of examples whose argmax logit equals the true label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    norm = normalizer or _identity
    model.eval()
    correct = 0
    with torch.no_grad():
        for sl in _batches(len(dataset), batch_size):
            logits = model.logits(norm(dataset.images[sl]))
            correct += int((logits.argmax(dim=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


@dataclass
class ExplanationQualityReport:
    retention_percent: float
    average_drop_pct: float
    average_increase_pct: float
    rate_of_drop_pct: float
    examples_evaluated: int
    examples_excluded: int = 0


def drop_increase_stats(full_scores, masked_scores) -> tuple[float, float, float]:
    """(average drop %, average increase %, rate of drop %) from score pairs.

    ``full_scores`` (Y) and ``masked_scores`` (O) are target-class softmax
    scores before and after retention masking; all Y must be positive.
    """
    y = np.asarray(full_scores, dtype=np.float64)
    o = np.asarray(masked_scores, dtype=np.float64)
    if y.shape != o.shape or y.size == 0:
        raise ValueError("need equal-length, non-empty score arrays")
    if (y <= 0).any():
        raise ValueError("full-image scores must be positive (guard exclusions upstream)")
    drop = float(np.mean(np.maximum(0.0, y - o) / y) * 100.0)
    increase = float(np.mean(np.maximum(0.0, o - y) / y) * 100.0)
    rate = float(np.mean(y > o) * 100.0)
    return drop, increase, rate


def explanation_quality(
    model: ExConModel,
    dataset: ArrayDataset,
    normalizer: Normalizer | None = None,
    percent: float = 15.0,
    target: str = "predicted",
    fill: str = "zeros",
    fill_value=None,
    explainer=None,
    batch_size: int = 64,
) -> ExplanationQualityReport:
    """Retention-masking score-change statistics over a dataset.

    The target class defaults to the model's prediction on the full image
    (``target="true"`` scores the true label instead). Saliency maps are
    recomputed here with the evaluated model. Examples whose full-image
    score is exactly zero are excluded and counted.
    """
    if target not in ("predicted", "true"):
        raise ConfigurationError(f"unknown target {target!r}")
    if len(dataset) == 0:
        raise ValueError("cannot evaluate explanation quality on an empty dataset")
    norm = normalizer or _identity
    saliency_fn = explainer or compute_saliency
    model.eval()
    full_scores, masked_scores = [], []
    for sl in _batches(len(dataset), batch_size):
        images = dataset.images[sl]
        model_in = norm(images)
        with torch.no_grad():
            probs = F.softmax(model.logits(model_in), dim=1)
        classes = probs.argmax(dim=1) if target == "predicted" else dataset.labels[sl]
        y = probs[torch.arange(images.shape[0]), classes]
        maps = saliency_fn(model, model_in, classes)
        retained = retain_top_percent(images, maps, percent, fill, fill_value)
        with torch.no_grad():
            probs_masked = F.softmax(model.logits(norm(retained)), dim=1)
        o = probs_masked[torch.arange(images.shape[0]), classes]
        full_scores.append(y.double().numpy())
        masked_scores.append(o.double().numpy())
    y = np.concatenate(full_scores)
    o = np.concatenate(masked_scores)
    keep = y > 0
    excluded = int((~keep).sum())
    if excluded:
        logger.warning("explanation_quality: excluded %d example(s) with zero full-image score", excluded)
    drop, increase, rate = drop_increase_stats(y[keep], o[keep])
    return ExplanationQualityReport(
        retention_percent=percent,
        average_drop_pct=drop,
        average_increase_pct=increase,
        rate_of_drop_pct=rate,
        examples_evaluated=int(keep.sum()),
        examples_excluded=excluded,
    )


@dataclass
class AttackConfig:
    """FGSM budget in raw pixel units; 4/255 and 8/255 are the standard picks."""

    budget: float
    use_sign: bool = True

    def __post_init__(self):
        if self.budget <= 0:
            raise ConfigurationError(f"attack budget must be > 0, got {self.budget}")


def fgsm_attack(
    model: ExConModel,
    images: torch.Tensor,
    labels: torch.Tensor,
    budget: float,
    normalizer: Normalizer | None = None,
    use_sign: bool = True,
    pixel_range: tuple[float, float] = (0.0, 1.0),
) -> torch.Tensor:
    """Single-step gradient attack on raw-pixel images.

    Returns clip(x + budget * sign(grad)) (or budget * grad without sign),
    so the max-norm of the perturbation is at most ``budget``, with equality
    except where clipping binds. Examples with an all-zero gradient stay
    unperturbed and are logged.
    """
    if budget < 0:
        raise ConfigurationError(f"budget must be >= 0, got {budget}")
    norm = normalizer or _identity
    model.eval()
    x = images.detach().clone().requires_grad_(True)
    logits = model.logits(norm(x))
    # Summed loss keeps per-example gradients unscaled by the batch size.
    loss = F.cross_entropy(logits, labels, reduction="sum")
    grad = torch.autograd.grad(loss, x)[0]
    zero_grad = int((grad.flatten(1).abs().sum(dim=1) == 0).sum())
    if zero_grad:
        logger.info("fgsm_attack: %d example(s) with zero input gradient left unperturbed", zero_grad)
    step = grad.sign() if use_sign else grad
    perturbed = (x + budget * step).clamp(*pixel_range)
    return perturbed.detach()


def robust_accuracy(
    model: ExConModel,
    dataset: ArrayDataset,
    normalizer: Normalizer | None = None,
    attack: AttackConfig = AttackConfig(budget=8 / 255),
    batch_size: int = 128,
) -> float:
    """Top-1 accuracy on FGSM-perturbed inputs, attacked model = evaluated model."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate robust accuracy on an empty dataset")
    correct = 0
    for sl in _batches(len(dataset), batch_size):
        adv = fgsm_attack(
            model, dataset.images[sl], dataset.labels[sl], attack.budget,
            normalizer, attack.use_sign,
        )
        with torch.no_grad():
            norm = normalizer or _identity
            logits = model.logits(norm(adv))
        correct += int((logits.argmax(dim=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


@dataclass
class CalibrationReport:
    """Binned calibration table plus the scalar estimate.

    ``bins`` holds one dict per bin: count, accuracy, confidence (None for
    empty bins). Bins partition [0, 1] into equal widths, right-inclusive.
    """

    num_bins: int
    bins: list
    ece_hat: float

    @property
    def total(self) -> int:
        return sum(b["count"] for b in self.bins)


def ece(confidences, correct, num_bins: int = 10) -> CalibrationReport:
    """Expected-calibration-error estimate over (confidence, correctness) pairs.

    Bin m covers ((m-1)/M, m/M] with confidence 0 assigned to the first bin;
    the estimate is sum_m |B_m|/n * |acc(B_m) - conf(B_m)| with empty bins
    contributing nothing.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("cannot compute calibration error on empty input")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness flags must align")
    if (conf < 0).any() or (conf > 1).any():
        raise ContractViolation("confidences must lie in [0, 1]")
    if num_bins < 1:
        raise ConfigurationError(f"need at least 1 bin, got {num_bins}")

    idx = np.ceil(conf * num_bins).astype(int) - 1
    idx = np.clip(idx, 0, num_bins - 1)
    bins = []
    total = conf.size
    ece_hat = 0.0
    for m in range(num_bins):
        members = idx == m
        count = int(members.sum())
        if count:
            acc = float(corr[members].mean())
            mean_conf = float(conf[members].mean())
            ece_hat += (count / total) * abs(acc - mean_conf)
        else:
            acc = mean_conf = None
        bins.append({"count": count, "accuracy": acc, "confidence": mean_conf})
    return CalibrationReport(num_bins=num_bins, bins=bins, ece_hat=float(ece_hat))


def model_confidences(
    model: ExConModel,
    dataset: ArrayDataset,
    normalizer: Normalizer | None = None,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """(max softmax score, correctness flag) per example, feeding :func:`ece`."""
    if len(dataset) == 0:
        raise ValueError("cannot compute confidences on an empty dataset")
    norm = normalizer or _identity
    model.eval()
    confs, correct = [], []
    with torch.no_grad():
        for sl in _batches(len(dataset), batch_size):
            probs = F.softmax(model.logits(norm(dataset.images[sl])), dim=1)
            top, pred = probs.max(dim=1)
            confs.append(top.double().numpy())
            correct.append((pred == dataset.labels[sl]).numpy())
    return np.concatenate(confs), np.concatenate(correct)


def export_embeddings(
    model: ExConModel,
    dataset: ArrayDataset,
    path,
    which: str = "z",
    normalizer: Normalizer | None = None,
    roles: list | None = None,
    batch_size: int = 256,
):
    """Write one CSV row per example: id, label, role, embedding floats.

    ``which`` selects the encoder representation r or the projection z.
    Floats are written with full round-trip precision, so re-exporting from
    the same model is byte-identical.
    """
    if which not in ("r", "z"):
        raise ConfigurationError(f"which must be 'r' or 'z', got {which!r}")
    if roles is not None and len(roles) != len(dataset):
        raise ConfigurationError("roles must align with the dataset")
    norm = normalizer or _identity
    model.eval()
    rows = []
    with torch.no_grad():
        for sl in _batches(len(dataset), batch_size):
            emb = model.embed(norm(dataset.images[sl]))
            rows.append((emb.r if which == "r" else emb.z).double().numpy())
    matrix = np.concatenate(rows)
    dim = matrix.shape[1]
    header = "id,label,role," + ",".join(f"e{j}" for j in range(dim))
    lines = [header]
    for i in range(len(dataset)):
        role = roles[i] if roles is not None else "original"
        values = ",".join(repr(float(v)) for v in matrix[i])
        lines.append(f"{dataset.ids[i]},{int(dataset.labels[i])},{role},{values}")
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path
