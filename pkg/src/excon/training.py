"""Iterative contrastive/classifier training with explanation-driven batches.

Each epoch runs two phases against disjoint parameter sets: the encoder
phase updates encoder + projection head with the contrastive loss, then the
classifier phase updates only the linear classifier with cross-entropy on
frozen representations. The ``supcon_ori`` method instead runs all encoder
epochs first and all classifier epochs after, matching the classic
two-stage recipe.

Methods:

- ``supcon_ori``: two-stage, random views only.
- ``supcon``: iterative, random views only.
- ``excon``: iterative; from ``excon_start_epoch`` on, saliency-masked
  images replace one view whenever the model still recognizes them.
- ``exconb``: like ``excon``, and misrecognized masked images join the
  batch as extra background negatives.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .augment import AugmentPolicy, build_multiview_batch, build_supcon_batch
from .data import ArrayDataset, Normalizer, compute_normalizer, split_train_val
from .errors import ConfigurationError, NonFiniteLossError
from .evaluation import top1_accuracy
from .explain import MaskSpec
from .losses import LossConfig, ContrastiveBatchView, exconb_loss
from .models import ExConModel, ModelConfig, build_model
from .seeding import SeedStreams, stream_seed

logger = logging.getLogger(__name__)

METHODS = ("supcon_ori", "supcon", "excon", "exconb")


@dataclass
class TrainConfig:
    """Everything the fit loop needs; validated eagerly on construction."""

    method: str = "supcon"
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 0.5
    optimizer: str = "sgd"
    momentum: float = 0.9
    warmup_epochs: int = 10
    temperature: float = 0.1
    # Epoch index from which the saliency pipeline is active; values >= epochs
    # mean the pipeline never fires, which makes excon reproduce supcon.
    excon_start_epoch: int = 0
    background_mode: bool | None = None
    val_fraction: float = 0.2
    seed: int = 0
    loss_reduction: str = "mean"
    empty_positive_policy: str = "skip_anchor"
    mask_threshold: float = 0.5
    mask_fill: str = "zeros"
    gradcam_target: str = "true_label"
    scenario_a_include_view: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.warmup_epochs < 0:
            raise ConfigurationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.excon_start_epoch < 0:
            raise ConfigurationError(f"excon_start_epoch must be >= 0, got {self.excon_start_epoch}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ConfigurationError(f"mask_threshold must be in [0, 1], got {self.mask_threshold}")
        if self.mask_fill not in ("zeros", "dataset_mean"):
            raise ConfigurationError(f"mask_fill must be 'zeros' or 'dataset_mean', got {self.mask_fill!r}")
        if self.gradcam_target not in ("true_label", "predicted_label"):
            raise ConfigurationError(
                f"gradcam_target must be 'true_label' or 'predicted_label', got {self.gradcam_target!r}"
            )
        if self.background_mode is None:
            self.background_mode = self.method == "exconb"
        elif self.background_mode != (self.method == "exconb"):
            raise ConfigurationError(
                f"method {self.method!r} implies background_mode={self.method == 'exconb'}, "
                f"got background_mode={self.background_mode}"
            )
        # Delegated validation for temperature / reduction / policy values.
        self.loss_config()

    @property
    def uses_explainer(self) -> bool:
        return self.method in ("excon", "exconb")

    @property
    def iterative(self) -> bool:
        return self.method != "supcon_ori"

    def loss_config(self) -> LossConfig:
        return LossConfig(
            temperature=self.temperature,
            background_mode=bool(self.background_mode),
            empty_positive_policy=self.empty_positive_policy,
            reduction=self.loss_reduction,
        )

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(mode="threshold", threshold=self.mask_threshold, fill=self.mask_fill)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a given epoch: linear warmup, then cosine decay.

    Warmup ramps base_lr * (e+1)/W over the first W epochs; afterwards the
    rate follows base_lr * 0.5 * (1 + cos(pi * (e-W)/(E-W))). The first
    post-warmup epoch therefore starts exactly at base_lr.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ConfigurationError(f"epoch {epoch} outside schedule range [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


@dataclass
class EpochLog:
    """One record per epoch; fields not touched by a phase stay None."""

    epoch: int
    phase: str
    lr: float
    encoder_loss_mean: float | None = None
    encoder_loss_std: float | None = None
    classifier_loss: float | None = None
    val_top1: float | None = None
    branch_a: int = 0
    branch_b: int = 0
    branch_c: int = 0
    background_total: int = 0
    skipped_batches: int = 0


@dataclass
class FitResult:
    model: ExConModel
    logs: list
    best_state: dict
    best_epoch: int
    best_val_top1: float
    normalizer: Normalizer
    train_set: ArrayDataset
    val_set: ArrayDataset
    config: TrainConfig
    model_config: ModelConfig


def _epoch_order(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _loss_snapshot(cfg: TrainConfig, epoch: int, batch_index: int, view: ContrastiveBatchView) -> dict:
    return {
        "method": cfg.method,
        "epoch": epoch,
        "batch_index": batch_index,
        "temperature": cfg.temperature,
        "num_anchors": int(view.anchor_z.shape[0]),
        "num_background": int(view.background_z.shape[0]),
        "max_abs_z": float(view.anchor_z.detach().abs().max()),
    }


def train_encoder_epoch(
    model: ExConModel,
    train_set: ArrayDataset,
    normalizer: Normalizer,
    cfg: TrainConfig,
    epoch: int,
    optimizer: torch.optim.Optimizer,
    policy: AugmentPolicy,
    order_gen: torch.Generator,
    augment_gen: torch.Generator,
    explainer=None,
) -> dict:
    """One pass of contrastive updates; returns an EpochLog field fragment."""
    loss_cfg = cfg.loss_config()
    use_pipeline = cfg.uses_explainer and epoch >= cfg.excon_start_epoch
    fill_value = normalizer.mean if cfg.mask_fill == "dataset_mean" else None
    losses = []
    branch = {"a": 0, "b": 0, "c": 0}
    background_total = 0
    skipped = 0

    for batch_index, idx in enumerate(_epoch_order(len(train_set), cfg.batch_size, order_gen)):
        images = train_set.images[idx]
        labels = train_set.labels[idx]
        ids = [train_set.ids[int(i)] for i in idx]
        if use_pipeline:
            batch = build_multiview_batch(
                images, labels, ids, model, policy,
                background_mode=bool(cfg.background_mode),
                mask_spec=cfg.mask_spec(),
                normalizer=normalizer,
                generator=augment_gen,
                gradcam_target=cfg.gradcam_target,
                scenario_a_include_view=cfg.scenario_a_include_view,
                fill_value=fill_value,
                explainer=explainer,
            )
            for key in branch:
                branch[key] += batch.branch_counts[key]
            background_total += batch.num_background
        else:
            batch = build_supcon_batch(images, labels, ids, policy, generator=augment_gen)

        anchor_images, anchor_labels = batch.anchor_tensors()
        bg_images = batch.background_images()
        stacked = anchor_images if bg_images is None else torch.cat([anchor_images, bg_images])

        counts = torch.bincount(anchor_labels)
        if int((counts >= 2).sum()) == 0:
            skipped += 1
            logger.warning("encoder epoch %d: batch %d has no positive pairs, skipped", epoch, batch_index)
            continue

        model.train()
        z = model.embed(normalizer(stacked)).z
        n_anchor = anchor_images.shape[0]
        view = ContrastiveBatchView(
            anchor_z=z[:n_anchor],
            anchor_labels=anchor_labels,
            background_z=z[n_anchor:] if bg_images is not None else None,
        )
        loss = exconb_loss(view, loss_cfg)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite contrastive loss at epoch {epoch}, batch {batch_index}",
                snapshot=_loss_snapshot(cfg, epoch, batch_index, view),
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))

    if losses:
        mean = sum(losses) / len(losses)
        var = sum((v - mean) ** 2 for v in losses) / len(losses)
        std = math.sqrt(var)
    else:
        mean = std = None
    return {
        "encoder_loss_mean": mean,
        "encoder_loss_std": std,
        "branch_a": branch["a"],
        "branch_b": branch["b"],
        "branch_c": branch["c"],
        "background_total": background_total,
        "skipped_batches": skipped,
    }


def train_classifier_epoch(
    model: ExConModel,
    train_set: ArrayDataset,
    normalizer: Normalizer,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    policy: AugmentPolicy,
    order_gen: torch.Generator,
    augment_gen: torch.Generator,
) -> float:
    """One cross-entropy pass over frozen representations; returns mean loss."""
    from .augment import random_views

    model.eval()
    losses = []
    for idx in _epoch_order(len(train_set), cfg.batch_size, order_gen):
        views = torch.stack([
            random_views(train_set.images[int(i)], policy, count=1, generator=augment_gen)[0]
            for i in idx
        ])
        labels = train_set.labels[idx]
        with torch.no_grad():
            r = model.encode(normalizer(views))
        logits = model.classify(r)
        loss = F.cross_entropy(logits, labels)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                "non-finite classifier loss",
                snapshot={"method": cfg.method, "batch_examples": int(len(idx))},
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return sum(losses) / len(losses) if losses else float("nan")


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = list(params)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.base_lr)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _clone_state(model: ExConModel) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(
    cfg: TrainConfig,
    dataset: ArrayDataset,
    model_config: ModelConfig,
    policy: AugmentPolicy | None = None,
    explainer=None,
) -> FitResult:
    """Train a model from scratch on ``dataset`` and return the best state.

    The dataset is split train/val with a seed-derived stream, the
    normalizer is fit on the train split only, and every stochastic choice
    (split, init, shuffling, augmentation) draws from its own named stream
    of ``cfg.seed``, so two runs with the same config and seed produce
    identical logs and weights. "Best" means highest validation top-1, ties
    resolved toward the later epoch.
    """
    if model_config.num_classes != dataset.num_classes:
        raise ConfigurationError(
            f"model expects {model_config.num_classes} classes, dataset has {dataset.num_classes}"
        )
    streams = SeedStreams(cfg.seed)
    train_set, val_set = split_train_val(dataset, cfg.val_fraction, streams.torch_gen("split"))
    normalizer = compute_normalizer(train_set)
    model = build_model(model_config, seed=stream_seed(cfg.seed, "init"))
    if policy is None:
        policy = AugmentPolicy(seed=stream_seed(cfg.seed, "augment"))

    encoder_params = list(model.encoder.parameters()) + list(model.projection.parameters())
    enc_opt = _make_optimizer(encoder_params, cfg)
    clf_opt = _make_optimizer(model.classifier.parameters(), cfg)
    order_gen = streams.torch_gen("order")
    augment_gen = streams.torch_gen("augment")

    logs: list[EpochLog] = []
    best_state = _clone_state(model)
    best_epoch, best_val = -1, float("-inf")

    def record_best(epoch: int, val: float):
        nonlocal best_state, best_epoch, best_val
        # Ties go to the later epoch: at equal validation accuracy the
        # longer-trained weights have the more settled representations.
        if val >= best_val:
            best_state, best_epoch, best_val = _clone_state(model), epoch, val

    if cfg.iterative:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            _set_lr(enc_opt, lr)
            _set_lr(clf_opt, lr)
            frag = train_encoder_epoch(
                model, train_set, normalizer, cfg, epoch, enc_opt, policy, order_gen, augment_gen,
                explainer=explainer,
            )
            clf_loss = train_classifier_epoch(
                model, train_set, normalizer, cfg, clf_opt, policy, order_gen, augment_gen,
            )
            val = top1_accuracy(model, val_set, normalizer)
            logs.append(EpochLog(epoch=epoch, phase="joint", lr=lr, classifier_loss=clf_loss,
                                 val_top1=val, **frag))
            record_best(epoch, val)
            logger.info("epoch %d lr %.4f enc %.4f clf %.4f val %.3f",
                        epoch, lr, frag["encoder_loss_mean"] or float("nan"), clf_loss, val)
    else:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            _set_lr(enc_opt, lr)
            frag = train_encoder_epoch(
                model, train_set, normalizer, cfg, epoch, enc_opt, policy, order_gen, augment_gen,
                explainer=explainer,
            )
            logs.append(EpochLog(epoch=epoch, phase="encoder", lr=lr, **frag))
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            _set_lr(clf_opt, lr)
            clf_loss = train_classifier_epoch(
                model, train_set, normalizer, cfg, clf_opt, policy, order_gen, augment_gen,
            )
            val = top1_accuracy(model, val_set, normalizer)
            logs.append(EpochLog(epoch=cfg.epochs + epoch, phase="classifier", lr=lr,
                                 classifier_loss=clf_loss, val_top1=val))
            record_best(cfg.epochs + epoch, val)

    if best_epoch < 0 and cfg.epochs > 0:
        # No epoch produced a validation score (encoder-only schedules with
        # zero classifier epochs cannot happen, so this is belt and braces).
        best_state = _clone_state(model)
    model.load_state_dict(best_state)
    return FitResult(
        model=model,
        logs=logs,
        best_state=best_state,
        best_epoch=best_epoch,
        best_val_top1=best_val if best_epoch >= 0 else float("nan"),
        normalizer=normalizer,
        train_set=train_set,
        val_set=val_set,
        config=cfg,
        model_config=model_config,
    )
