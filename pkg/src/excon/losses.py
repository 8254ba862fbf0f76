"""Supervised contrastive loss and its background-negative extension.

Two losses share one code path. The plain supervised contrastive loss runs
on a batch of labeled anchors; each anchor i is pulled toward its positives
P(i) (other anchors with the same label) against a denominator over every
other anchor. The extended loss additionally admits *background* rows:
unlabeled embeddings that enter every anchor's denominator as shared
negatives but are never anchors, never positives, and never paired with
each other. With no background rows the two losses coincide exactly.

The closed-form per-anchor gradient is implemented alongside as a test
oracle (:func:`exconb_grad_oracle`); it is never used in training.
"""

from dataclasses import dataclass, field

import torch

from .errors import (
    BatchTooSmallError,
    ConfigurationError,
    ContractViolation,
    NoPositivesError,
)

UNIT_NORM_TOL = 1e-5


@dataclass
class LossConfig:
    """Loss hyperparameters.

    ``background_mode`` records whether misclassified masked images are kept
    as background negatives (the batch builder consults it; the loss itself
    is driven by the presence of background rows). ``reduction`` selects the
    mean over anchors-with-positives (default, keeps the scale comparable
    when batch composition varies) or the plain sum over anchors.
    """

    temperature: float = 0.1
    background_mode: bool = False
    empty_positive_policy: str = "skip_anchor"
    reduction: str = "mean"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.empty_positive_policy not in ("skip_anchor", "error"):
            raise ConfigurationError(
                f"unknown empty_positive_policy {self.empty_positive_policy!r}"
            )
        if self.reduction not in ("mean", "sum"):
            raise ConfigurationError(f"unknown reduction {self.reduction!r}")


@dataclass
class ContrastiveBatchView:
    """Embeddings entering one loss evaluation.

    ``anchor_z`` rows are unit-norm projections of the anchors,
    ``anchor_labels`` their class labels, ``background_z`` the (possibly
    empty) unlabeled background rows. Set ``validate=False`` only in tests
    that deliberately perturb rows off the unit sphere.
    """

    anchor_z: torch.Tensor
    anchor_labels: torch.Tensor
    background_z: torch.Tensor | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.background_z is None:
            self.background_z = self.anchor_z.new_zeros((0, self.anchor_z.shape[1]))
        if self.anchor_z.dim() != 2 or self.background_z.dim() != 2:
            raise ContractViolation("anchor_z and background_z must be 2-D")
        if self.background_z.shape[1] != self.anchor_z.shape[1]:
            raise ContractViolation(
                f"background width {self.background_z.shape[1]} != "
                f"anchor width {self.anchor_z.shape[1]}"
            )
        if self.anchor_labels.shape != (self.anchor_z.shape[0],):
            raise ContractViolation(
                f"anchor_labels shape {tuple(self.anchor_labels.shape)} does not "
                f"match {self.anchor_z.shape[0]} anchors"
            )
        if self.validate:
            for name, m in (("anchor_z", self.anchor_z), ("background_z", self.background_z)):
                if m.shape[0] == 0:
                    continue
                err = float((m.detach().norm(dim=1) - 1.0).abs().max())
                if err > UNIT_NORM_TOL:
                    raise ContractViolation(
                        f"{name} rows deviate from unit norm by {err:.2e} "
                        f"(tolerance {UNIT_NORM_TOL:g})"
                    )

    @property
    def num_anchors(self) -> int:
        return self.anchor_z.shape[0]

    @property
    def num_background(self) -> int:
        return self.background_z.shape[0]

    def positives_of(self, i: int) -> list[int]:
        """Indices of the anchors sharing anchor i's label, i excluded."""
        label = self.anchor_labels[i]
        return [
            p
            for p in range(self.num_anchors)
            if p != i and bool(self.anchor_labels[p] == label)
        ]

    def drop_background(self) -> "ContrastiveBatchView":
        return ContrastiveBatchView(
            anchor_z=self.anchor_z,
            anchor_labels=self.anchor_labels,
            background_z=None,
            validate=False,
        )


def _contrastive_loss(view: ContrastiveBatchView, cfg: LossConfig) -> torch.Tensor:
    n = view.num_anchors
    if n < 2:
        raise BatchTooSmallError(f"need at least 2 anchors, got {n}")
    z_all = torch.cat([view.anchor_z, view.background_z], dim=0)
    sim = (view.anchor_z @ z_all.T) / cfg.temperature  # (n, n + b)

    denom_mask = torch.ones_like(sim, dtype=torch.bool)
    idx = torch.arange(n)
    denom_mask[idx, idx] = False  # anchor never contrasts with itself

    # Max-subtraction before exp: exact identity for value and gradient
    # since the per-row max is a detached constant.
    row_max = sim.masked_fill(~denom_mask, float("-inf")).max(dim=1).values.detach()
    shifted = sim - row_max[:, None]
    exp_sum = (shifted.exp() * denom_mask).sum(dim=1)
    log_prob = shifted - exp_sum.log()[:, None]

    pos_mask = view.anchor_labels[:, None] == view.anchor_labels[None, :]
    pos_mask[idx, idx] = False
    pos_counts = pos_mask.sum(dim=1)
    counted = pos_counts > 0
    if cfg.empty_positive_policy == "error" and not bool(counted.all()):
        missing = (~counted).nonzero().flatten().tolist()
        raise NoPositivesError(f"anchors {missing} have no positives in the batch")
    if not bool(counted.any()):
        # Every anchor is positive-less under skip policy; zero with a live
        # graph so callers can still .backward() harmlessly.
        return view.anchor_z.sum() * 0.0

    per_anchor = -(log_prob[:, :n] * pos_mask).sum(dim=1)[counted] / pos_counts[counted]
    if cfg.reduction == "sum":
        return per_anchor.sum()
    return per_anchor.mean()


def supcon_loss(view: ContrastiveBatchView, cfg: LossConfig) -> torch.Tensor:
    """Supervised contrastive loss over a background-free batch view.

    Each anchor's term averages -log softmax(z_i . z_p / temperature) over
    its positives p, with the softmax denominator running over all other
    anchors. Anchors without positives follow ``cfg.empty_positive_policy``.
    """
    if view.num_background:
        raise ContractViolation(
            f"supcon_loss expects no background rows, got {view.num_background}; "
            "use exconb_loss"
        )
    return _contrastive_loss(view, cfg)


def exconb_loss(view: ContrastiveBatchView, cfg: LossConfig) -> torch.Tensor:
    """Contrastive loss with background rows enlarging every denominator.

    Identical to :func:`supcon_loss` except that each anchor's denominator
    runs over all other anchors *and* all background rows. Background rows
    own no loss terms and never appear as positives. With zero background
    rows this reduces to :func:`supcon_loss` exactly.
    """
    return _contrastive_loss(view, cfg)


def contrast_weights(similarities: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax weights over a similarity vector at the given temperature.

    These are the ``w_a`` of the closed-form gradient; they sum to 1 and are
    invariant under joint scaling of similarities and temperature.
    """
    return torch.softmax(similarities / temperature, dim=-1)


def exconb_grad_oracle(
    view: ContrastiveBatchView, cfg: LossConfig, i: int
) -> torch.Tensor:
    """Closed-form gradient of anchor i's own loss term with respect to z_i.

    Evaluates (1 / (temperature * |P(i)|)) * sum_p (sum_a w_a z_a - z_p),
    where a runs over all anchors and background rows except i and w_a are
    the softmax weights of anchor i's similarities. This is the partial
    derivative of the sum-reduced loss restricted to the term anchor i owns;
    cross terms where z_i appears in other anchors' terms are deliberately
    excluded. Verification use only, never part of training.
    """
    n = view.num_anchors
    if not 0 <= i < n:
        raise ConfigurationError(f"anchor index {i} out of range [0, {n})")
    positives = view.positives_of(i)
    if not positives:
        raise NoPositivesError(f"anchor {i} has no positives")

    z_all = torch.cat([view.anchor_z, view.background_z], dim=0)
    others = [a for a in range(z_all.shape[0]) if a != i]
    sims = torch.stack([view.anchor_z[i] @ z_all[a] for a in others])
    w = contrast_weights(sims, cfg.temperature)
    weighted = sum(w[k] * z_all[a] for k, a in enumerate(others))

    grad = torch.zeros_like(view.anchor_z[i])
    for p in positives:
        grad = grad + (weighted - view.anchor_z[p])
    return grad / (cfg.temperature * len(positives))
