"""Encoder, projection head and linear classifier with unit-norm outputs.

Two encoder families are provided: a 4-block conv net for desk-scale runs
(default) and a reduced-width bottleneck net that mirrors a 50-layer
residual architecture for parity experiments. Both expose the activations
of one designated final convolutional layer, which the saliency explainer
needs, and both end in global average pooling.

The encoder output ``r`` and the projection output ``z`` are explicitly
L2-normalized; the classifier is a single linear layer on normalized ``r``.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DegenerateEmbeddingError

CHECKPOINT_FORMAT = "excon-ckpt-v1"

NORM_EPS = 1e-12


def normalize_rows(x: torch.Tensor) -> torch.Tensor:
    """Divide each row by its L2 norm.

    Raises:
        DegenerateEmbeddingError: if any row norm is below 1e-12; silently
            returning garbage for a zero vector would poison the loss.
    """
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < NORM_EPS).any()):
        bad = int((norms < NORM_EPS).sum())
        raise DegenerateEmbeddingError(
            f"{bad} row(s) have norm < {NORM_EPS:g}; cannot normalize onto the unit sphere"
        )
    return x / norms


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``input_shape`` is (height, width, channels). ``encoder_dim`` and
    ``projection_dim`` default to desk scale (128/32); the reference scale
    used on full datasets is 2048/128.
    """

    input_shape: tuple[int, int, int] = (64, 64, 3)
    encoder_kind: str = "small_conv"
    encoder_dim: int = 128
    projection_dim: int = 32
    num_classes: int = 2
    final_conv_spatial: tuple[int, int] = field(init=False)

    def __post_init__(self):
        h, w, c = self.input_shape
        if self.encoder_kind not in ("small_conv", "resnet_style"):
            raise ConfigurationError(f"unknown encoder_kind {self.encoder_kind!r}")
        if not (self.encoder_dim >= self.projection_dim >= 2):
            raise ConfigurationError(
                f"need encoder_dim >= projection_dim >= 2, got "
                f"{self.encoder_dim} / {self.projection_dim}"
            )
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ConfigurationError(
                f"input height/width must be multiples of 8 (got {h}x{w}); "
                "the deepest encoder downsamples spatially by 8"
            )
        if self.encoder_kind == "resnet_style" and self.encoder_dim % 32:
            raise ConfigurationError(
                f"resnet_style needs encoder_dim divisible by 32, got {self.encoder_dim}"
            )
        if c not in (1, 3):
            raise ConfigurationError(f"input channels must be 1 or 3, got {c}")
        stride = 4 if self.encoder_kind == "small_conv" else 8
        self.final_conv_spatial = (h // stride, w // stride)


def _group_norm(channels: int) -> nn.GroupNorm:
    # Stateless normalization: BatchNorm running stats would mutate encoder
    # buffers during the frozen-encoder classifier phase.
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class SmallConvEncoder(nn.Module):
    """Four conv blocks (conv3x3 -> GroupNorm -> ReLU), two 2x2 pools, GAP.

    The fourth block's ReLU output is the designated final-conv activation.
    Downsampling stops at 1/4 resolution: a coarser grid leaves saliency
    peaks quantized to cells wider than the margin between object and
    background, which caps localization accuracy on small inputs.
    """

    def __init__(self, in_channels: int, encoder_dim: int):
        super().__init__()
        # Width ramp tied to encoder_dim so compute scales with the config.
        widths = [max(8, encoder_dim // 4), max(16, encoder_dim // 2), encoder_dim, encoder_dim]
        blocks = []
        c_in = in_channels
        for i, c_out in enumerate(widths):
            blocks.append(nn.Conv2d(c_in, c_out, 3, padding=1))
            blocks.append(_group_norm(c_out))
            blocks.append(nn.ReLU())
            if i < 2:
                blocks.append(nn.MaxPool2d(2))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = encoder_dim

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        """Final-conv activations, shape (N, encoder_dim, H/4, W/4)."""
        return self.blocks(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x).mean(dim=(2, 3))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, c_in: int, width: int, stride: int = 1):
        super().__init__()
        c_out = width * self.expansion
        self.conv1 = nn.Conv2d(c_in, width, 1, bias=False)
        self.n1 = _group_norm(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.n2 = _group_norm(width)
        self.conv3 = nn.Conv2d(width, c_out, 1, bias=False)
        self.n3 = _group_norm(c_out)
        self.relu = nn.ReLU()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), _group_norm(c_out)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.n1(self.conv1(x)))
        out = self.relu(self.n2(self.conv2(out)))
        out = self.n3(self.conv3(out))
        return self.relu(out + self.shortcut(x))


class ResNetStyleEncoder(nn.Module):
    """50-layer bottleneck net at reduced width: 3/4/6/3 blocks per stage.

    The stem keeps full resolution (stride-2 stems waste the few pixels of
    desk-scale inputs); stages 2-4 halve it, for a total downsample of 8.
    Final stage channels equal ``encoder_dim``, so GAP output needs no extra
    linear layer, as in the full-width original.
    """

    def __init__(self, in_channels: int, encoder_dim: int):
        super().__init__()
        base = encoder_dim // 32
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base * 4, 3, padding=1, bias=False),
            _group_norm(base * 4),
            nn.ReLU(),
        )
        stages = []
        c_in = base * 4
        for stage, (blocks, stride) in enumerate([(3, 1), (4, 2), (6, 2), (3, 2)]):
            width = base * (2**stage)
            for b in range(blocks):
                stages.append(Bottleneck(c_in, width, stride if b == 0 else 1))
                c_in = width * Bottleneck.expansion
        self.stages = nn.Sequential(*stages)
        self.out_dim = encoder_dim

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x).mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    """One-hidden-layer ReLU MLP, hidden width = encoder_dim."""

    def __init__(self, encoder_dim: int, projection_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(encoder_dim, encoder_dim),
            nn.ReLU(),
            nn.Linear(encoder_dim, projection_dim),
        )

    def forward(self, r):
        return self.net(r)


@dataclass
class EmbeddingSet:
    """Per-example encoder representation and projection, both unit-norm rows."""

    r: torch.Tensor
    z: torch.Tensor

    def __post_init__(self):
        for name, m in (("r", self.r), ("z", self.z)):
            err = float((m.detach().norm(dim=-1) - 1.0).abs().max())
            if err > 1e-5:
                raise DegenerateEmbeddingError(
                    f"EmbeddingSet.{name} rows deviate from unit norm by {err:.2e}"
                )


class ExConModel(nn.Module):
    """Encoder + projection head + linear classifier.

    ``encode``/``project``/``classify`` implement the three stages of the
    pipeline; all three are pure functions of their inputs given fixed
    parameters and eval mode.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        h, w, c = config.input_shape
        if config.encoder_kind == "small_conv":
            self.encoder = SmallConvEncoder(c, config.encoder_dim)
        else:
            self.encoder = ResNetStyleEncoder(c, config.encoder_dim)
        self.projection = ProjectionHead(config.encoder_dim, config.projection_dim)
        self.classifier = nn.Linear(config.encoder_dim, config.num_classes)

    def _check_images(self, images: torch.Tensor):
        h, w, c = self.config.input_shape
        if images.dim() != 4 or tuple(images.shape[1:]) != (c, h, w):
            raise ConfigurationError(
                f"expected image batch of shape (N, {c}, {h}, {w}), "
                f"got {tuple(images.shape)}"
            )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Images (N, C, H, W) -> unit-norm representations r (N, encoder_dim)."""
        self._check_images(images)
        return normalize_rows(self.encoder(images))

    def encode_with_activations(self, images: torch.Tensor):
        """Like :meth:`encode` but also returns the final-conv activations.

        The activations stay on the autograd graph so the explainer can take
        gradients of a logit with respect to them.
        """
        self._check_images(images)
        acts = self.encoder.forward_features(images)
        r = normalize_rows(acts.mean(dim=(2, 3)))
        return r, acts

    def project(self, r: torch.Tensor) -> torch.Tensor:
        """Representations r (N, encoder_dim) -> unit-norm projections z."""
        if r.shape[-1] != self.config.encoder_dim:
            raise ConfigurationError(
                f"project expects width {self.config.encoder_dim}, got {r.shape[-1]}"
            )
        return normalize_rows(self.projection(r))

    def classify(self, r: torch.Tensor) -> torch.Tensor:
        """Representations r (N, encoder_dim) -> unscaled logits (N, num_classes)."""
        if r.shape[-1] != self.config.encoder_dim:
            raise ConfigurationError(
                f"classify expects width {self.config.encoder_dim}, got {r.shape[-1]}"
            )
        return self.classifier(r)

    def embed(self, images: torch.Tensor) -> EmbeddingSet:
        r = self.encode(images)
        return EmbeddingSet(r=r, z=self.project(r))

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.classify(self.encode(images))


def build_model(config: ModelConfig, seed: int | None = None) -> ExConModel:
    """Construct a model; with ``seed``, parameter init is reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return ExConModel(config)


def _config_text(config: ModelConfig) -> str:
    h, w, c = config.input_shape
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"input_height = {h}",
        f"input_width = {w}",
        f"input_channels = {c}",
        f"encoder_kind = {config.encoder_kind}",
        f"encoder_dim = {config.encoder_dim}",
        f"projection_dim = {config.projection_dim}",
        f"num_classes = {config.num_classes}",
    ]
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    if kv.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(
            f"unsupported checkpoint format {kv.get('format')!r}, "
            f"expected {CHECKPOINT_FORMAT!r}"
        )
    return ModelConfig(
        input_shape=(int(kv["input_height"]), int(kv["input_width"]), int(kv["input_channels"])),
        encoder_kind=kv["encoder_kind"],
        encoder_dim=int(kv["encoder_dim"]),
        projection_dim=int(kv["projection_dim"]),
        num_classes=int(kv["num_classes"]),
    )


def save_checkpoint(model: ExConModel, path):
    """Write a single .npz archive: parameter arrays keyed by layer path plus
    the model config as key=value text under ``__meta__``."""
    arrays = {
        key: value.detach().cpu().numpy()
        for key, value in model.state_dict().items()
    }
    np.savez(path, __meta__=np.array(_config_text(model.config)), **arrays)


def load_checkpoint(path) -> ExConModel:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive:
            raise ConfigurationError(f"{path} is not an {CHECKPOINT_FORMAT} archive")
        config = _parse_config_text(str(archive["__meta__"]))
        state = {
            key: torch.from_numpy(np.array(archive[key]))
            for key in archive.files
            if key != "__meta__"
        }
    model = ExConModel(config)
    model.load_state_dict(state)
    model.eval()
    return model
