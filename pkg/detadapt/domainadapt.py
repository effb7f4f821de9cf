"""Per-level domain discriminators attached to C3/C4/C5 through gradient reversal.

Domain labels: source = 0, target = 1. The optimizer minimizes
``l_class + l_box + (l_d3 + l_d4 + l_d5)``; the reversal layer in front of
each discriminator turns that into ``-lam * L_Di`` for the backbone, which is
the objective reported in the loss log.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .detector import DetLoss, FeaturePyramid, focal_loss
from .errors import ConfigError, ShapeError
from .tensorcore import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    Tensor,
    dropout,
    global_average_pool,
    grad_reverse,
    relu,
    scale,
)


logger = logging.getLogger("detadapt.domainadapt")

SOURCE_LABEL = 0.0
TARGET_LABEL = 1.0
ALL_LEVELS = (3, 4, 5)


@dataclass(frozen=True)
class DomainConfig:
    levels: tuple[int, ...] = ALL_LEVELS
    lam: float = 0.5
    gamma_d: float = 2.0
    alpha_d: float = 0.5
    width: int = 64
    hidden: int = 32
    dropout: float = 0.5

    def __post_init__(self) -> None:
        unknown = sorted(set(self.levels) - set(ALL_LEVELS))
        if unknown:
            raise ConfigError(f"unknown discriminator levels {unknown}; choose from 3, 4, 5")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if not 0.0 <= self.alpha_d <= 1.0:
            raise ConfigError(f"alpha_d must be in [0, 1], got {self.alpha_d}")
        object.__setattr__(self, "levels", tuple(sorted(set(self.levels))))


class PixelDiscriminator(Module):
    """Three 1x1 convs with ReLU between them; one logit per location."""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv2d(in_channels, width, 1, rng)
        self.conv2 = Conv2d(width, width, 1, rng)
        self.conv3 = Conv2d(width, 1, 1, rng)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = relu(self.conv1(x))
        x = relu(self.conv2(x))
        return self.conv3(x)


class PooledDiscriminator(Module):
    """Three stride-2 3x3 conv/BN/ReLU/dropout blocks, global pooling, then FC layers."""

    def __init__(
        self,
        in_channels: int,
        width: int,
        rng: np.random.Generator,
        hidden: int | None = None,
        rate: float = 0.5,
    ) -> None:
        super().__init__()
        self.convs = [
            Conv2d(in_channels if i == 0 else width, width, 3, rng, stride=2, padding=1) for i in range(3)
        ]
        self.norms = [BatchNorm2d(width) for _ in range(3)]
        self.rate = rate
        if hidden is None:
            self.fc = [Linear(width, 1, rng)]
        else:
            self.fc = [Linear(width, hidden, rng), Linear(hidden, 1, rng)]

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = dropout(relu(norm(conv(x))), self.rate, self.training, rng)
        x = global_average_pool(x)
        for i, layer in enumerate(self.fc):
            x = layer(x)
            if i < len(self.fc) - 1:
                x = relu(x)
        return x


def pooled_feature_side(side: int, blocks: int = 3) -> int:
    """Spatial side left after the stride-2 blocks of a pooled discriminator."""
    for _ in range(blocks):
        side = (side + 1) // 2
    return side


def check_batch_sizes(config: DomainConfig, level_sides: dict[int, int], batch_sizes: dict[str, int]) -> None:
    """Raise ``ConfigError`` when a pooled discriminator's last batch norm would see one value per channel."""
    for level in config.levels:
        if level == 3:
            continue
        final = pooled_feature_side(level_sides[level])
        for key, batch in batch_sizes.items():
            if batch * final * final < 2:
                raise ConfigError(
                    f"{key}={batch} is too small for D{level}: its last block sees a {final}x{final} map; "
                    "use at least 2 images per batch or a larger image_size"
                )


def build_discriminator(
    level: int,
    in_channels: int,
    rng: np.random.Generator,
    width: int = 64,
    hidden: int = 32,
    rate: float = 0.5,
) -> Module:
    if level == 3:
        return PixelDiscriminator(in_channels, width, rng)
    if level == 4:
        return PooledDiscriminator(in_channels, width, rng, hidden=None, rate=rate)
    if level == 5:
        return PooledDiscriminator(in_channels, width, rng, hidden=hidden, rate=rate)
    raise ValueError(f"no discriminator for level {level}; choose from 3, 4, 5")


class DiscriminatorSet(Module):
    """Only the enabled levels are constructed."""

    def __init__(self, c_channels: tuple[int, int, int], config: DomainConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        channels = dict(zip(ALL_LEVELS, c_channels))
        self.d3 = self.d4 = self.d5 = None
        for level in config.levels:
            setattr(
                self,
                f"d{level}",
                build_discriminator(level, channels[level], rng, config.width, config.hidden, config.dropout),
            )

    @property
    def levels(self) -> tuple[int, ...]:
        return self.config.levels

    @property
    def lam(self) -> float:
        return self.config.lam

    def get(self, level: int) -> Module | None:
        return getattr(self, f"d{level}")


@dataclass
class DomainLoss:
    l_d3: Tensor = field(default_factory=lambda: Tensor(0.0))
    l_d4: Tensor = field(default_factory=lambda: Tensor(0.0))
    l_d5: Tensor = field(default_factory=lambda: Tensor(0.0))

    def level(self, level: int) -> Tensor:
        return getattr(self, f"l_d{level}")

    def total(self) -> Tensor:
        return self.l_d3 + self.l_d4 + self.l_d5

    def values(self) -> tuple[float, float, float]:
        return (self.l_d3.item(), self.l_d4.item(), self.l_d5.item())


def _side_loss(logits: Tensor, label: float, gamma_d: float) -> Tensor:
    flat = logits.reshape(-1, 1)
    targets = np.full(flat.shape, label)
    return focal_loss(flat, targets, alpha=None, gamma=gamma_d)


def discriminator_side_losses(
    discriminator: Module,
    source_features: Tensor,
    target_features: Tensor,
    lam: float,
    gamma_d: float = 2.0,
    alpha_d: float = 0.5,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """``(L_Ds, L_Dt)``: each side's focal loss, mean over batch and locations.

    ``alpha_d`` is the target share of the weight: the source side is scaled
    by ``2 * (1 - alpha_d)`` and the target side by ``2 * alpha_d``.
    """
    if source_features.shape[0] == 0 or target_features.shape[0] == 0:
        raise ShapeError("discriminator loss needs at least one source and one target sample")
    source_logits = discriminator(grad_reverse(source_features, lam), rng)
    target_logits = discriminator(grad_reverse(target_features, lam), rng)
    source = _side_loss(source_logits, SOURCE_LABEL, gamma_d)
    target = _side_loss(target_logits, TARGET_LABEL, gamma_d)
    if alpha_d != 0.5:
        source = scale(source, 2.0 * (1.0 - alpha_d))
        target = scale(target, 2.0 * alpha_d)
    return source, target


def discriminator_loss(
    discriminator: Module,
    source_features: Tensor,
    target_features: Tensor,
    lam: float,
    gamma_d: float = 2.0,
    alpha_d: float = 0.5,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``L_Di = (L_Ds,i + L_Dt,i) / 2``."""
    source, target = discriminator_side_losses(
        discriminator, source_features, target_features, lam, gamma_d, alpha_d, rng
    )
    return scale(source + target, 0.5)


def domain_loss(
    discriminators: DiscriminatorSet,
    source: FeaturePyramid,
    target: FeaturePyramid,
    rng: np.random.Generator | None = None,
) -> DomainLoss:
    config = discriminators.config
    terms = {}
    for level in config.levels:
        terms[f"l_d{level}"] = discriminator_loss(
            discriminators.get(level),
            source.c_level(level),
            target.c_level(level),
            config.lam,
            config.gamma_d,
            config.alpha_d,
            rng,
        )
    return DomainLoss(**terms)


def total_loss(det: DetLoss, dom: DomainLoss, lam: float) -> Tensor:
    """The scalar the optimizer minimizes; the ``-lam`` of the objective lives in the reversal layers."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return det.l_class + det.l_box + dom.total()


def reported_total(det: DetLoss, dom: DomainLoss, lam: float) -> float:
    """``l_class + l_box - lam * (l_d3 + l_d4 + l_d5)``."""
    return det.l_class.item() + det.l_box.item() - lam * sum(dom.values())
