"""Training objectives: pixel, feature, structural and adversarial losses.

Each squared-norm term is divided by its element count by default so that unit
weights balance terms of very different sizes; pass ``normalize=False`` for
the raw squared Frobenius norms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import DiscParams, FeatureNetParams, disc_forward, featnet_forward
from .tensor_core import DimensionError, Tensor, as_tensor, log, mul, square, sub, tsum

DEFAULT_TAPS = ("conv1_1", "conv2_1", "conv3_1")


@dataclass
class LossWeights:
    lambda0: float = 1.0
    lambda_by_tap: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in DEFAULT_TAPS})
    gamma: float = 0.01
    overlap_scale: float = 10.0
    band_width: int = 2
    normalize: bool = True

    def __post_init__(self):
        vals = [self.lambda0, self.gamma, *self.lambda_by_tap.values()]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in [self.lambda0, *self.lambda_by_tap.values()]):
            raise ValueError("at least one reconstruction weight must be positive")
        if self.overlap_scale <= 0:
            raise ValueError("overlap_scale must be positive")

    @classmethod
    def paper(cls) -> "LossWeights":
        return cls(band_width=4)

    @classmethod
    def desk(cls) -> "LossWeights":
        return cls(band_width=2)

    @classmethod
    def pixel_only(cls, band_width: int = 2, gamma: float = 0.0) -> "LossWeights":
        return cls(lambda_by_tap={}, gamma=gamma, band_width=band_width)

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.lambda0 * factor, {k: v * factor for k, v in self.lambda_by_tap.items()},
                           self.gamma * factor, self.overlap_scale, self.band_width, self.normalize)


def overlap_weight_map(prediction_size: int, band_width: int, overlap_scale: float = 10.0) -> np.ndarray:
    """Per-pixel weights: ``overlap_scale`` on the outer band, 1 inside."""
    if band_width < 0 or 2 * band_width >= prediction_size:
        raise ValueError(f"band of width {band_width} does not fit a {prediction_size}-pixel prediction")
    w = np.full((prediction_size, prediction_size), float(overlap_scale))
    inner = slice(band_width, prediction_size - band_width)
    w[inner, inner] = 1.0
    return w


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def pixel_loss(y, target, weights=None, normalize: bool = True) -> Tensor:
    """Weighted squared error; ``weights`` is an ``(H, W)`` map broadcast over channels."""
    y, target = as_tensor(y), as_tensor(target)
    _same_shape(y, target, "pixel_loss")
    diff2 = square(sub(y, target.detach()))
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != y.shape[:2]:
            raise DimensionError(f"pixel_loss: weight map {weights.shape} does not match image {y.shape[:2]}")
        diff2 = mul(diff2, weights[:, :, None])
    total = tsum(diff2)
    return mul(total, 1.0 / y.size) if normalize else total


def feature_loss(y, target, featnet: FeatureNetParams, tap: str, normalize: bool = True) -> Tensor:
    """Squared distance between feature maps of ``y`` and of the constant ``target``."""
    y, target = as_tensor(y), as_tensor(target)
    _same_shape(y, target, "feature_loss")
    fy = featnet_forward(featnet, y, [tap])[tap]
    ft = featnet_forward(featnet, target.detach(), [tap])[tap]
    total = tsum(square(sub(fy, ft.detach())))
    return mul(total, 1.0 / fy.size) if normalize else total


@dataclass
class LossTerms:
    """Scalar tensors making up one sample's objective."""

    pixel: Tensor
    features: dict[str, Tensor]
    structural: Tensor
    adversarial: Tensor | None = None
    total: Tensor | None = None

    @property
    def feature_total(self) -> float:
        return float(sum(v.item() for v in self.features.values()))


def structural_terms(y, target, featnet: FeatureNetParams | None, weights: LossWeights,
                     pixel_weights: np.ndarray | None = None) -> LossTerms:
    y, target = as_tensor(y), as_tensor(target)
    if pixel_weights is None and weights.band_width > 0:
        pixel_weights = overlap_weight_map(y.shape[0], weights.band_width, weights.overlap_scale)
    pix = pixel_loss(y, target, pixel_weights, weights.normalize)
    total = mul(pix, weights.lambda0)
    feats: dict[str, Tensor] = {}
    active = [t for t, lam in weights.lambda_by_tap.items() if lam != 0]
    if active:
        if featnet is None:
            raise ValueError("feature taps requested but no feature network given")
        unknown = [t for t in active if t not in featnet.config.tap_names]
        if unknown:
            raise KeyError(f"unknown feature taps {unknown}")
        fy = featnet_forward(featnet, y, active)
        ft = featnet_forward(featnet, target.detach(), active)
        for t in active:
            term = tsum(square(sub(fy[t], ft[t].detach())))
            if weights.normalize:
                term = mul(term, 1.0 / fy[t].size)
            feats[t] = term
            total = total + mul(term, weights.lambda_by_tap[t])
    return LossTerms(pix, feats, total, total=total)


def structural_loss(y, target, featnet: FeatureNetParams | None, weights: LossWeights,
                    pixel_weights: np.ndarray | None = None) -> Tensor:
    """``lambda0 * pixel + sum_l lambda_l * feature_l``.

    The band weighting uses ``weights.band_width`` unless ``pixel_weights`` is given.
    With every tap weight at zero the feature network is never evaluated.
    """
    return structural_terms(y, target, featnet, weights, pixel_weights).structural


def _check_patches(disc: DiscParams, *patches) -> None:
    size = disc.config.input_size
    for p in patches:
        if as_tensor(p).shape != (size, size, 3):
            raise DimensionError(f"adversarial loss expects {size}x{size}x3 patches, got {as_tensor(p).shape}")


def adversarial_loss(disc: DiscParams, real_patch, fake_patch) -> Tensor:
    """``ln D(real) + ln(1 - D(fake))``; at most 0, maximized by the discriminator."""
    _check_patches(disc, real_patch, fake_patch)
    d_real = disc_forward(disc, real_patch)
    d_fake = disc_forward(disc, fake_patch)
    return log(d_real) + log(1.0 - d_fake)


def generator_objective(y, target, featnet, disc: DiscParams | None, weights: LossWeights,
                        pixel_weights: np.ndarray | None = None) -> LossTerms:
    """Structural loss plus ``gamma * ln(1 - D(y))``.

    Gradients reach the discriminator tensors too; callers update only the
    generator with them. When ``gamma`` is 0 the adversarial term is skipped and
    the objective is the structural loss itself.
    """
    terms = structural_terms(y, target, featnet, weights, pixel_weights)
    if weights.gamma == 0 or disc is None:
        terms.total = terms.structural
        return terms
    _check_patches(disc, y)
    adv_fake = log(1.0 - disc_forward(disc, y))
    terms.adversarial = adv_fake
    terms.total = terms.structural + mul(adv_fake, weights.gamma)
    return terms


def discriminator_objective(disc: DiscParams, real_patch, fake_patch) -> Tensor:
    """``-[ln D(real) + ln(1 - D(fake))]`` with the fake patch treated as a constant."""
    return mul(adversarial_loss(disc, as_tensor(real_patch).detach(), as_tensor(fake_patch).detach()), -1.0)
