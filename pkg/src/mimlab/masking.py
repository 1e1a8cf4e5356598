"""Random patch masks, the complementary masked views, and color jitter."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class JitterScope(str, Enum):
    NONE = "none"
    WHOLE_IMAGE = "whole_image"
    UNMASKED_ONLY = "unmasked_only"


@dataclass(frozen=True)
class PatchMask:
    """Boolean visibility vector over the patch grid; ``True`` keeps a patch."""

    bits: np.ndarray
    ratio: float

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        object.__setattr__(self, "bits", bits)
        if bits.ndim != 1:
            raise ValueError("PatchMask bits must be a vector")
        expected = masked_count(bits.size, self.ratio)
        if int((~bits).sum()) != expected:
            raise ValueError(f"mask hides {int((~bits).sum())} patches, ratio {self.ratio} implies {expected}")

    @property
    def num_patches(self) -> int:
        return self.bits.size

    @property
    def num_masked(self) -> int:
        return int((~self.bits).sum())

    def complement(self) -> np.ndarray:
        return ~self.bits


def masked_count(num_patches: int, ratio: float) -> int:
    # guard against 0.75 * 196 landing a hair under an integer
    return int(math.floor(ratio * num_patches + 1e-9))


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> PatchMask:
    """Hide ``floor(ratio * num_patches)`` patches chosen uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    n_masked = masked_count(num_patches, ratio)
    bits = np.ones(num_patches, dtype=bool)
    bits[rng.permutation(num_patches)[:n_masked]] = False
    return PatchMask(bits, ratio)


def sample_masks(batch: int, num_patches: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """One independent mask per image, stacked as a [batch, P] visibility array."""
    return np.stack([sample_mask(num_patches, ratio, rng).bits for _ in range(batch)])


def _as_bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, PatchMask) else np.asarray(mask, dtype=bool)


def pixel_mask(mask, image_size: int, patch_size: int) -> np.ndarray:
    """Expand patch visibility ([P] or [b, P]) to pixels ([h, w] or [b, h, w])."""
    bits = _as_bits(mask)
    grid = image_size // patch_size
    if image_size % patch_size or bits.shape[-1] != grid * grid:
        raise ValueError(f"mask of {bits.shape[-1]} patches does not tile a {image_size}px image "
                         f"with {patch_size}px patches")
    g = bits.reshape(bits.shape[:-1] + (grid, grid))
    return np.repeat(np.repeat(g, patch_size, axis=-2), patch_size, axis=-1)


def transform_pair(x: np.ndarray, mask, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x * M, x * (1 - M))`` for images [c, h, w] or [b, c, h, w]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected square images, got {x.shape}")
    pm = pixel_mask(mask, x.shape[-1], patch_size)
    pm = np.expand_dims(pm, -3)
    if x.ndim == 4 and pm.ndim == 3:
        pm = pm[None]
    zero = np.zeros((), dtype=np.float64)
    return np.where(pm, x, zero), np.where(pm, zero, x)


# -- color jitter --------------------------------------------------------------

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class JitterParams:
    """SimSiam-style color augmentation.

    Strength semantics follow torchvision: brightness/contrast/saturation factors
    are drawn from ``[max(0, 1 - s), 1 + s]`` and the hue shift from ``[-h, h]``
    (fraction of a full turn).
    """

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    apply_prob: float = 0.8
    grayscale_prob: float = 0.2
    scope: JitterScope = JitterScope.NONE
    strength: float = 1.0

    def __post_init__(self):
        self.scope = JitterScope(self.scope)
        for name in ("brightness", "contrast", "saturation", "hue", "strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"jitter {name} must be non-negative")
        if self.hue * self.strength > 0.5:
            raise ValueError("hue strength must not exceed 0.5")
        for name in ("apply_prob", "grayscale_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"jitter {name} must lie in [0, 1]")


def grayscale(img: np.ndarray) -> np.ndarray:
    """Luma of a [3, h, w] image."""
    return np.tensordot(_GRAY_WEIGHTS, img, axes=(0, 0))


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = grayscale(img).mean()
    return np.clip(factor * img + (1.0 - factor) * m, 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = grayscale(img)[None]
    return np.clip(factor * img + (1.0 - factor) * gray, 0.0, 1.0)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """[3, h, w] RGB in [0, 1] to HSV with hue in [0, 1)."""
    r, g, b = img
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb_to_hsv(img)
    hsv[0] = (hsv[0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def _factor(strength: float, rng: np.random.Generator) -> float:
    return float(rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength))


def color_jitter(
    image: np.ndarray,
    params: JitterParams,
    rng: np.random.Generator,
    visible: np.ndarray | None = None,
    check_range: bool = False,
) -> np.ndarray:
    """Randomly perturb brightness, contrast, saturation and hue, then maybe desaturate.

    ``image`` is [3, h, w]. With scope ``UNMASKED_ONLY`` the result is pasted back
    only where the pixel-level ``visible`` mask is true, so hidden pixels stay
    bit-identical. Scope ``NONE`` returns the input untouched.
    """
    if check_range and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("color_jitter expects pixel values in [0, 1]")
    if params.scope is JitterScope.NONE:
        return image
    out = image
    k = params.strength
    if rng.random() < params.apply_prob:
        ops = [
            (adjust_brightness, params.brightness * k, True),
            (adjust_contrast, params.contrast * k, True),
            (adjust_saturation, params.saturation * k, True),
            (adjust_hue, params.hue * k, False),
        ]
        for idx in rng.permutation(4):
            fn, s, multiplicative = ops[idx]
            if s <= 0:
                continue
            value = _factor(s, rng) if multiplicative else float(rng.uniform(-s, s))
            out = fn(out, value)
    if rng.random() < params.grayscale_prob:
        out = np.broadcast_to(grayscale(out), image.shape).copy()
    if params.scope is JitterScope.UNMASKED_ONLY:
        if visible is None:
            raise ValueError("unmasked-only jitter needs a pixel visibility mask")
        out = np.where(visible[None], out, image)
    return out
