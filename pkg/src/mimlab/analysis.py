"""Occlusion-invariance measurements (linear CKA per encoder block) and PSNR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masking import sample_masks
from .vit import MaskHandling, ModelParams, decoder_forward, encoder_forward, patchify, unpatchify

PSNR_CAP_DB = 99.0


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)


def linear_cka(X, Y) -> float:
    """Linear CKA: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centered inputs.

    Returns 0 when either representation has no variance.
    """
    X, Y = _as_array(X), _as_array(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"CKA needs [n, d] inputs with equal n, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    Xc = X - X.mean(axis=0, keepdims=True)
    Yc = Y - Y.mean(axis=0, keepdims=True)
    denom = np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(Yc.T @ Xc) ** 2 / denom)


@dataclass
class InvarianceCurve:
    mask_ratios: list
    blocks: list
    values: np.ndarray
    probe_size: int
    seed: int
    mode: str = MaskHandling.DROP_TOKENS.value
    meta: dict = field(default_factory=dict)

    def at(self, block: int, ratio: float) -> float:
        i = self.blocks.index(block)
        j = int(np.argmin(np.abs(np.asarray(self.mask_ratios) - ratio)))
        return float(self.values[i, j])


def block_features(params: ModelParams, patches: np.ndarray, bits: np.ndarray | None, mode,
                   batch_size: int = 128) -> list[np.ndarray]:
    """Per-block, per-image mean over the surviving patch tokens: list of [n, dim]."""
    depth = params.config.depth
    chunks: list[list[np.ndarray]] = [[] for _ in range(depth)]
    with T.no_grad():
        for start in range(0, len(patches), batch_size):
            sl = slice(start, start + batch_size)
            out = encoder_forward(params, patches[sl], None if bits is None else bits[sl], mode,
                                  keep_blocks=True)
            pre = out.num_prefix
            for b, h in enumerate(out.block_outputs):
                chunks[b].append(h.data[:, pre:].mean(axis=1))
    return [np.concatenate(c) for c in chunks]


def occlusion_invariance_curve(params: ModelParams, images: np.ndarray, ratios, mode=None, seed: int = 0,
                               blocks=None, min_probe: int = 32) -> InvarianceCurve:
    """CKA between full-image and masked-image features at every block and mask ratio.

    One fresh mask per image per ratio. Features are mean-pooled patch tokens, so
    the sample unit is the image. ``mode`` defaults to the encoder's own mask
    handling; DropTokens pools over the surviving tokens only.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("empty probe set")
    if len(images) < min_probe:
        raise ValueError(f"probe set of {len(images)} images is below the minimum of {min_probe}")
    cfg = params.config
    mode = MaskHandling(mode or cfg.mask_handling)
    ratios = [float(r) for r in ratios]
    blocks = list(range(cfg.depth)) if blocks is None else list(blocks)
    patches = patchify(images, cfg.patch_size)
    full = block_features(params, patches, None, mode)
    rng = np.random.default_rng(seed)
    values = np.zeros((len(blocks), len(ratios)))
    for j, ratio in enumerate(ratios):
        bits = sample_masks(len(images), cfg.num_patches, ratio, rng)
        masked = block_features(params, patches, bits, mode)
        for i, b in enumerate(blocks):
            values[i, j] = linear_cka(full[b], masked[b])
    return InvarianceCurve(ratios, blocks, values, len(images), seed, mode.value)


def psnr(recon, orig, max_val: float = 1.0) -> float:
    """10 log10(max_val^2 / MSE) in dB, capped at 99 dB for identical inputs."""
    recon, orig = _as_array(recon), _as_array(orig)
    if recon.shape != orig.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {orig.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((recon - orig) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(max_val ** 2 / mse)))


def paste_reconstruction(pred_patches, input_patches, bits, patch_norm: bool) -> np.ndarray:
    """Visible patches from the input, hidden ones from the prediction.

    With patch normalization the prediction lives in standardized space and is
    mapped back with each target patch's own mean and std.
    """
    pred = _as_array(pred_patches)
    src = _as_array(input_patches)
    if patch_norm:
        mu = src.mean(axis=-1, keepdims=True)
        sd = np.sqrt(src.var(axis=-1, ddof=1, keepdims=True) + 1e-6)
        pred = pred * sd + mu
    bits = np.broadcast_to(np.asarray(bits, dtype=bool), src.shape[:2])
    return np.where(bits[:, :, None], src, np.clip(pred, 0.0, 1.0))


def reconstruction_psnr(params: ModelParams, images: np.ndarray, bits: np.ndarray,
                        patch_norm: bool = True, mode=None) -> float:
    """PSNR of the image rebuilt from its masked version against the original."""
    cfg = params.config
    patches = patchify(images, cfg.patch_size)
    with T.no_grad():
        pred = decoder_forward(params, encoder_forward(params, patches, bits, mode), bits)
    recon = unpatchify(paste_reconstruction(pred, patches, bits, patch_norm), cfg)
    return psnr(recon, images)


__all__ = [
    "InvarianceCurve",
    "block_features",
    "linear_cka",
    "occlusion_invariance_curve",
    "paste_reconstruction",
    "psnr",
    "reconstruction_psnr",
]
