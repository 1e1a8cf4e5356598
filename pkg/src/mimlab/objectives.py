"""Loss functions: MAE reconstruction, relaxed siamese MAE, token-wise InfoNCE and BYOL.

All reconstruction-style terms are means over masked patch elements rather than
sums, so their scale does not depend on the mask ratio or the patch count.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vit import ModelParams, decoder_forward, encoder_forward

COSINE_EPS = 1e-8
PATCH_NORM_EPS = 1e-6


class UndefinedLossError(ValueError):
    """Raised when a masked loss has no masked elements to average over."""


class AggregationStrategy(str, Enum):
    CLASS_ONLY = "class_only"
    MEAN_PATCH = "mean_patch"
    TOKEN_WISE = "token_wise"
    TOKEN_WISE_PLUS_CLASS = "token_wise_plus_class"

    @property
    def needs_class_token(self) -> bool:
        return self in (AggregationStrategy.CLASS_ONLY, AggregationStrategy.TOKEN_WISE_PLUS_CLASS)


class NegativePolicy(str, Enum):
    SAME_POSITION_ACROSS_BATCH = "same_position_across_batch"
    ALL_TOKENS_ACROSS_BATCH = "all_tokens_across_batch"


def _hidden_weights(mask, shape) -> np.ndarray:
    bits = mask.bits if hasattr(mask, "bits") else np.asarray(mask, dtype=bool)
    bits = np.broadcast_to(bits, shape[:2])
    return (~bits).astype(np.float64)


def normalize_patches(patches: np.ndarray, eps: float = PATCH_NORM_EPS) -> np.ndarray:
    """Per-patch standardization: ``(t - mean) / sqrt(var + eps)``.

    The variance is the unbiased (n - 1) estimate, as in the reference MAE code.
    """
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, ddof=1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over the hidden patches (mask bit False)."""
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    w = _hidden_weights(mask, pred.shape)
    count = w.sum() * pred.shape[-1]
    if count == 0:
        raise UndefinedLossError("no masked patches: the reconstruction loss is undefined")
    diff = pred - target
    return (diff * diff * w[:, :, None]).sum() * (1.0 / count)


def mae_loss(pred, target_patches, mask, patch_norm: bool = True, eps: float = PATCH_NORM_EPS) -> Tensor:
    """Reconstruction error on hidden patches, optionally against standardized targets."""
    target = np.asarray(T.as_tensor(target_patches).data)
    if patch_norm:
        if eps <= 0:
            raise ValueError("patch-norm eps must be positive")
        target = normalize_patches(target, eps)
    return masked_mse(pred, target, mask)


def rmae_distance(z1_decoded, z2_decoded, mask) -> Tensor:
    """Decoder-space distance between the two branches, restricted to hidden patches."""
    return masked_mse(z1_decoded, z2_decoded, mask)


@dataclass
class RMAEOutput:
    total: Tensor
    distance: Tensor
    constraint: Tensor
    pred_masked_view: Tensor
    pred_complement_view: Tensor


def rmae_loss(params: ModelParams, patches, mask, lam: float = 1.0, patch_norm: bool = True,
              mode=None) -> RMAEOutput:
    """Relaxed siamese MAE objective with one shared decoder.

    Branch one encodes the visible patches (mask True), branch two the
    complementary set. ``total = distance + lam * constraint`` where the
    constraint is branch two's reconstruction of its own visible input.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    bits = mask.bits if hasattr(mask, "bits") else np.asarray(mask, dtype=bool)
    patches = T.as_tensor(patches)
    comp = ~bits
    # T2 zeroes the visible region, so its own input is the complement of T1
    z1 = encoder_forward(params, patches, bits, mode)
    z2 = encoder_forward(params, patches, comp, mode)
    d1 = decoder_forward(params, z1, bits)
    d2 = decoder_forward(params, z2, comp)
    distance = rmae_distance(d1, d2, bits)
    constraint = mae_loss(d2, patches, bits, patch_norm)
    total = distance + constraint * float(lam)
    return RMAEOutput(total, distance, constraint, d1, d2)


# -- contrastive -----------------------------------------------------------------

def l2_normalize(x, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    x = T.as_tensor(x)
    norm = T.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / T.clamp_min(norm, eps)


def cosine_sim(u, v, eps: float = COSINE_EPS) -> Tensor:
    """u.v / (|u| |v|) along the last axis; norms below ``eps`` are floored to ``eps``."""
    return (l2_normalize(u, eps=eps) * l2_normalize(v, eps=eps)).sum(axis=-1)


def infonce(query, keys, positive_index: int, tau: float = 0.2) -> Tensor:
    """-log softmax(cos(q, k_j) / tau)[positive] for one query against a key list."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    keys = T.as_tensor(keys)
    if keys.ndim == 1:
        keys = keys.reshape(1, -1)
    if not 0 <= positive_index < keys.shape[0]:
        raise IndexError(f"positive index {positive_index} outside {keys.shape[0]} keys")
    sims = cosine_sim(T.as_tensor(query).reshape(1, -1), keys)
    logp = T.log_softmax(sims * (1.0 / tau), axis=-1)
    return -logp[positive_index]


def _nce_rows(q: Tensor, k: Tensor, tau: float) -> Tensor:
    """Batched InfoNCE where row i of ``q`` has positive key i of ``k``.

    ``q``, ``k``: [..., n, d]. Returns per-row losses [..., n].
    """
    logits = T.matmul(l2_normalize(q), l2_normalize(k).swapaxes(-1, -2)) * (1.0 / tau)
    logp = T.log_softmax(logits, axis=-1)
    n = q.shape[-2]
    idx = np.arange(n)
    return -logp[..., idx, idx]


def _split(tokens: Tensor, has_class: bool):
    if has_class:
        return tokens[:, 0], tokens[:, 1:]
    return None, tokens


def _check_strategy(strategy: AggregationStrategy, has_class: bool, batch: int, needs_negatives: bool):
    if strategy.needs_class_token and not has_class:
        raise ValueError(f"strategy {strategy.value} needs a class token")
    if needs_negatives and batch < 2:
        raise ValueError("contrastive loss needs at least two images per batch for negatives")


def tokenwise_nce(online_patches: Tensor, target_patches: Tensor, tau: float,
                  policy: NegativePolicy) -> Tensor:
    """Per-(image, position) InfoNCE losses, shape [b, P]."""
    b, p, d = online_patches.shape
    if policy is NegativePolicy.SAME_POSITION_ACROSS_BATCH:
        q = online_patches.transpose(1, 0, 2)
        k = target_patches.transpose(1, 0, 2)
        return _nce_rows(q, k, tau).transpose(1, 0)
    q = online_patches.reshape(b * p, d)
    k = target_patches.reshape(b * p, d)
    return _nce_rows(q, k, tau).reshape(b, p)


def cmae_loss(online_tokens, target_tokens, strategy=AggregationStrategy.TOKEN_WISE, tau: float = 0.2,
              negative_policy=NegativePolicy.SAME_POSITION_ACROSS_BATCH, has_class_token: bool = True) -> Tensor:
    """Contrastive loss between online (projector + predictor) and target (projector) tokens.

    Both inputs are [b, prefix + P, d] with identical layouts. Instance-level
    strategies use the other images of the batch as negatives; token-wise
    strategies follow ``negative_policy``.
    """
    strategy = AggregationStrategy(strategy)
    negative_policy = NegativePolicy(negative_policy)
    online_tokens, target_tokens = T.as_tensor(online_tokens), T.as_tensor(target_tokens)
    if online_tokens.shape != target_tokens.shape:
        raise ValueError(f"branch token layouts differ: {online_tokens.shape} vs {target_tokens.shape}")
    _check_strategy(strategy, has_class_token, online_tokens.shape[0], True)
    q_cls, q_patch = _split(online_tokens, has_class_token)
    k_cls, k_patch = _split(target_tokens, has_class_token)

    if strategy is AggregationStrategy.CLASS_ONLY:
        return _nce_rows(q_cls, k_cls, tau).mean()
    if strategy is AggregationStrategy.MEAN_PATCH:
        return _nce_rows(q_patch.mean(axis=1), k_patch.mean(axis=1), tau).mean()
    token = tokenwise_nce(q_patch, k_patch, tau, negative_policy).mean()
    if strategy is AggregationStrategy.TOKEN_WISE:
        return token
    return (token + _nce_rows(q_cls, k_cls, tau).mean()) * 0.5


def byol_loss(q, k) -> Tensor:
    """2 - 2 cos(q, k) along the last axis (elementwise over leading axes)."""
    return 2.0 - cosine_sim(q, k) * 2.0


def cmae_byol_loss(online_tokens, target_tokens, strategy=AggregationStrategy.TOKEN_WISE,
                   has_class_token: bool = True) -> Tensor:
    """The BYOL variant: same aggregation strategies, no negatives."""
    strategy = AggregationStrategy(strategy)
    online_tokens, target_tokens = T.as_tensor(online_tokens), T.as_tensor(target_tokens)
    if online_tokens.shape != target_tokens.shape:
        raise ValueError(f"branch token layouts differ: {online_tokens.shape} vs {target_tokens.shape}")
    _check_strategy(strategy, has_class_token, online_tokens.shape[0], False)
    q_cls, q_patch = _split(online_tokens, has_class_token)
    k_cls, k_patch = _split(target_tokens, has_class_token)
    if strategy is AggregationStrategy.CLASS_ONLY:
        return byol_loss(q_cls, k_cls).mean()
    if strategy is AggregationStrategy.MEAN_PATCH:
        return byol_loss(q_patch.mean(axis=1), k_patch.mean(axis=1)).mean()
    token = byol_loss(q_patch, k_patch).mean()
    if strategy is AggregationStrategy.TOKEN_WISE:
        return token
    return (token + byol_loss(q_cls, k_cls).mean()) * 0.5


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    rows = np.arange(len(labels))
    return -logp[rows, np.asarray(labels, dtype=int)].mean()
