"""Finite-difference checks for every differentiable op and every full objective.

Each check draws one random tiny instance from ``rng`` and returns the worst
relative error reported by :func:`mimlab.tensor.grad_check`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .masking import sample_masks
from .objectives import (AggregationStrategy, NegativePolicy, cmae_byol_loss, cmae_loss, cross_entropy,
                         infonce, mae_loss, rmae_loss)
from .siamese import SiameseState, head_forward
from .vit import MaskHandling, ModelParams, ViTConfig, encoder_forward, decoder_forward, init_params

TINY = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2, mlp_ratio=2.0, decoder_dim=8,
                 decoder_depth=1, decoder_num_heads=2, proj_hidden_dim=8, proj_dim=4)

# parameters perturbed in full-loss checks: encoder input side, attention, decoder output
PROBED = ("patch_embed.w", "pos_embed", "blocks.0.attn.qkv.w", "blocks.0.mlp.fc2.w", "norm.g",
          "decoder_pred.w")
PROBED_HEADS = ("patch_embed.w", "blocks.0.attn.proj.w", "mask_token", "projector.fc1.w", "predictor.fc2.w")


def _scalar(x: T.Tensor) -> T.Tensor:
    # weighted sum so that elementwise ops get distinct upstream gradients
    w = np.cos(np.arange(x.size, dtype=float)).reshape(x.shape) + 1.5
    return (x * w).sum()


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _ops(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    m = rng.normal(size=(4, 5))
    batched = rng.normal(size=(2, 3, 4))
    batched_r = rng.normal(size=(2, 4, 3))
    cond = rng.random((3, 4)) > 0.5
    gc = T.grad_check
    return {
        "add": lambda: gc(lambda x, y: _scalar(x + y), [a, row]),
        "sub": lambda: gc(lambda x, y: _scalar(x - y), [a, b]),
        "mul": lambda: gc(lambda x, y: _scalar(x * y), [a, row]),
        "div": lambda: gc(lambda x, y: _scalar(x / y), [a, _pos(rng, (3, 4))]),
        "neg": lambda: gc(lambda x: _scalar(-x), [a]),
        "power": lambda: gc(lambda x: _scalar(x ** 3.0), [a]),
        "exp": lambda: gc(lambda x: _scalar(T.exp(x)), [a]),
        "log": lambda: gc(lambda x: _scalar(T.log(x)), [_pos(rng, (3, 4))]),
        "sqrt": lambda: gc(lambda x: _scalar(T.sqrt(x)), [_pos(rng, (3, 4))]),
        "clamp_min": lambda: gc(lambda x: _scalar(T.clamp_min(x, 0.05)), [np.where(np.abs(a) < 0.1, 0.3, a)]),
        "where": lambda: gc(lambda x, y: _scalar(T.where(cond, x, y)), [a, b]),
        "gelu": lambda: gc(lambda x: _scalar(T.gelu(x)), [a]),
        "sum": lambda: gc(lambda x: _scalar(T.tsum(x, axis=1, keepdims=True)), [batched]),
        "mean": lambda: gc(lambda x: _scalar(T.mean(x, axis=(0, 2))), [batched]),
        "reshape": lambda: gc(lambda x: _scalar(T.reshape(x, (4, 6))), [batched]),
        "transpose": lambda: gc(lambda x: _scalar(T.transpose(x, (2, 0, 1))), [batched]),
        "broadcast_to": lambda: gc(lambda x: _scalar(T.broadcast_to(x, (3, 4))), [row]),
        "getitem": lambda: gc(lambda x: _scalar(x[:, np.array([0, 2, 2])]), [batched]),
        "concat": lambda: gc(lambda x, y: _scalar(T.concat([x, y], axis=0)), [a, b]),
        "matmul": lambda: gc(lambda x, y: _scalar(T.matmul(x, y)), [batched, batched_r]),
        "matmul_2d": lambda: gc(lambda x, y: _scalar(T.matmul(x, y)), [batched, m]),
        "linear": lambda: gc(lambda x, w, c: _scalar(T.linear(x, w, c)), [a, m, rng.normal(size=5)]),
        "softmax": lambda: gc(lambda x: _scalar(T.softmax(x, axis=-1)), [batched]),
        "log_softmax": lambda: gc(lambda x: _scalar(T.log_softmax(x, axis=1)), [batched]),
        "logsumexp": lambda: gc(lambda x: _scalar(T.logsumexp(x, axis=-1)), [batched]),
        "layer_norm": lambda: gc(lambda x, g, c: _scalar(T.layer_norm(x, g, c)),
                                 [batched, rng.normal(size=4), rng.normal(size=4)]),
        "cross_entropy": lambda: gc(lambda x: cross_entropy(x, np.array([0, 3, 1])), [a]),
        "infonce": lambda: gc(lambda q, k: infonce(q, k, 1, 0.2), [row, rng.normal(size=(3, 4))]),
    }


def _model_check(params: ModelParams, names, loss_fn, rng, max_coords: int) -> float:
    """grad_check of ``loss_fn(params)`` with respect to the tensors in ``names``."""

    def f(*leaves):
        local = params.copy(requires_grad=False)
        for name, leaf in zip(names, leaves):
            local[name] = leaf
        return loss_fn(local)

    return T.grad_check(f, [params[n].data for n in names], max_coords=max_coords, rng=rng)


def _losses(rng: np.random.Generator, max_coords: int) -> dict[str, Callable[[], float]]:
    cfg = TINY
    b = 3
    params = init_params(cfg, rng)
    # lift the near-zero init so the checks exercise nonlinear regimes
    for name, t in params.items():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    patches = rng.random((b, cfg.num_patches, cfg.patch_dim))
    bits = sample_masks(b, cfg.num_patches, 0.5, rng)

    def mae(p):
        pred = decoder_forward(p, encoder_forward(p, patches, bits), bits)
        return mae_loss(pred, patches, bits, True)

    def rmae(p):
        return rmae_loss(p, patches, bits, 0.7, True).total

    tok_cfg = ViTConfig(**{**cfg.to_dict(), "mask_handling": MaskHandling.MASK_TOKEN})
    online = init_params(tok_cfg, rng)
    for name, t in online.items():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    state = SiameseState.from_online(online)
    for name, t in state.target.items():
        t.data = t.data + rng.normal(scale=0.05, size=t.shape)
    views = rng.random((2, b, cfg.num_patches, cfg.patch_dim))
    with T.no_grad():
        target_tokens = head_forward(state.target, encoder_forward(state.target, views[1], ~bits).tokens, False)

    def contrastive(strategy, byol=False):
        def loss(p):
            online_tokens = head_forward(p, encoder_forward(p, views[0], bits).tokens, True)
            if byol:
                return cmae_byol_loss(online_tokens, T.stop_gradient(target_tokens), strategy)
            return cmae_loss(online_tokens, T.stop_gradient(target_tokens), strategy, 0.2,
                             NegativePolicy.SAME_POSITION_ACROSS_BATCH)
        return loss

    checks = {
        "mae_loss": lambda: _model_check(params, PROBED, mae, rng, max_coords),
        "mae_loss_wrt_input": lambda: T.grad_check(
            lambda x: mae_loss(decoder_forward(params, encoder_forward(params, x, bits), bits), patches, bits),
            [patches], max_coords=max_coords, rng=rng),
        "rmae_loss": lambda: _model_check(params, PROBED, rmae, rng, max_coords),
        "byol_loss": lambda: _model_check(online, PROBED_HEADS, contrastive(AggregationStrategy.TOKEN_WISE, True),
                                          rng, max_coords),
    }
    for s in AggregationStrategy:
        checks[f"cmae_loss[{s.value}]"] = (
            lambda s=s: _model_check(online, PROBED_HEADS, contrastive(s), rng, max_coords))
    return checks


def run_grad_checks(instances: int = 10, seed: int = 0, max_coords: int = 12,
                    include: str = "all") -> dict[str, float]:
    """Worst relative error per check over ``instances`` random instances.

    ``include`` is ``"ops"``, ``"losses"`` or ``"all"``.
    """
    worst: dict[str, float] = {}
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        checks: dict[str, Callable[[], float]] = {}
        if include in ("ops", "all"):
            checks.update(_ops(rng))
        if include in ("losses", "all"):
            checks.update(_losses(rng, max_coords))
        for name, check in checks.items():
            worst[name] = max(worst.get(name, 0.0), check())
    return worst
