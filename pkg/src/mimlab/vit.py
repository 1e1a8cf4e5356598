"""Tiny Vision Transformer encoder, lightweight MAE decoder and projection heads.

Parameters live in a flat, ordered name -> Tensor mapping (:class:`ModelParams`)
and every forward pass is a plain function of (params, inputs). This keeps EMA
copies, optimizer state and checkpoints trivial to manage.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from . import tensor as T
from .masking import PatchMask
from .tensor import Tensor


class MaskHandling(str, Enum):
    DROP_TOKENS = "drop_tokens"
    MASK_TOKEN = "mask_token"


@dataclass
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_num_heads: int = 4
    use_class_token: bool = True
    mask_handling: MaskHandling = MaskHandling.DROP_TOKENS
    proj_hidden_dim: int = 256
    proj_dim: int = 64
    num_classes: int = 0
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.mask_handling = MaskHandling(self.mask_handling)
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.decoder_dim % self.decoder_num_heads:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by decoder_num_heads "
                             f"{self.decoder_num_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def num_prefix(self) -> int:
        return 1 if self.use_class_token else 0

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def decoder_mlp_dim(self) -> int:
        return int(self.decoder_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_handling"] = self.mask_handling.value
        return d


class ModelParams:
    """Ordered parameter set for one network, tied to its :class:`ViTConfig`."""

    def __init__(self, config: ViTConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def set_requires_grad(self, flag: bool, prefix: str = "") -> None:
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                t.requires_grad = flag

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        out = OrderedDict()
        for name, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[name] = Tensor(t.data.copy(), requires_grad=rg)
        return ModelParams(self.config, out)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.tensors.items())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _linear(p, rng, name, d_in, d_out, zero_weight=False):
    p[f"{name}.w"] = np.zeros((d_in, d_out)) if zero_weight else trunc_normal(rng, (d_in, d_out))
    p[f"{name}.b"] = np.zeros(d_out)


def _norm(p, name, d):
    p[f"{name}.g"] = np.ones(d)
    p[f"{name}.b"] = np.zeros(d)


def _block(p, rng, name, dim, mlp_dim):
    _norm(p, f"{name}.norm1", dim)
    _linear(p, rng, f"{name}.attn.qkv", dim, 3 * dim)
    _linear(p, rng, f"{name}.attn.proj", dim, dim)
    _norm(p, f"{name}.norm2", dim)
    _linear(p, rng, f"{name}.mlp.fc1", dim, mlp_dim)
    _linear(p, rng, f"{name}.mlp.fc2", mlp_dim, dim)


def init_params(config: ViTConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters; the parameter names and count depend only on ``config``."""
    c = config
    p: "OrderedDict[str, np.ndarray]" = OrderedDict()
    _linear(p, rng, "patch_embed", c.patch_dim, c.embed_dim)
    if c.use_class_token:
        p["cls_token"] = rng.normal(0.0, 0.02, size=(1, 1, c.embed_dim))
    p["pos_embed"] = rng.normal(0.0, 0.02, size=(1, c.num_prefix + c.num_patches, c.embed_dim))
    if c.mask_handling is MaskHandling.MASK_TOKEN:
        p["mask_token"] = rng.normal(0.0, 0.02, size=(1, 1, c.embed_dim))
    for i in range(c.depth):
        _block(p, rng, f"blocks.{i}", c.embed_dim, c.mlp_dim)
    _norm(p, "norm", c.embed_dim)

    _linear(p, rng, "decoder_embed", c.embed_dim, c.decoder_dim)
    p["decoder_mask_token"] = rng.normal(0.0, 0.02, size=(1, 1, c.decoder_dim))
    p["decoder_pos_embed"] = rng.normal(0.0, 0.02, size=(1, c.num_prefix + c.num_patches, c.decoder_dim))
    for i in range(c.decoder_depth):
        _block(p, rng, f"decoder_blocks.{i}", c.decoder_dim, c.decoder_mlp_dim)
    _norm(p, "decoder_norm", c.decoder_dim)
    _linear(p, rng, "decoder_pred", c.decoder_dim, c.patch_dim)

    _linear(p, rng, "projector.fc1", c.embed_dim, c.proj_hidden_dim)
    _linear(p, rng, "projector.fc2", c.proj_hidden_dim, c.proj_dim)
    _linear(p, rng, "predictor.fc1", c.proj_dim, c.proj_hidden_dim)
    _linear(p, rng, "predictor.fc2", c.proj_hidden_dim, c.proj_dim)

    if c.num_classes:
        _linear(p, rng, "head", c.embed_dim, c.num_classes)
    return ModelParams(c, OrderedDict((k, Tensor(v, requires_grad=True)) for k, v in p.items()))


def add_classifier(params: ModelParams, num_classes: int, rng: np.random.Generator) -> ModelParams:
    """Return a copy of ``params`` carrying a fresh [embed_dim, num_classes] head."""
    cfg = ViTConfig(**{**params.config.to_dict(), "num_classes": num_classes})
    tensors = OrderedDict((k, v) for k, v in params.items() if not k.startswith("head."))
    tensors["head.w"] = Tensor(trunc_normal(rng, (cfg.embed_dim, num_classes)), requires_grad=True)
    tensors["head.b"] = Tensor(np.zeros(num_classes), requires_grad=True)
    return ModelParams(cfg, tensors)


# -- patches ------------------------------------------------------------------

def patchify(images, patch_size: int) -> np.ndarray:
    """[b, c, h, w] -> [b, P, c * p * p], patches in row-major grid order."""
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    b, c, h, w = x.shape
    if h != w or h % patch_size:
        raise ValueError(f"image {h}x{w} cannot be split into {patch_size}px patches")
    g = h // patch_size
    x = x.reshape(b, c, g, patch_size, g, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, c * patch_size * patch_size))


def unpatchify(patches, config: ViTConfig) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    x = np.asarray(patches.data if isinstance(patches, Tensor) else patches, dtype=np.float64)
    p, c, g = config.patch_size, config.channels, config.grid
    if x.ndim != 3 or x.shape[1] != g * g or x.shape[2] != c * p * p:
        raise ValueError(f"patches of shape {x.shape} do not match config "
                         f"(P={g * g}, patch_dim={c * p * p})")
    b = x.shape[0]
    x = x.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x.reshape(b, c, g * p, g * p))


# -- transformer pieces --------------------------------------------------------

def attention(params: ModelParams, prefix: str, x: Tensor, num_heads: int,
              probs_out: list | None = None) -> Tensor:
    b, n, d = x.shape
    dh = d // num_heads
    qkv = T.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = qkv.reshape(b, n, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (dh ** -0.5)
    probs = T.softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(probs.data)
    out = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return T.linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def block(params: ModelParams, prefix: str, x: Tensor, num_heads: int, eps: float,
          probs_out: list | None = None) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.b"], eps)
    x = x + attention(params, f"{prefix}.attn", h, num_heads, probs_out)
    h = T.layer_norm(x, params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.b"], eps)
    h = T.gelu(T.linear(h, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"]))
    return x + T.linear(h, params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])


@dataclass
class TokenBatch:
    """Encoder output.

    ``tokens`` is [b, n, dim] after the final norm. ``position_ids`` gives each
    token's patch index (-1 for the class token) and ``visible`` whether its patch
    was visible. ``block_outputs`` holds the residual stream after every block when
    requested.
    """

    tokens: Tensor
    position_ids: np.ndarray
    visible: np.ndarray
    mode: MaskHandling
    mask: np.ndarray
    block_outputs: list = field(default_factory=list)
    attention_probs: list = field(default_factory=list)

    @property
    def num_prefix(self) -> int:
        return int((self.position_ids[0] < 0).sum())


def _mask_bits(mask, batch: int, num_patches: int) -> np.ndarray:
    bits = mask.bits if isinstance(mask, PatchMask) else np.asarray(mask, dtype=bool)
    if bits.shape[-1] != num_patches:
        raise ValueError(f"mask length {bits.shape[-1]} does not match {num_patches} patches")
    if bits.ndim == 1:
        bits = np.broadcast_to(bits, (batch, num_patches))
    if bits.shape[0] != batch:
        raise ValueError(f"mask batch {bits.shape[0]} does not match input batch {batch}")
    return np.ascontiguousarray(bits)


def encoder_forward(
    params: ModelParams,
    patches,
    mask=None,
    mode: MaskHandling | str | None = None,
    keep_blocks: bool = False,
    keep_attention: bool = False,
) -> TokenBatch:
    """Run the encoder on [b, P, patch_dim] patches under a visibility mask.

    ``DROP_TOKENS`` feeds only visible patches (each with the positional
    embedding of its original slot). ``MASK_TOKEN`` swaps hidden patches for the
    learned mask token and processes all P tokens.
    """
    cfg = params.config
    mode = MaskHandling(mode or cfg.mask_handling)
    patches = T.as_tensor(patches)
    b, n_patches, _ = patches.shape
    if n_patches != cfg.num_patches:
        raise ValueError(f"expected {cfg.num_patches} patches, got {n_patches}")
    bits = np.ones((b, n_patches), dtype=bool) if mask is None else _mask_bits(mask, b, n_patches)

    x = T.linear(patches, params["patch_embed.w"], params["patch_embed.b"])
    pos = params["pos_embed"]
    pre = cfg.num_prefix
    if mode is MaskHandling.DROP_TOKENS:
        n_keep = bits.sum(axis=1)
        if not np.all(n_keep == n_keep[0]):
            raise ValueError("DropTokens needs the same number of visible patches in every image")
        ids_keep = np.stack([np.flatnonzero(row) for row in bits]).reshape(b, int(n_keep[0]))
        rows = np.arange(b)[:, None]
        x = x[rows, ids_keep] + pos[0][pre + ids_keep]
        position_ids = ids_keep
        visible = np.ones_like(ids_keep, dtype=bool)
    else:
        if "mask_token" not in params:
            raise ValueError("MaskToken mode needs a mask_token parameter")
        x = T.where(bits[:, :, None], x, params["mask_token"]) + pos[:, pre:]
        position_ids = np.broadcast_to(np.arange(n_patches), (b, n_patches)).copy()
        visible = bits.copy()

    if cfg.use_class_token:
        cls = params["cls_token"] + pos[:, :1]
        x = T.concat([T.broadcast_to(cls, (b, 1, cfg.embed_dim)), x], axis=1)
        position_ids = np.concatenate([np.full((b, 1), -1), position_ids], axis=1)
        visible = np.concatenate([np.ones((b, 1), dtype=bool), visible], axis=1)

    blocks_out, probs = [], []
    for i in range(cfg.depth):
        x = block(params, f"blocks.{i}", x, cfg.num_heads, cfg.ln_eps, probs if keep_attention else None)
        if keep_blocks:
            blocks_out.append(x)
    x = T.layer_norm(x, params["norm.g"], params["norm.b"], cfg.ln_eps)
    return TokenBatch(x, position_ids, visible, mode, bits, blocks_out, probs)


def decoder_forward(params: ModelParams, encoded: TokenBatch, mask=None) -> Tensor:
    """Predict pixels for all P patches: [b, P, patch_dim].

    In DropTokens mode the decoder mask token is inserted at every hidden slot
    before decoding; the class token (if any) is dropped from the output.
    """
    cfg = params.config
    tokens = encoded.tokens
    b, n, _ = tokens.shape
    bits = encoded.mask if mask is None else _mask_bits(mask, b, cfg.num_patches)
    pre = cfg.num_prefix
    x = T.linear(tokens, params["decoder_embed.w"], params["decoder_embed.b"])

    if encoded.mode is MaskHandling.DROP_TOKENS:
        n_vis = int(bits[0].sum())
        if n != pre + n_vis:
            raise ValueError(f"{n} encoded tokens inconsistent with {n_vis} visible patches")
        n_mask = cfg.num_patches - n_vis
        parts = [x[:, pre:]]
        if n_mask:
            parts.append(T.broadcast_to(params["decoder_mask_token"], (b, n_mask, cfg.decoder_dim)))
        seq = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        # visible first (in position order), then hidden; invert that ordering
        order = np.argsort(~bits, axis=1, kind="stable")
        restore = np.argsort(order, axis=1, kind="stable")
        seq = seq[np.arange(b)[:, None], restore]
        x = T.concat([x[:, :pre], seq], axis=1) if pre else seq
    elif n != pre + cfg.num_patches:
        raise ValueError(f"{n} encoded tokens inconsistent with MaskToken layout")

    x = x + params["decoder_pos_embed"]
    for i in range(cfg.decoder_depth):
        x = block(params, f"decoder_blocks.{i}", x, cfg.decoder_num_heads, cfg.ln_eps)
    x = T.layer_norm(x, params["decoder_norm.g"], params["decoder_norm.b"], cfg.ln_eps)
    x = T.linear(x, params["decoder_pred.w"], params["decoder_pred.b"])
    return x[:, pre:] if pre else x


def patch_tokens(batch: TokenBatch) -> Tensor:
    pre = batch.num_prefix
    return batch.tokens[:, pre:] if pre else batch.tokens


def pooled_features(params: ModelParams, patches, mask=None, mode=None) -> Tensor:
    """Mean over the (surviving) patch tokens of the final encoder output."""
    return patch_tokens(encoder_forward(params, patches, mask, mode)).mean(axis=1)


def classify(params: ModelParams, patches) -> Tensor:
    """Logits from a linear head on mean-pooled patch tokens."""
    feats = pooled_features(params, patches, None, MaskHandling.DROP_TOKENS)
    return T.linear(feats, params["head.w"], params["head.b"])
