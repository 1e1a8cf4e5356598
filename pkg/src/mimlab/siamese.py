"""Online/target twins for the contrastive MAE: EMA teacher, heads, two-view forward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masking import JitterParams, JitterScope, color_jitter, pixel_mask, transform_pair
from .objectives import AggregationStrategy, NegativePolicy, cmae_byol_loss, cmae_loss
from .tensor import Tensor
from .vit import MaskHandling, ModelParams, encoder_forward, patchify


@dataclass
class SiameseState:
    online: ModelParams
    target: ModelParams
    momentum: float = 0.996

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.online.names() != self.target.names():
            raise ValueError("online and target parameter sets differ")

    @classmethod
    def from_online(cls, online: ModelParams, momentum: float = 0.996) -> "SiameseState":
        """Start with the target equal to the online network."""
        return cls(online, online.copy(requires_grad=False), momentum)


def ema_update(state: SiameseState, momentum: float | None = None) -> ModelParams:
    """target <- m * target + (1 - m) * online, in place, for every parameter."""
    m = state.momentum if momentum is None else float(momentum)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for name, tgt in state.target.items():
        src = state.online[name].data
        if src.shape != tgt.shape:
            raise ValueError(f"{name}: online {src.shape} vs target {tgt.shape}")
        if m == 1.0:
            continue
        if m == 0.0:
            tgt.data = src.copy()
        else:
            tgt.data = m * tgt.data + (1.0 - m) * src
    return state.target


def _mlp(params: ModelParams, prefix: str, x) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return T.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def head_forward(params: ModelParams, tokens, use_predictor: bool) -> Tensor:
    """Projector (and then predictor, if asked) applied independently to every token."""
    tokens = T.as_tensor(tokens)
    expected = params["projector.fc1.w"].shape[0]
    if tokens.shape[-1] != expected:
        raise ValueError(f"token dim {tokens.shape[-1]} does not match projector input {expected}")
    out = _mlp(params, "projector", tokens)
    if use_predictor:
        out = _mlp(params, "predictor", out)
    return out


def make_views(images: np.ndarray, bits: np.ndarray, patch_size: int, jitter: JitterParams | None,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Complementary masked copies of each image, each independently color-jittered."""
    t1, t2 = transform_pair(images, bits, patch_size)
    if jitter is None or jitter.scope is JitterScope.NONE:
        return t1, t2
    pix = pixel_mask(bits, images.shape[-1], patch_size)
    v1 = np.stack([color_jitter(t1[i], jitter, rng, pix[i]) for i in range(len(images))])
    v2 = np.stack([color_jitter(t2[i], jitter, rng, ~pix[i]) for i in range(len(images))])
    return v1, v2


@dataclass
class TwoViewOutput:
    """Head outputs for both view assignments: (online, stop-gradient target) pairs."""

    pairs: list
    has_class_token: bool


def branch_tokens(state: SiameseState, view: np.ndarray, bits: np.ndarray, mode) -> tuple[Tensor, Tensor]:
    """Online tokens (projector + predictor) and detached target tokens (projector) for one view."""
    cfg = state.online.config
    patches = patchify(view, cfg.patch_size)
    online = head_forward(state.online, encoder_forward(state.online, patches, bits, mode).tokens, True)
    with T.no_grad():
        target = head_forward(state.target, encoder_forward(state.target, patches, bits, mode).tokens, False)
    return online, T.stop_gradient(target)


def two_view_forward(state: SiameseState, images: np.ndarray, bits: np.ndarray,
                     jitter: JitterParams | None, rng: np.random.Generator,
                     mode=MaskHandling.MASK_TOKEN, symmetric: bool = True) -> TwoViewOutput:
    """Encode view A = jitter(x * M) and view B = jitter(x * (1 - M)).

    The online branch of one view is paired with the target branch of the
    other. With ``symmetric`` both assignments are returned.
    """
    cfg = state.online.config
    mode = MaskHandling(mode)
    if mode is MaskHandling.DROP_TOKENS:
        raise ValueError("token-wise pairing needs aligned layouts; use mask_token mode "
                         "or an instance-level strategy via two_view_instance_forward")
    v1, v2 = make_views(np.asarray(images, dtype=np.float64), bits, cfg.patch_size, jitter, rng)
    on1, tg1 = branch_tokens(state, v1, bits, mode)
    pairs = []
    if symmetric:
        on2, tg2 = branch_tokens(state, v2, ~bits, mode)
        pairs = [(on1, tg2), (on2, tg1)]
    else:
        cfg2 = state.target.config
        patches = patchify(v2, cfg2.patch_size)
        with T.no_grad():
            tg2 = head_forward(state.target, encoder_forward(state.target, patches, ~bits, mode).tokens, False)
        pairs = [(on1, T.stop_gradient(tg2))]
    return TwoViewOutput(pairs, cfg.use_class_token)


def pooled_branch(state: SiameseState, view: np.ndarray, bits: np.ndarray, mode) -> tuple[Tensor, Tensor]:
    """Instance-level head outputs [b, 1(+1), d] when token layouts differ (DropTokens)."""
    cfg = state.online.config
    patches = patchify(view, cfg.patch_size)

    def pool(batch):
        toks = batch.tokens
        pre = batch.num_prefix
        parts = []
        if pre:
            parts.append(toks[:, :1])
        parts.append(toks[:, pre:].mean(axis=1, keepdims=True))
        return T.concat(parts, axis=1) if len(parts) > 1 else parts[0]

    online = head_forward(state.online, pool(encoder_forward(state.online, patches, bits, mode)), True)
    with T.no_grad():
        target = head_forward(state.target, pool(encoder_forward(state.target, patches, bits, mode)), False)
    return online, T.stop_gradient(target)


def two_view_instance_forward(state: SiameseState, images: np.ndarray, bits: np.ndarray,
                              jitter: JitterParams | None, rng: np.random.Generator,
                              mode=MaskHandling.DROP_TOKENS, symmetric: bool = True) -> TwoViewOutput:
    """Two-view forward that pools patch tokens before the heads.

    Used for the "w/o mask token" ablation, where the views keep different
    numbers of tokens and only instance-level pairing is meaningful. The pooled
    patch token is treated as a single-token sequence (MeanPatch == TokenWise).
    """
    cfg = state.online.config
    v1, v2 = make_views(np.asarray(images, dtype=np.float64), bits, cfg.patch_size, jitter, rng)
    on1, tg1 = pooled_branch(state, v1, bits, mode)
    on2, tg2 = pooled_branch(state, v2, ~bits, mode)
    pairs = [(on1, tg2), (on2, tg1)] if symmetric else [(on1, tg2)]
    return TwoViewOutput(pairs, cfg.use_class_token)


def siamese_objective(out: TwoViewOutput, strategy=AggregationStrategy.TOKEN_WISE, tau: float = 0.2,
                      negative_policy=NegativePolicy.SAME_POSITION_ACROSS_BATCH, byol: bool = False) -> Tensor:
    """Average of the per-assignment losses."""
    losses = []
    for online, target in out.pairs:
        if byol:
            losses.append(cmae_byol_loss(online, target, strategy, out.has_class_token))
        else:
            losses.append(cmae_loss(online, target, strategy, tau, negative_policy, out.has_class_token))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))
