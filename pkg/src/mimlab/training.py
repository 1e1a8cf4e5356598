"""AdamW with warmup + cosine decay, the pretraining loops and the evaluation protocols."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import paste_reconstruction, psnr
from .data import Dataset, load_dataset
from .masking import JitterParams, JitterScope, color_jitter, pixel_mask, sample_masks
from .objectives import AggregationStrategy, NegativePolicy, cross_entropy, mae_loss, rmae_loss
from .siamese import SiameseState, ema_update, siamese_objective, two_view_forward, two_view_instance_forward
from .storage import Checkpoint, save_checkpoint
from .tensor import Tensor
from .vit import (MaskHandling, ModelParams, ViTConfig, add_classifier, classify, decoder_forward,
                  encoder_forward, init_params, patchify, pooled_features, unpatchify)


class Mode(str, Enum):
    MAE = "mae"
    RMAE = "rmae"
    CMAE = "cmae"
    CMAE_BYOL = "cmae_byol"
    SUPERVISED = "supervised"


ARCH_FIELDS = ("image_size", "channels", "patch_size", "embed_dim", "depth", "num_heads", "mlp_ratio",
               "use_class_token")


@dataclass
class TrainConfig:
    mode: Mode = Mode.MAE
    model: ViTConfig = field(default_factory=ViTConfig)
    base_lr: float = 1.5e-4
    batch_size: int = 64
    warmup_epochs: int = 2
    total_epochs: int = 20
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    lam: float = 1.0
    tau: float = 0.2
    momentum: float = 0.996
    mask_ratio: float = 0.75
    patch_norm: bool = True
    strategy: AggregationStrategy = AggregationStrategy.TOKEN_WISE
    negative_policy: NegativePolicy = NegativePolicy.SAME_POSITION_ACROSS_BATCH
    symmetric: bool = True
    jitter: JitterParams = field(default_factory=JitterParams)
    grad_clip: float | None = None
    repeats: int = 1
    seed: int = 0
    dataset: str = "synthetic:n=512,classes=4,image_size=32,seed=0"
    eval_dataset: str | None = None
    eval_fraction: float = 0.2
    label_fraction: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if isinstance(self.model, dict):
            self.model = ViTConfig(**self.model)
        if isinstance(self.jitter, dict):
            self.jitter = JitterParams(**self.jitter)
        self.strategy = AggregationStrategy(self.strategy)
        self.negative_policy = NegativePolicy(self.negative_policy)
        self.betas = tuple(float(b) for b in self.betas)

    @classmethod
    def for_mode(cls, mode, **overrides) -> "TrainConfig":
        """Defaults per objective (desk-scale miniature of the reference recipes)."""
        mode = Mode(mode)
        base: dict = {"mode": mode}
        if mode is Mode.RMAE:
            base["base_lr"] = 3.0e-4
        elif mode in (Mode.CMAE, Mode.CMAE_BYOL):
            base["model"] = ViTConfig(mask_handling=MaskHandling.MASK_TOKEN)
            base["jitter"] = JitterParams(scope=JitterScope.WHOLE_IMAGE)
        elif mode is Mode.SUPERVISED:
            base.update(base_lr=1.0e-3, warmup_epochs=1, betas=(0.9, 0.999))
        base.update(overrides)
        return cls(**base)

    @property
    def effective_lr(self) -> float:
        """Linear scaling rule: base_lr * batch_size / 256."""
        return self.base_lr * self.batch_size / 256.0

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        for name in ("base_lr", "batch_size", "tau", "repeats"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lam must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.mode in (Mode.CMAE, Mode.CMAE_BYOL):
            if self.strategy.needs_class_token and not self.model.use_class_token:
                raise ValueError(f"strategy {self.strategy.value} needs use_class_token")
            if self.mode is Mode.CMAE and self.batch_size < 2:
                raise ValueError("InfoNCE needs batch_size >= 2 for negatives")
        if self.mode in (Mode.MAE, Mode.RMAE) and self.mask_ratio == 0.0:
            raise ValueError("reconstruction objectives need mask_ratio > 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ViTConfig):
                v = v.to_dict()
            elif isinstance(v, JitterParams):
                v = {**asdict(v), "scope": v.scope.value}
            elif isinstance(v, Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsLog:
    """Append-only per-epoch records plus evaluation results.

    Wall-clock times are kept apart from ``records`` so that the records stay
    bit-identical across reruns.
    """

    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def append(self, epoch: int, **values) -> None:
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} does not follow {self.records[-1]['epoch']}")
        self.records.append({"epoch": int(epoch), **values})

    def add_eval(self, epoch: int, **values) -> None:
        self.evals.append({"epoch": int(epoch), **values})

    def column(self, key: str) -> list:
        return [r.get(key) for r in self.records]


# -- schedule and optimizer --------------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    @classmethod
    def from_config(cls, config: TrainConfig, steps_per_epoch: int) -> "LRSchedule":
        return cls(config.effective_lr, config.warmup_epochs * steps_per_epoch,
                   config.total_epochs * steps_per_epoch)


def cosine_lr(step: int, schedule: LRSchedule) -> float:
    """Linear warmup from 0 to the peak, then half-cosine decay to 0 at ``total_steps``."""
    s = min(max(step, 0), schedule.total_steps)
    if s < schedule.warmup_steps:
        return schedule.peak_lr * s / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (s - schedule.warmup_steps) / span if span > 0 else 1.0
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               wd: float, betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One decoupled-weight-decay Adam update; ``m`` and ``v`` are updated in place.

    ``t`` is the 1-based step count used for bias correction.
    """
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    param = param * (1.0 - lr * wd)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def decays(name: str) -> bool:
    """Weight decay only for projection matrices, not biases, norms, tokens or embeddings."""
    return name.endswith(".w")


class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, lr: float) -> None:
        self.t += 1
        for name, p in params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            wd = self.weight_decay if decays(name) else 0.0
            p.data = adamw_step(p.data, p.grad, self.m[name], self.v[name], self.t, lr, wd, self.betas, self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    grads = [p.grad for _, p in params.items() if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in params.items():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- pretraining ---------------------------------------------------------------

def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    init, run, head = np.random.SeedSequence(seed).spawn(3)
    return {"init": init, "run": run, "head": head}


def init_checkpoint(config: TrainConfig) -> Checkpoint:
    """A checkpoint holding the seed-determined initial weights and nothing else."""
    params = init_params(config.model, np.random.default_rng(seed_streams(config.seed)["init"]))
    return Checkpoint(config.model, params, train_config=config.to_dict())


def batches(n: int, batch_size: int, order: np.ndarray, min_size: int = 1):
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def _epoch_order(n: int, repeats: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.tile(np.arange(n), repeats))


def _steps_per_epoch(n: int, config: TrainConfig) -> int:
    total = n * config.repeats
    full, rest = divmod(total, config.batch_size)
    return full + (1 if rest >= 2 else 0)


def _mae_inputs(images: np.ndarray, bits: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """Encoder input and reconstruction target, after the optional jitter ablations."""
    scope = config.jitter.scope
    if scope is JitterScope.NONE:
        return images, images
    p = config.model.patch_size
    pix = pixel_mask(bits, images.shape[-1], p)
    jittered = np.stack([color_jitter(images[i], config.jitter, rng, pix[i]) for i in range(len(images))])
    if scope is JitterScope.WHOLE_IMAGE:
        return jittered, jittered
    return jittered, images


def _mae_step(params, images, bits, config, rng):
    inp, target = _mae_inputs(images, bits, config, rng)
    cfg = params.config
    in_patches = patchify(inp, cfg.patch_size)
    tgt_patches = patchify(target, cfg.patch_size)
    pred = decoder_forward(params, encoder_forward(params, in_patches, bits), bits)
    loss = mae_loss(pred, tgt_patches, bits, config.patch_norm)
    recon = unpatchify(paste_reconstruction(pred, tgt_patches, bits, config.patch_norm), cfg)
    return loss, {"psnr": psnr(recon, target)}


def _rmae_step(params, images, bits, config, rng):
    cfg = params.config
    patches = patchify(images, cfg.patch_size)
    out = rmae_loss(params, patches, bits, config.lam, config.patch_norm)
    rec1 = unpatchify(paste_reconstruction(out.pred_masked_view, patches, bits, config.patch_norm), cfg)
    rec2 = unpatchify(paste_reconstruction(out.pred_complement_view, patches, bits, config.patch_norm), cfg)
    return out.total, {"distance_term": out.distance.item(), "constraint_term": out.constraint.item(),
                       "psnr": psnr(rec1, images), "constraint_psnr": psnr(rec2, images)}


def _siamese_step(state: SiameseState, images, bits, config, rng):
    mode = state.online.config.mask_handling
    if mode is MaskHandling.MASK_TOKEN:
        out = two_view_forward(state, images, bits, config.jitter, rng, mode, config.symmetric)
    else:
        out = two_view_instance_forward(state, images, bits, config.jitter, rng, mode, config.symmetric)
    loss = siamese_objective(out, config.strategy, config.tau, config.negative_policy,
                             byol=config.mode is Mode.CMAE_BYOL)
    return loss, {}


@dataclass
class _Run:
    config: TrainConfig
    params: ModelParams
    optimizer: AdamW
    rng: np.random.Generator
    state: SiameseState | None = None
    epoch: int = 0
    step: int = 0
    log: MetricsLog = field(default_factory=MetricsLog)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.params.config, self.params,
                          None if self.state is None else self.state.target,
                          self.optimizer.state_dict(), self.config.to_dict(), self.rng.bit_generator.state,
                          self.epoch, self.step, [dict(r) for r in self.log.records],
                          {"evals": [dict(e) for e in self.log.evals]})


def _new_run(config: TrainConfig, resume: Checkpoint | None) -> _Run:
    streams = seed_streams(config.seed)
    opt = AdamW(config.betas, config.adam_eps, config.weight_decay)
    if resume is None:
        params = init_params(config.model, np.random.default_rng(streams["init"]))
        run = _Run(config, params, opt, np.random.default_rng(streams["run"]))
        if config.mode in (Mode.CMAE, Mode.CMAE_BYOL):
            run.state = SiameseState.from_online(params, config.momentum)
        return run
    params = resume.params
    rng = np.random.default_rng(streams["run"])
    if resume.rng_state is not None:
        rng.bit_generator.state = resume.rng_state
    if resume.optimizer is not None:
        opt.load_state_dict(resume.optimizer)
    run = _Run(config, params, opt, rng, epoch=resume.epoch, step=resume.step)
    run.log.records = [dict(r) for r in resume.metrics]
    run.log.evals = [dict(e) for e in resume.extra.get("evals", [])]
    if config.mode in (Mode.CMAE, Mode.CMAE_BYOL):
        target = resume.target if resume.target is not None else params.copy(requires_grad=False)
        run.state = SiameseState(params, target, config.momentum)
    return run


def pretrain(
    config: TrainConfig,
    dataset: Dataset | None = None,
    *,
    resume: Checkpoint | None = None,
    stop_after_epoch: int | None = None,
    checkpoint_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, MetricsLog]:
    """Run one self-supervised objective (or supervised training) end to end.

    ``resume`` continues from a mid-run checkpoint; ``stop_after_epoch`` ends
    the run early (the schedule still spans ``total_epochs``).
    """
    config.validate()
    if dataset is None:
        dataset = load_dataset(config.dataset, require_labels=config.mode is Mode.SUPERVISED)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    _check_images(dataset, config.model)
    if config.mode is Mode.SUPERVISED:
        return _supervised_run(config, dataset, resume, stop_after_epoch, checkpoint_path, on_epoch)

    run = _new_run(config, resume)
    n = len(dataset)
    spe = _steps_per_epoch(n, config)
    if spe == 0:
        raise ValueError("dataset too small for a single batch")
    schedule = LRSchedule.from_config(config, spe)
    cfg = config.model
    min_batch = 2

    end = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)
    while run.epoch < end:
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        count = 0
        lr = 0.0
        order = _epoch_order(n, config.repeats, run.rng)
        for idx in batches(len(order), config.batch_size, order, min_batch):
            images = dataset.images[idx]
            bits = sample_masks(len(idx), cfg.num_patches, config.mask_ratio, run.rng)
            lr = cosine_lr(run.step, schedule)
            if config.mode is Mode.MAE:
                loss, extra = _mae_step(run.params, images, bits, config, run.rng)
            elif config.mode is Mode.RMAE:
                loss, extra = _rmae_step(run.params, images, bits, config, run.rng)
            else:
                loss, extra = _siamese_step(run.state, images, bits, config, run.rng)
            loss.backward()
            if config.grad_clip:
                clip_grad_norm(run.params, config.grad_clip)
            run.optimizer.step(run.params, lr)
            run.params.zero_grad()
            if run.state is not None:
                ema_update(run.state)
            run.step += 1
            count += 1
            for k, v in {"loss": loss.item(), **extra}.items():
                sums[k] = sums.get(k, 0.0) + v
        means = {k: v / count for k, v in sums.items()}
        record = {"loss": means["loss"], "distance_term": None, "constraint_term": None,
                  "psnr": means.get("psnr"), "lr": lr}
        if config.mode is Mode.RMAE:
            record["distance_term"] = means["distance_term"]
            record["constraint_term"] = means["constraint_term"]
            record["loss"] = means["distance_term"] + config.lam * means["constraint_term"]
            record["constraint_psnr"] = means["constraint_psnr"]
        run.epoch += 1
        run.log.append(run.epoch, **record)
        run.log.wall_times.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(run.log.records[-1])
        if checkpoint_path and config.checkpoint_every and run.epoch % config.checkpoint_every == 0:
            save_checkpoint(run.checkpoint(), checkpoint_path)

    ckpt = run.checkpoint()
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, run.log


def _check_images(dataset: Dataset, cfg: ViTConfig) -> None:
    _, c, h, w = dataset.images.shape
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"dataset images {c}x{h}x{w} do not match model "
                         f"{cfg.channels}x{cfg.image_size}x{cfg.image_size}")


# -- supervised protocols -------------------------------------------------------

def split_dataset(dataset: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(dataset))
    n_eval = int(round(len(dataset) * eval_fraction))
    if n_eval == 0 or n_eval == len(dataset):
        raise ValueError(f"eval_fraction {eval_fraction} leaves an empty split")
    return dataset.subset(np.sort(order[n_eval:]), split="train"), dataset.subset(np.sort(order[:n_eval]), split="eval")


def _eval_split(dataset: Dataset, eval_dataset: Dataset | None, config: TrainConfig):
    if dataset.labels is None:
        raise ValueError("supervised protocols need labels")
    if eval_dataset is None and config.eval_dataset:
        eval_dataset = load_dataset(config.eval_dataset, require_labels=True)
    if eval_dataset is None:
        train, evaluation = split_dataset(dataset, config.eval_fraction, config.seed)
    elif eval_dataset.labels is None:
        raise ValueError("evaluation set needs labels")
    else:
        train, evaluation = dataset, eval_dataset
    return label_subset(train, config.label_fraction, config.seed), evaluation


def label_subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded random ``fraction`` of a labeled training set (e.g. 0.1 for 10%-label fine-tuning)."""
    if fraction >= 1.0:
        return dataset
    n = max(2, int(round(len(dataset) * fraction)))
    order = np.random.default_rng([seed, 11]).permutation(len(dataset))
    return dataset.subset(np.sort(order[:n]), label_fraction=fraction)


def _num_classes(train: Dataset, evaluation: Dataset, config: TrainConfig) -> int:
    k = max(train.num_classes, int(train.labels.max()) + 1)
    if int(evaluation.labels.max()) >= k:
        raise ValueError("evaluation labels contain classes unseen in training")
    if config.model.num_classes and config.model.num_classes != k:
        raise ValueError(f"config declares {config.model.num_classes} classes, data has {k}")
    return k


def accuracy(params: ModelParams, dataset: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            logits = classify(params, patchify(dataset.images[sl], params.config.patch_size))
            correct += int((logits.data.argmax(axis=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


def _encoder_from(checkpoint: Checkpoint | None, config: TrainConfig) -> ModelParams:
    if checkpoint is None:
        return init_checkpoint(config).params
    have, want = checkpoint.vit_config.to_dict(), config.model.to_dict()
    diff = [k for k in ARCH_FIELDS if have[k] != want[k]]
    if diff:
        raise ValueError(f"checkpoint architecture differs from config in {diff}")
    return checkpoint.params.copy(requires_grad=True)


def _classifier_loop(params: ModelParams, train: Dataset, evaluation: Dataset, config: TrainConfig,
                     rng: np.random.Generator, log: MetricsLog, on_epoch=None, start_epoch: int = 0,
                     optimizer: AdamW | None = None, stop_after_epoch: int | None = None) -> tuple[float, AdamW]:
    opt = optimizer or AdamW(config.betas, config.adam_eps, config.weight_decay)
    spe = _steps_per_epoch(len(train), config)
    schedule = LRSchedule.from_config(config, spe)
    step = start_epoch * spe
    acc = float("nan")
    end = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)
    for epoch in range(start_epoch, end):
        t0 = time.perf_counter()
        total, count, lr = 0.0, 0, 0.0
        order = _epoch_order(len(train), config.repeats, rng)
        for idx in batches(len(order), config.batch_size, order, 2):
            lr = cosine_lr(step, schedule)
            logits = classify(params, patchify(train.images[idx], params.config.patch_size))
            loss = cross_entropy(logits, train.labels[idx])
            loss.backward()
            if config.grad_clip:
                clip_grad_norm(params, config.grad_clip)
            opt.step(params, lr)
            params.zero_grad()
            total += loss.item()
            count += 1
            step += 1
        acc = accuracy(params, evaluation)
        log.append(epoch + 1, loss=total / count, distance_term=None, constraint_term=None, psnr=None, lr=lr)
        log.add_eval(epoch + 1, accuracy=acc)
        log.wall_times.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch({**log.records[-1], "accuracy": acc})
    return acc, opt


def _prepare_classifier(checkpoint, train, evaluation, config):
    encoder = _encoder_from(checkpoint, config)
    k = _num_classes(train, evaluation, config)
    params = add_classifier(encoder, k, np.random.default_rng(seed_streams(config.seed)["head"]))
    params["norm.g"] = Tensor(np.ones_like(params["norm.g"].data), requires_grad=True)
    params["norm.b"] = Tensor(np.zeros_like(params["norm.b"].data), requires_grad=True)
    return params


def train_classifier(checkpoint: Checkpoint | None, dataset: Dataset, config: TrainConfig,
                     eval_dataset: Dataset | None = None, on_epoch=None) -> tuple[ModelParams, float, MetricsLog]:
    """:func:`finetune` that also returns the trained parameters.

    The checkpoint itself is never modified.
    """
    config.validate()
    train, evaluation = _eval_split(dataset, eval_dataset, config)
    _check_images(train, config.model)
    params = _prepare_classifier(checkpoint, train, evaluation, config)
    rng = np.random.default_rng(seed_streams(config.seed)["run"])
    log = MetricsLog()
    acc, _ = _classifier_loop(params, train, evaluation, config, rng, log, on_epoch)
    return params, acc, log


def finetune(checkpoint: Checkpoint | None, dataset: Dataset, config: TrainConfig,
             eval_dataset: Dataset | None = None, on_epoch=None) -> tuple[float, MetricsLog]:
    """End-to-end supervised training from ``checkpoint`` (``None`` = from scratch).

    The classifier reads mean-pooled patch tokens; the final norm is reset
    before training. Returns top-1 accuracy on the held-out split after the
    last epoch.
    """
    _, acc, log = train_classifier(checkpoint, dataset, config, eval_dataset, on_epoch)
    return acc, log


def _supervised_run(config, dataset, resume, stop_after_epoch, checkpoint_path, on_epoch):
    train, evaluation = _eval_split(dataset, None, config)
    log = MetricsLog()
    rng = np.random.default_rng(seed_streams(config.seed)["run"])
    opt = AdamW(config.betas, config.adam_eps, config.weight_decay)
    start = 0
    if resume is None:
        params = _prepare_classifier(None, train, evaluation, config)
    else:
        params = resume.params
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        if resume.optimizer is not None:
            opt.load_state_dict(resume.optimizer)
        start = resume.epoch
        log.records = [dict(r) for r in resume.metrics]
        log.evals = [dict(e) for e in resume.extra.get("evals", [])]
    _classifier_loop(params, train, evaluation, config, rng, log, on_epoch, start, opt, stop_after_epoch)
    epoch = log.records[-1]["epoch"] if log.records else start
    spe = _steps_per_epoch(len(train), config)
    ckpt = Checkpoint(params.config, params, None, opt.state_dict(), config.to_dict(), rng.bit_generator.state,
                      epoch, epoch * spe, [dict(r) for r in log.records], {"evals": [dict(e) for e in log.evals]})
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, log


def extract_features(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Frozen mean-pooled patch-token features (no graph is recorded)."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            patches = patchify(images[start:start + batch_size], params.config.patch_size)
            out.append(pooled_features(params, patches, None, MaskHandling.DROP_TOKENS).data)
    return np.concatenate(out)


def fit_linear_head(features: np.ndarray, labels: np.ndarray, num_classes: int, config: TrainConfig,
                    rng: np.random.Generator) -> dict[str, Tensor]:
    """Train a single linear layer on fixed features; returns ``{"w", "b"}``."""
    dim = features.shape[1]
    head = {"w": Tensor(np.zeros((dim, num_classes)), requires_grad=True),
            "b": Tensor(np.zeros(num_classes), requires_grad=True)}
    holder = ModelParams(config.model, {"head.w": head["w"], "head.b": head["b"]})
    opt = AdamW(config.betas, config.adam_eps, config.weight_decay)
    spe = _steps_per_epoch(len(features), config)
    schedule = LRSchedule.from_config(config, spe)
    step = 0
    for _ in range(config.total_epochs):
        order = _epoch_order(len(features), config.repeats, rng)
        for idx in batches(len(order), config.batch_size, order, 2):
            logits = T.linear(Tensor(features[idx]), head["w"], head["b"])
            cross_entropy(logits, labels[idx]).backward()
            opt.step(holder, cosine_lr(step, schedule))
            holder.zero_grad()
            step += 1
    return head


def linear_probe(checkpoint: Checkpoint | None, dataset: Dataset, config: TrainConfig,
                 eval_dataset: Dataset | None = None) -> float:
    """Accuracy of a linear classifier on frozen, standardized encoder features."""
    config.validate()
    train, evaluation = _eval_split(dataset, eval_dataset, config)
    _check_images(train, config.model)
    encoder = _encoder_from(checkpoint, config)
    k = _num_classes(train, evaluation, config)
    f_train = extract_features(encoder, train.images)
    f_eval = extract_features(encoder, evaluation.images)
    mu, sd = f_train.mean(axis=0), f_train.std(axis=0) + 1e-6
    f_train, f_eval = (f_train - mu) / sd, (f_eval - mu) / sd
    head = fit_linear_head(f_train, train.labels, k, config,
                           np.random.default_rng(seed_streams(config.seed)["run"]))
    pred = (f_eval @ head["w"].data + head["b"].data).argmax(axis=1)
    return float((pred == evaluation.labels).mean())


# -- few-image subsets ----------------------------------------------------------

class SubsampleStrategy(str, Enum):
    IN_ONE_CLASS = "in_one_class"
    RANDOM = "random"
    ONE_PER_CLASS = "one_per_class"


def subsample_dataset(dataset: Dataset, strategy, n: int, seed: int) -> Dataset:
    """Deterministic ``n``-image subset; the class histogram is recorded in provenance."""
    strategy = SubsampleStrategy(strategy)
    rng = np.random.default_rng(seed)
    if n <= 0 or n > len(dataset):
        raise ValueError(f"cannot draw {n} images from {len(dataset)}")
    if strategy is SubsampleStrategy.RANDOM:
        idx = rng.choice(len(dataset), size=n, replace=False)
    else:
        if dataset.labels is None:
            raise ValueError(f"strategy {strategy.value} needs labels")
        classes = np.unique(dataset.labels)
        if strategy is SubsampleStrategy.ONE_PER_CLASS:
            if n > len(classes):
                raise ValueError(f"one_per_class needs n <= {len(classes)} classes, got {n}")
            chosen = rng.choice(classes, size=n, replace=False)
            idx = np.array([rng.choice(np.flatnonzero(dataset.labels == c)) for c in chosen])
        else:
            feasible = [c for c in classes if (dataset.labels == c).sum() >= n]
            if not feasible:
                raise ValueError(f"no class has {n} images")
            c = feasible[int(rng.integers(len(feasible)))]
            idx = rng.choice(np.flatnonzero(dataset.labels == c), size=n, replace=False)
    idx = np.sort(idx)
    sub = dataset.subset(idx, subsample={"strategy": strategy.value, "n": n, "seed": seed})
    sub.provenance["class_histogram"] = sub.class_histogram()
    return sub
