"""Two-stage training: projector-only alignment, then full fine-tuning on a mixed stream."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import DatasetManifest, preprocess_manifest
from .errors import ConfigError, SequenceLengthError, TrainingAborted
from .language import sequence_layout
from .model import CaptionModel
from .nn import Parameter
from .tensor import no_grad

log = logging.getLogger(__name__)

DEFAULT_BASE_LR = 2e-5
DEFAULT_BATCH_SIZE = 8


@dataclass(frozen=True)
class FreezePolicy:
    encoder_trainable: bool
    lm_trainable: bool
    projector_trainable: bool

    @classmethod
    def for_stage(cls, stage: int) -> "FreezePolicy":
        if stage == 1:
            return cls(False, False, True)
        if stage == 2:
            return cls(True, True, True)
        raise ConfigError(f"unknown training stage {stage}; expected 1 or 2")

    def apply(self, model: CaptionModel) -> None:
        model.encoder.set_trainable(self.encoder_trainable)
        model.lm.set_trainable(self.lm_trainable)
        model.projector.set_trainable(self.projector_trainable)


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    base_lr: float = DEFAULT_BASE_LR
    min_lr: float | None = None  # default base_lr / 10
    warmup_steps: int | None = None  # default 3% of total_steps
    total_steps: int = 100
    clip_norm: float = 1.0
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    mixture_weights: tuple[float, ...] = (1.0,)
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.min_lr is None:
            set_("min_lr", self.base_lr / 10)
        if self.warmup_steps is None:
            set_("warmup_steps", int(round(0.03 * self.total_steps)))
        set_("mixture_weights", tuple(float(w) for w in self.mixture_weights))
        if self.stage not in (1, 2):
            raise ConfigError(f"unknown training stage {self.stage}; expected 1 or 2")
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 < min_lr <= base_lr, got {self.min_lr} and {self.base_lr}")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.total_steps and self.warmup_steps >= self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} must be below total_steps {self.total_steps}")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if any(w < 0 for w in self.mixture_weights) or not any(self.mixture_weights):
            raise ConfigError("mixture weights must be non-negative and not all zero")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if step >= cfg.total_steps:
        return cfg.min_lr
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    if step == cfg.warmup_steps:
        return cfg.base_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before clipping)."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads], norm


class OptimizerStateError(ValueError):
    pass


@dataclass
class AdamW:
    """AdamW with decoupled weight decay; state only for parameters trainable at construction."""

    params: list[tuple[str, Parameter]]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.params = [(n, p) for n, p in self.params if p.requires_grad]
        for name, p in self.params:
            self.moments.setdefault(name, (np.zeros_like(p.data), np.zeros_like(p.data)))

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1.0 - self.beta1**t, 1.0 - self.beta2**t
        with no_grad():
            for name, p in self.params:
                m, v = self.moments[name]
                g = np.zeros_like(p.data) if p.grad is None else p.grad
                if g.shape != p.data.shape or m.shape != p.data.shape:
                    raise OptimizerStateError(f"{name}: gradient {g.shape} / state {m.shape} vs parameter {p.shape}")
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data -= (lr * self.weight_decay) * p.data + lr * update


def mix_batches(sources: Sequence[int | Sequence], weights: Sequence[float], batch_size: int,
                seed: int) -> Iterator[tuple[int, np.ndarray]]:
    """Endless stream of ``(source index, sample indices)`` batches.

    Each batch comes from one source, chosen with probability proportional
    to its weight; within a source samples are drawn without replacement,
    reshuffling at each epoch boundary.
    """
    sizes = [s if isinstance(s, int) else len(s) for s in sources]
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(sizes):
        raise ConfigError(f"{len(sizes)} sources but {len(weights)} mixture weights")
    if (weights < 0).any() or weights.sum() <= 0:
        raise ConfigError("mixture weights must be non-negative and not all zero")
    for i, (n, w) in enumerate(zip(sizes, weights)):
        if n == 0 and w > 0:
            raise ConfigError(f"source {i} is empty but has weight {w}")
    rng = np.random.default_rng(seed)
    probs = weights / weights.sum()
    orders = [rng.permutation(n) for n in sizes]
    cursors = [0] * len(sizes)
    while True:
        src = int(rng.choice(len(sizes), p=probs))
        picked = []
        while len(picked) < batch_size:
            if cursors[src] == sizes[src]:
                orders[src] = rng.permutation(sizes[src])
                cursors[src] = 0
            take = min(batch_size - len(picked), sizes[src] - cursors[src])
            picked.extend(orders[src][cursors[src] : cursors[src] + take])
            cursors[src] += take
        yield src, np.asarray(picked, dtype=np.int64)


@dataclass
class CaptionDataset:
    """Preprocessed images and tokenised turns for one data source."""

    images: np.ndarray
    instructions: list[list[int]]
    responses: list[list[int]]
    name: str = ""

    def __len__(self) -> int:
        return len(self.responses)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, model: CaptionModel, name: str = "") -> "CaptionDataset":
        tok = model.tokenizer
        instructions = [tok.tokenize(s.instruction) for s in manifest]
        responses = [tok.tokenize(s.response) for s in manifest]
        limit = model.lm.config.max_seq_len
        for i, (a, b) in enumerate(zip(instructions, responses)):
            length = sequence_layout(model.num_image_tokens, len(a), len(b))[-1]
            if length > limit:
                raise SequenceLengthError(f"sample {i} of {name or 'dataset'} needs {length} positions (> {limit})")
        images = preprocess_manifest(manifest, model.image_size).astype(model.lm.tok_embed.dtype)
        return cls(images, instructions, responses, name)


@dataclass
class StageResult:
    steps: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def rows(self):
        return zip(self.steps, self.lrs, self.losses)


def run_stage(model: CaptionModel, data: Sequence[CaptionDataset], cfg: TrainConfig,
              log_every: int = 0) -> StageResult:
    """Train in place for ``cfg.total_steps`` steps under the stage's freeze policy."""
    FreezePolicy.for_stage(cfg.stage).apply(model)
    opt = AdamW(list(model.named_parameters()), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    weights = cfg.mixture_weights
    if len(weights) != len(data):
        if weights != (1.0,):
            raise ConfigError(f"{len(data)} data sources but {len(weights)} mixture weights")
        weights = (1.0,) * len(data)
    stream = mix_batches(data, weights, cfg.batch_size, cfg.seed)
    result = StageResult()
    for step in range(cfg.total_steps):
        src, idx = next(stream)
        ds = data[src]
        lr = cosine_lr(step + 1, cfg)
        loss = model.loss(ds.images[idx], [ds.instructions[i] for i in idx], [ds.responses[i] for i in idx])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(
                f"non-finite loss at step {step} (lr {lr:.3g}, source {ds.name or src}, batch {idx.tolist()})",
                step=step, lr=lr, batch_ids=idx.tolist(),
            )
        opt.zero_grad()
        loss.backward()
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for _, p in opt.params]
        clipped, _ = clip_gradients(grads, cfg.clip_norm)
        for (_, p), g in zip(opt.params, clipped):
            p.grad = g
        opt.step(lr)
        result.steps.append(step)
        result.lrs.append(lr)
        result.losses.append(value)
        if log_every and (step % log_every == 0 or step == cfg.total_steps - 1):
            log.info("stage %d step %d lr %.3g loss %.4f", cfg.stage, step, lr, value)
    opt.zero_grad()
    return result


def write_loss_trace(result: StageResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in result.rows():
            w.writerow([step, repr(lr), repr(loss)])
