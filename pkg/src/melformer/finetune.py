"""Supervised fine-tuning recipe.

Two independently augmented views of each batch (temporal jitter on the
waveform, one temporal mask on the logmel, mixup across the batch) feed the
full trainable conformer plus a pooling head. The loss is BCE on the first
view plus a weighted symmetric Bernoulli KL between the two views'
predictions. The learning rate follows a warmup / hold / exponential-decay
schedule over fixed fractions of the run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .dsp import Waveform, logmel, mel_filterbank
from .errors import ConfigError, DataError, ShapeError
from .metrics import EvalReport, evaluate_scores
from .model import ConformerModel, Linear, Module
from .pretrain import Adam, global_grad_norm, write_metrics_line
from .tensor import Tensor, backward

HEAD_KINDS = ("linear-softmax-pool", "mean-pool")

RNG_VIEW_A = 10
RNG_VIEW_B = 11
RNG_SAMPLING = 12
RNG_HEAD_DROPOUT_A = 13
RNG_HEAD_DROPOUT_B = 14

MAX_JITTER = 200  # samples; half the 64 ms analysis window hop side
MAX_TIME_MASK_FRAMES = 100  # 2 s at the 20 ms hop


def step_rng(seed: int, purpose: int, step: int, item: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, step, item])


@dataclass
class FinetuneConfig:
    head_kind: str = "mean-pool"
    num_classes: int = 2
    peak_lr: float = 1e-4
    total_steps: int = 1000
    stage_fractions: tuple = (0.30, 0.30, 0.40)
    final_lr_factor: float = 0.01
    batch_size: int = 16
    output_dropout: float = 0.0
    mixup_enabled: bool = True
    jitter_enabled: bool = True
    timemask_enabled: bool = True
    consistency_weight: float = 2.0
    balance_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        self.stage_fractions = tuple(self.stage_fractions)
        self.validate()

    def validate(self):
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")
        if len(self.stage_fractions) != 3 or any(f <= 0 for f in self.stage_fractions):
            raise ConfigError("stage_fractions must be three positive values")
        if abs(sum(self.stage_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"stage_fractions sum to {sum(self.stage_fractions)}, not 1")
        if self.consistency_weight < 0:
            raise ConfigError("consistency_weight must be >= 0")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0.0 <= self.output_dropout < 1.0:
            raise ConfigError("output_dropout outside [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LabeledExample:
    """A clip with its multi-hot targets; waveform preferred, logmel accepted."""

    targets: np.ndarray
    waveform: np.ndarray | None = None
    frames: np.ndarray | None = None

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.waveform is None and self.frames is None:
            raise DataError("labeled example needs a waveform or precomputed logmel")


# ---------------------------------------------------------------------------
# Augmentations (pure numpy, pre-graph)


def temporal_jitter(samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shift by a uniform integer in [-200, 200]; vacated samples are zeros."""
    samples = np.asarray(samples)
    if samples.size <= MAX_JITTER:
        raise DataError(f"waveform too short to jitter ({samples.size} samples)")
    shift = int(rng.integers(-MAX_JITTER, MAX_JITTER + 1))
    if shift == 0:
        return samples.copy()
    out = np.zeros_like(samples)
    if shift > 0:
        out[shift:] = samples[:-shift]
    else:
        out[:shift] = samples[-shift:]
    return out


def time_mask_augment(frames: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Blank one temporal interval of up to 2 s (never any frequency bands).

    The interval is filled with the clip's mean logmel value.
    """
    frames = np.asarray(frames)
    if frames.size == 0:
        raise DataError("empty logmel")
    t = frames.shape[0]
    max_len = min(MAX_TIME_MASK_FRAMES, t)
    length = int(rng.integers(0, max_len + 1))
    out = frames.copy()
    if length == 0:
        return out
    start = int(rng.integers(0, t - length + 1))
    out[start : start + length, :] = frames.mean()
    return out


def mixup_batch(batch: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Convex combinations with a shuffled partner, alpha from Beta(0.5, 0.5)
    folded to [0.5, 1]; targets are the caller's and stay untouched."""
    n = len(batch)
    if n < 2:
        return [np.asarray(x).copy() for x in batch]
    partner = rng.permutation(n)
    alphas = rng.beta(0.5, 0.5, size=n)
    alphas = np.maximum(alphas, 1.0 - alphas)
    return [
        alphas[i] * np.asarray(batch[i]) + (1.0 - alphas[i]) * np.asarray(batch[partner[i]])
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Pooling heads


def linear_softmax_pool(frame_probs: np.ndarray) -> np.ndarray:
    """Per class: sum(y^2) / sum(y), or 0 when the frame column is all zero."""
    y = np.asarray(frame_probs, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError("expected frames x classes probabilities")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ShapeError("frame probabilities must lie in [0, 1]")
    num = (y * y).sum(axis=0)
    den = y.sum(axis=0)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


class FramewiseHead(Module):
    """Frame-level linear + sigmoid, pooled to clip probabilities by
    confidence weighting (p = sum y^2 / sum y)."""

    kind = "linear-softmax-pool"

    def __init__(self, latent_dim, num_classes, rng, dtype=np.float32):
        self.proj = Linear(latent_dim, num_classes, rng, dtype)

    def __call__(self, context: Tensor) -> Tensor:
        y = T.sigmoid(self.proj(context))
        num = T.reduce_sum(T.mul(y, y), axis=0)
        den = T.reduce_sum(y, axis=0)
        # Sigmoid outputs are strictly positive; the epsilon only guards the
        # graph against pathological saturation.
        return T.div(num, T.add(den, 1e-12))


class MeanPoolHead(Module):
    """Frame-mean then linear; probabilities via sigmoid."""

    kind = "mean-pool"

    def __init__(self, latent_dim, num_classes, rng, dtype=np.float32):
        self.proj = Linear(latent_dim, num_classes, rng, dtype)

    def __call__(self, context: Tensor) -> Tensor:
        if context.shape[0] < 1:
            raise ShapeError("empty context sequence")
        pooled = T.reduce_mean(context, axis=0, keepdims=True)
        return T.sigmoid(self.proj(pooled))


def make_head(kind: str, latent_dim: int, num_classes: int, seed: int, dtype=np.float32):
    rng = np.random.default_rng([seed, 0xEAD])
    if kind == "linear-softmax-pool":
        return FramewiseHead(latent_dim, num_classes, rng, dtype)
    if kind == "mean-pool":
        return MeanPoolHead(latent_dim, num_classes, rng, dtype)
    raise ConfigError(f"unknown head kind '{kind}'")


# ---------------------------------------------------------------------------
# Losses and schedule


def _one_minus(p: Tensor) -> Tensor:
    return T.add(T.neg(p), 1.0)


def bce_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over classes (probs clamped to 1e-7)."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if probs.values.reshape(-1).shape != targets.shape:
        raise ShapeError(f"probs {probs.shape} vs targets {targets.shape}")
    p = T.clamp(probs, 1e-7, 1.0 - 1e-7)
    t = Tensor(targets.astype(p.values.dtype).reshape(p.shape))
    one_minus_t = Tensor((1.0 - targets).astype(p.values.dtype).reshape(p.shape))
    ll = T.add(T.mul(t, T.log(p)), T.mul(one_minus_t, T.log(_one_minus(p))))
    return T.neg(T.reduce_mean(ll))


def consistency_loss(probs_a: Tensor, probs_b: Tensor) -> Tensor:
    """Symmetric Bernoulli KL per class, averaged: (p-q)(logit p - logit q)."""
    if probs_a.shape != probs_b.shape:
        raise ShapeError(f"views disagree: {probs_a.shape} vs {probs_b.shape}")
    p = T.clamp(probs_a, 1e-7, 1.0 - 1e-7)
    q = T.clamp(probs_b, 1e-7, 1.0 - 1e-7)
    logit_p = T.sub(T.log(p), T.log(_one_minus(p)))
    logit_q = T.sub(T.log(q), T.log(_one_minus(q)))
    return T.reduce_mean(T.mul(T.sub(p, q), T.sub(logit_p, logit_q)))


def three_stage_lr(step: int, config: FinetuneConfig) -> float:
    """Linear warmup, hold at peak, exponential decay to peak*final_lr_factor."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    total = config.total_steps
    warm_end = config.stage_fractions[0] * total
    hold_end = (config.stage_fractions[0] + config.stage_fractions[1]) * total
    step = min(step, total)
    if step <= warm_end:
        return config.peak_lr * step / warm_end
    if step <= hold_end:
        return config.peak_lr
    progress = (step - hold_end) / (total - hold_end)
    return config.peak_lr * config.final_lr_factor**progress


def balance_weights(label_matrix: np.ndarray) -> np.ndarray:
    """Per-example sampling weight: max over its positive classes of 1/count."""
    labels = np.asarray(label_matrix)
    if labels.ndim != 2:
        raise ShapeError("expected examples x classes multi-hot matrix")
    if np.any(labels.sum(axis=1) < 1):
        bad = int(np.flatnonzero(labels.sum(axis=1) < 1)[0])
        raise DataError(f"example {bad} has no positive label")
    counts = labels.sum(axis=0)
    inverse = np.zeros_like(counts, dtype=np.float64)
    np.divide(1.0, counts, out=inverse, where=counts > 0)
    return (labels * inverse).max(axis=1)


# ---------------------------------------------------------------------------
# Training step and loop


def _clip_frames(example: LabeledExample, jitter: bool, rng, filterbank) -> np.ndarray:
    if jitter and example.waveform is None:
        raise ConfigError("temporal jitter needs raw waveforms in the dataset")
    if example.waveform is not None:
        samples = example.waveform
        if jitter:
            samples = temporal_jitter(samples, rng)
        return logmel(Waveform(samples), filterbank).frames
    return example.frames


def _augmented_views(batch, config, step, filterbank):
    """Two independently augmented logmel views of the batch."""
    views = []
    for purpose in (RNG_VIEW_A, RNG_VIEW_B):
        frames = []
        for i, ex in enumerate(batch):
            rng = step_rng(config.seed, purpose, step, i)
            f = _clip_frames(ex, config.jitter_enabled, rng, filterbank)
            if config.timemask_enabled:
                f = time_mask_augment(f, rng)
            frames.append(f)
        if config.mixup_enabled:
            min_t = min(f.shape[0] for f in frames)
            frames = [f[:min_t] for f in frames]
            frames = mixup_batch(frames, step_rng(config.seed, purpose, step, 7919))
        views.append(frames)
    return views


def _clip_probs(model, head, frames, config, dropout_rng) -> Tensor:
    context = model.contextualize(model.encode_features(frames), rng=dropout_rng)
    if config.output_dropout > 0.0:
        context = T.dropout(
            context, config.output_dropout, dropout_rng, training=model.training
        )
    probs = head(context)
    return probs


def finetune_step(
    batch: list[LabeledExample],
    model: ConformerModel,
    head,
    optimizer: Adam,
    config: FinetuneConfig,
    step: int,
    filterbank=None,
) -> dict:
    """Two augmented views -> BCE(view1) + consistency_weight * symKL."""
    if not batch:
        raise ConfigError("empty batch")
    if filterbank is None:
        filterbank = mel_filterbank()
    optimizer.zero_grad()
    view_a, view_b = _augmented_views(batch, config, step, filterbank)
    bce_terms, consistency_terms = [], []
    for i, ex in enumerate(batch):
        probs_a = _clip_probs(
            model, head, view_a[i], config, step_rng(config.seed, RNG_HEAD_DROPOUT_A, step, i)
        )
        bce_terms.append(bce_loss(probs_a, ex.targets))
        if config.consistency_weight > 0.0:
            probs_b = _clip_probs(
                model, head, view_b[i], config,
                step_rng(config.seed, RNG_HEAD_DROPOUT_B, step, i),
            )
            consistency_terms.append(consistency_loss(probs_a, probs_b))
    bce = _mean_terms(bce_terms)
    if consistency_terms:
        consistency = _mean_terms(consistency_terms)
        total = T.add(bce, T.mul(consistency, config.consistency_weight))
    else:
        consistency = Tensor(np.zeros(()))
        total = bce
    backward(total)
    grad_norm = global_grad_norm(optimizer.named_params)
    lr = three_stage_lr(step, config)
    optimizer.step(lr)
    return {
        "step": step,
        "loss": float(total.values),
        "bce": float(bce.values),
        "consistency": float(consistency.values),
        "lr": lr,
        "grad_norm": grad_norm,
    }


def _mean_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


def evaluate_model(model, head, examples, filterbank=None) -> EvalReport:
    """Score every example in eval mode and summarize."""
    if filterbank is None:
        filterbank = mel_filterbank()
    model.eval()
    scores, targets = [], []
    try:
        with T.no_grad():
            for ex in examples:
                frames = _clip_frames(ex, jitter=False, rng=None, filterbank=filterbank)
                probs = head(model.contextualize(model.encode_features(frames)))
                scores.append(probs.values.reshape(-1).astype(np.float64))
                targets.append(ex.targets)
    finally:
        model.train()
    return evaluate_scores(np.stack(scores), np.stack(targets))


def run_finetuning(
    model: ConformerModel,
    head,
    train_examples: list[LabeledExample],
    config: FinetuneConfig,
    out_dir: str | Path,
    eval_examples: list[LabeledExample] | None = None,
    max_steps: int | None = None,
    deterministic: bool = True,
    log=None,
) -> EvalReport | None:
    """Fine-tune with balanced sampling; evaluate at the end when data given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(
        list(model.named_parameters()) + [(f"head.{n}", p) for n, p in head.named_parameters()]
    )
    filterbank = mel_filterbank()
    if config.balance_enabled:
        weights = balance_weights(np.stack([ex.targets for ex in train_examples]))
        probabilities = weights / weights.sum()
    else:
        probabilities = None
    model.train()
    last_step = min(config.total_steps, max_steps) if max_steps else config.total_steps
    metrics_path = out_dir / "metrics.jsonl"
    with metrics_path.open("a") as handle:
        for step in range(1, last_step + 1):
            t0 = time.monotonic()
            rng = step_rng(config.seed, RNG_SAMPLING, step)
            picks = rng.choice(
                len(train_examples),
                size=min(config.batch_size, len(train_examples)),
                replace=len(train_examples) < config.batch_size,
                p=probabilities,
            )
            batch = [train_examples[i] for i in picks]
            record = finetune_step(batch, model, head, optimizer, config, step, filterbank)
            write_metrics_line(handle, record, deterministic, (time.monotonic() - t0) * 1e3)
            if log is not None:
                log(record)
    if eval_examples:
        report = evaluate_model(model, head, eval_examples, filterbank)
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        return report
    return None
