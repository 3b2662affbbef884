"""Mean-teacher training: loss, EMA, mixup, Adam, LR schedule, and the loop.

The student learns from clip-level BCE on weak clips and frame-level BCE on
strong clips; a consistency MSE against an EMA teacher covers the whole batch,
unlabeled clips included. Each loss term is averaged over its own elements.
Batches default to 12 weak + 12 strong + 24 unlabeled; pools are sampled
without replacement until exhausted, then reshuffled.

All randomness flows through named generator streams spawned from the config
seed (data order, mixup, student dropout, teacher dropout), which makes runs
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .events import AnnotationKind, EventRoster, rasterize_events
from .model import (
    ModelConfig,
    Parameters,
    backward_batch,
    clone_parameters,
    forward_batch,
    init_parameters,
    is_trainable,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batches_per_epoch: int = 250
    weak_per_batch: int = 12
    strong_per_batch: int = 12
    unlabeled_per_batch: int = 24
    ema_decay: float = 0.999
    consistency_weight: float = 2.0
    classification_weight: float = 1.0
    lr_peak: float = 0.001
    ramp_steps: int = 12500
    lr_decay: float = 0.99995
    mixup_prob: float = 0.5
    mixup_beta: float = 0.2
    seed: int = 0
    # Extras the defaults above do not cover: the teacher keeps dropout active
    # by default (flippable), and tests run the whole pipeline in float64.
    teacher_dropout: bool = True
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs and batches_per_epoch must be >= 1")
        counts = (self.weak_per_batch, self.strong_per_batch, self.unlabeled_per_batch)
        if any(c < 0 for c in counts) or sum(counts) < 1:
            raise ValueError(f"invalid batch composition {counts}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.consistency_weight < 0 or self.classification_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr_peak <= 0 or self.ramp_steps < 1 or not 0 < self.lr_decay <= 1:
            raise ValueError("invalid learning-rate schedule settings")
        if not 0.0 <= self.mixup_prob <= 1.0 or self.mixup_beta <= 0:
            raise ValueError("invalid mixup settings")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def batch_size(self) -> int:
        return self.weak_per_batch + self.strong_per_batch + self.unlabeled_per_batch

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)


@dataclass
class MeanTeacherState:
    """Student and teacher parameter sets plus Adam moments for the student.

    The teacher carries no optimizer state; moments exist only for trainable
    student tensors.
    """

    student: Parameters
    teacher: Parameters
    step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)


def create_state(params: Parameters) -> MeanTeacherState:
    trainable = [name for name in params if is_trainable(name)]
    return MeanTeacherState(
        student=params,
        teacher=clone_parameters(params),
        step=0,
        adam_m={name: np.zeros_like(params[name]) for name in trainable},
        adam_v={name: np.zeros_like(params[name]) for name in trainable},
    )


@dataclass
class TrainingBatch:
    """One batch in fixed row order: weak clips, then strong, then unlabeled.

    strong_targets are rasterized on the model's output grid, i.e. at
    frame_duration = clip_duration / T'.
    """

    features: np.ndarray  # (N, T, F)
    kinds: tuple[AnnotationKind, ...]
    weak_targets: np.ndarray  # (num_weak, C)
    strong_targets: np.ndarray  # (num_strong, T', C)

    @property
    def num_weak(self) -> int:
        return self.weak_targets.shape[0]

    @property
    def num_strong(self) -> int:
        return self.strong_targets.shape[0]


def lr_schedule(
    step: int,
    peak: float = 0.001,
    ramp_steps: int = 12500,
    decay: float = 0.99995,
) -> float:
    """Exponential ramp exp(-5 (1 - step/ramp)^2) * peak, then multiplicative
    decay per step. Continuous at the ramp end."""
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step <= ramp_steps:
        return peak * math.exp(-5.0 * (1.0 - step / ramp_steps) ** 2)
    return peak * decay ** (step - ramp_steps)


def ema_update(teacher: Parameters, student: Parameters, decay: float = 0.999) -> Parameters:
    """teacher <- decay * teacher + (1 - decay) * student, in place, over every
    array including batch-norm running statistics."""
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"{name}: shape mismatch {t.shape} vs {s.shape}")
        t *= decay
        t += (1.0 - decay) * s
    return teacher


def adam_update(
    params: Parameters,
    grads: dict[str, np.ndarray],
    m: dict[str, np.ndarray],
    v: dict[str, np.ndarray],
    step_t: int,
    lr: float,
) -> None:
    """One Adam step, in place. step_t is 1-based."""
    bc1 = 1.0 - ADAM_BETA1 ** step_t
    bc2 = 1.0 - ADAM_BETA2 ** step_t
    for name, g in grads.items():
        m[name] = ADAM_BETA1 * m[name] + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * v[name] + (1.0 - ADAM_BETA2) * (g * g)
        update = (m[name] / bc1) / (np.sqrt(v[name] / bc2) + ADAM_EPS)
        params[name] -= (lr * update).astype(params[name].dtype, copy=False)


def apply_mixup(
    batch: TrainingBatch,
    lam: float,
    perms: dict[AnnotationKind, np.ndarray],
) -> TrainingBatch:
    """Deterministic mixup core: convex-combine each annotation subset with a
    permuted copy of itself. Unlabeled clips mix features only."""
    features = batch.features.copy()
    nw, ns = batch.num_weak, batch.num_strong
    spans = {
        AnnotationKind.WEAK: slice(0, nw),
        AnnotationKind.STRONG: slice(nw, nw + ns),
        AnnotationKind.UNLABELED: slice(nw + ns, batch.features.shape[0]),
    }
    for kind, span in spans.items():
        perm = perms[kind]
        sub = batch.features[span]
        features[span] = lam * sub + (1.0 - lam) * sub[perm]
    weak = lam * batch.weak_targets + (1.0 - lam) * batch.weak_targets[perms[AnnotationKind.WEAK]]
    strong = (
        lam * batch.strong_targets
        + (1.0 - lam) * batch.strong_targets[perms[AnnotationKind.STRONG]]
    )
    return TrainingBatch(features, batch.kinds, weak, strong)


def mixup_batch(
    batch: TrainingBatch,
    rng: np.random.Generator,
    prob: float = 0.5,
    beta: float = 0.2,
) -> TrainingBatch:
    """With probability prob, mix the batch with lambda ~ Beta(beta, beta).

    Consumes the rng in a fixed order (gate, lambda, three permutations) so
    training runs replay exactly.
    """
    if rng.random() >= prob:
        return batch
    lam = rng.beta(beta, beta)
    nw, ns = batch.num_weak, batch.num_strong
    nu = batch.features.shape[0] - nw - ns
    perms = {
        AnnotationKind.WEAK: rng.permutation(nw),
        AnnotationKind.STRONG: rng.permutation(ns),
        AnnotationKind.UNLABELED: rng.permutation(nu),
    }
    return apply_mixup(batch, lam, perms)


@dataclass
class LossBreakdown:
    loss: float
    classification: float
    consistency: float
    grad_frame: np.ndarray  # d loss / d student frame_probs
    grad_clip: np.ndarray  # d loss / d student clip_probs


def _bce_terms(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    pc = np.clip(p, lo, hi)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    # The clamp makes the loss constant outside (lo, hi); the gradient gets the
    # matching indicator so finite differences agree.
    grad = np.where((p > lo) & (p < hi), (pc - y) / (pc * (1.0 - pc)), 0.0)
    return loss, grad


def compute_loss(
    student_frame: np.ndarray,
    student_clip: np.ndarray,
    teacher_frame: np.ndarray,
    teacher_clip: np.ndarray,
    batch: TrainingBatch,
    config: TrainConfig,
) -> LossBreakdown:
    """Classification BCE on the annotated subsets plus consistency MSE against
    the teacher over the full batch; every term averaged over its own elements.
    Teacher outputs are constants. Returns gradients w.r.t. student outputs."""
    nw, ns = batch.num_weak, batch.num_strong
    grad_frame = np.zeros_like(student_frame)
    grad_clip = np.zeros_like(student_clip)
    cw, sw = config.classification_weight, config.consistency_weight

    classification = 0.0
    if nw:
        loss_w, grad_w = _bce_terms(student_clip[:nw], batch.weak_targets)
        classification += float(loss_w.mean())
        grad_clip[:nw] += cw * grad_w / loss_w.size
    if ns:
        span = slice(nw, nw + ns)
        loss_s, grad_s = _bce_terms(student_frame[span], batch.strong_targets)
        classification += float(loss_s.mean())
        grad_frame[span] += cw * grad_s / loss_s.size

    diff_clip = student_clip - teacher_clip
    diff_frame = student_frame - teacher_frame
    consistency = float((diff_clip ** 2).mean() + (diff_frame ** 2).mean())
    grad_clip += sw * 2.0 * diff_clip / diff_clip.size
    grad_frame += sw * 2.0 * diff_frame / diff_frame.size

    loss = cw * classification + sw * consistency
    return LossBreakdown(loss, classification, consistency, grad_frame, grad_clip)


@dataclass
class StepStats:
    loss: float
    classification: float
    consistency: float
    lr: float


def train_step(
    state: MeanTeacherState,
    batch: TrainingBatch,
    model_config: ModelConfig,
    train_config: TrainConfig,
    student_rng: np.random.Generator | None = None,
    teacher_rng: np.random.Generator | None = None,
) -> tuple[MeanTeacherState, StepStats]:
    """One optimization step: teacher forward, student forward, loss, backward,
    Adam with the scheduled lr, batch-norm running-stat commit, EMA, step + 1.

    Mutates state in place (single-writer). Aborts on a non-finite loss.
    """
    teacher_mode = "teacher" if train_config.teacher_dropout else "eval"
    t_frame, t_clip, _ = forward_batch(
        batch.features, state.teacher, model_config, mode=teacher_mode, rng=teacher_rng
    )
    s_frame, s_clip, cache = forward_batch(
        batch.features, state.student, model_config, mode="train",
        rng=student_rng, want_cache=True,
    )
    breakdown = compute_loss(s_frame, s_clip, t_frame, t_clip, batch, train_config)
    if not math.isfinite(breakdown.loss):
        raise RuntimeError(
            f"non-finite loss at step {state.step}: "
            f"classification={breakdown.classification}, "
            f"consistency={breakdown.consistency}"
        )
    grads = backward_batch(
        cache, breakdown.grad_frame, breakdown.grad_clip, state.student, model_config
    )
    lr = lr_schedule(
        state.step, train_config.lr_peak, train_config.ramp_steps, train_config.lr_decay
    )
    adam_update(state.student, grads, state.adam_m, state.adam_v, state.step + 1, lr)
    for name, value in cache["bn_updates"].items():
        state.student[name] = value.astype(state.student[name].dtype, copy=False)
    ema_update(state.teacher, state.student, train_config.ema_decay)
    state.step += 1
    return state, StepStats(breakdown.loss, breakdown.classification, breakdown.consistency, lr)


@dataclass(frozen=True)
class TrainingData:
    """The three training pools with a shared frame grid.

    Features are standardized spectral maps as plain arrays; every clip has
    the same frame count and duration (10 s clips at one hop).
    """

    classes: tuple[str, ...]
    weak_features: np.ndarray  # (Nw, T, F)
    weak_targets: np.ndarray  # (Nw, C) binary tag vectors
    strong_features: np.ndarray  # (Ns, T, F)
    strong_rosters: tuple[EventRoster, ...]
    unlabeled_features: np.ndarray  # (Nu, T, F)
    clip_duration: float

    def __post_init__(self) -> None:
        t = self.weak_features.shape[1]
        for arr in (self.strong_features, self.unlabeled_features):
            if arr.shape[1] != t:
                raise ValueError("all pools must share the frame count")
        if len(self.strong_rosters) != self.strong_features.shape[0]:
            raise ValueError("strong pool features and rosters unaligned")
        if self.weak_targets.shape != (
            self.weak_features.shape[0],
            len(self.classes),
        ):
            raise ValueError("weak target shape mismatch")

    @property
    def num_frames(self) -> int:
        return self.weak_features.shape[1]


class _PoolSampler:
    """Without-replacement cycling: shuffle, deal, reshuffle when exhausted."""

    def __init__(self, count: int, rng: np.random.Generator):
        if count < 1:
            raise ValueError("cannot sample from an empty pool")
        self.count = count
        self.rng = rng
        self.order = rng.permutation(count)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            if self.pos == self.count:
                self.order = self.rng.permutation(self.count)
                self.pos = 0
            out[i] = self.order[self.pos]
            self.pos += 1
        return out


def rasterize_strong_targets(
    rosters: Sequence[EventRoster],
    classes: Sequence[str],
    num_output_frames: int,
    clip_duration: float,
) -> np.ndarray:
    """Frame targets on the model's output grid: fd = clip_duration / T'."""
    fd = clip_duration / num_output_frames
    return np.stack(
        [rasterize_events(r, fd, num_output_frames, classes) for r in rosters]
    )


def train_loop(
    data: TrainingData,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[MeanTeacherState, list[dict]]:
    """Full training run, deterministic given train_config.seed.

    Returns the final state (the student is what evaluation uses) and one
    history row per epoch.
    """
    if len(data.classes) != model_config.num_classes:
        raise ValueError(
            f"data has {len(data.classes)} classes, model expects {model_config.num_classes}"
        )
    dtype = np.dtype(train_config.dtype)
    t_out = model_config.output_frames(data.num_frames)
    strong_targets = rasterize_strong_targets(
        data.strong_rosters, data.classes, t_out, data.clip_duration
    ).astype(dtype)
    weak_targets = data.weak_targets.astype(dtype)
    pools = {
        AnnotationKind.WEAK: data.weak_features,
        AnnotationKind.STRONG: data.strong_features,
        AnnotationKind.UNLABELED: data.unlabeled_features,
    }

    root = np.random.SeedSequence(train_config.seed)
    ss_data, ss_mixup, ss_student, ss_teacher = root.spawn(4)
    rng_data = np.random.default_rng(ss_data)
    rng_mixup = np.random.default_rng(ss_mixup)
    rng_student = np.random.default_rng(ss_student)
    rng_teacher = np.random.default_rng(ss_teacher)

    samplers = {}
    counts = {
        AnnotationKind.WEAK: train_config.weak_per_batch,
        AnnotationKind.STRONG: train_config.strong_per_batch,
        AnnotationKind.UNLABELED: train_config.unlabeled_per_batch,
    }
    for kind in (AnnotationKind.WEAK, AnnotationKind.STRONG, AnnotationKind.UNLABELED):
        if counts[kind] > 0:
            samplers[kind] = _PoolSampler(pools[kind].shape[0], rng_data)

    kinds = (
        (AnnotationKind.WEAK,) * train_config.weak_per_batch
        + (AnnotationKind.STRONG,) * train_config.strong_per_batch
        + (AnnotationKind.UNLABELED,) * train_config.unlabeled_per_batch
    )

    state = create_state(init_parameters(model_config, train_config.seed, dtype=dtype))
    history: list[dict] = []
    for epoch in range(train_config.epochs):
        sums = np.zeros(3)
        last_lr = 0.0
        for _ in range(train_config.batches_per_epoch):
            parts = []
            weak_t = np.zeros((0, len(data.classes)), dtype=dtype)
            strong_t = np.zeros((0, t_out, len(data.classes)), dtype=dtype)
            for kind in (AnnotationKind.WEAK, AnnotationKind.STRONG, AnnotationKind.UNLABELED):
                if counts[kind] == 0:
                    continue
                idx = samplers[kind].take(counts[kind])
                parts.append(pools[kind][idx])
                if kind is AnnotationKind.WEAK:
                    weak_t = weak_targets[idx]
                elif kind is AnnotationKind.STRONG:
                    strong_t = strong_targets[idx]
            batch = TrainingBatch(
                np.concatenate(parts).astype(dtype, copy=False), kinds, weak_t, strong_t
            )
            batch = mixup_batch(batch, rng_mixup, train_config.mixup_prob, train_config.mixup_beta)
            state, stats = train_step(
                state, batch, model_config, train_config, rng_student, rng_teacher
            )
            sums += (stats.loss, stats.classification, stats.consistency)
            last_lr = stats.lr
        row = {
            "epoch": epoch,
            "classification_loss": float(sums[1]) / train_config.batches_per_epoch,
            "consistency_loss": float(sums[2]) / train_config.batches_per_epoch,
            "lr": last_lr,
        }
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch}: classification {row['classification_loss']:.4f} "
                f"consistency {row['consistency_loss']:.4f} lr {row['lr']:.2e}"
            )
    return state, history


def serialize_history(history: Sequence[dict]) -> str:
    lines = ["epoch,classification_loss,consistency_loss,lr"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['classification_loss']:.12g},"
            f"{row['consistency_loss']:.12g},{row['lr']:.12g}"
        )
    return "\n".join(lines) + "\n"
