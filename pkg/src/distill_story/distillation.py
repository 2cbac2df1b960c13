"""Losses and training loops for multi-task knowledge distillation.

The student copies three teachers one task at a time: within each phase the
other two heads are frozen (the shared encoder always trains), every batch
minimizes (1 - alpha) * task_loss + alpha * T^2 * KL(teacher || student) on
temperature-softened distributions, and parameters move by plain SGD.

Dense heads distill per-position binary distributions derived from sigmoid
logits; the report head distills full vocabulary distributions at non-PAD
positions under teacher forcing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    ConfigurationError,
    DomainError,
    QualityFloorError,
    ShapeError,
    TrainingDivergence,
)
from . import metrics
from .models import (
    TASKS,
    MultiTaskStudent,
    images_to_tensor,
    pad_reports,
    parameter_checksum,
)
from .synthetic import PAD_ID, Sample, Vocabulary

HEAD_ATTR = {"abnormality": "classifier_head", "segmentation": "segmentation_head", "report": "report_head"}


# ---------------------------------------------------------------------------
# softened distributions


def _check_temperature(temperature: float) -> float:
    t = float(temperature)
    if not np.isfinite(t) or t <= 0:
        raise DomainError(f"temperature must be finite and > 0, got {temperature}")
    return t


def temperature_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """exp(z_i / T) / sum_j exp(z_j / T) along the last axis, in float64.

    Computed with the max subtracted for overflow safety; at T=1 this is the
    ordinary softmax, and as T grows the output flattens toward uniform.
    """
    t = _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 1 or z.shape[-1] < 1:
        raise ShapeError(f"temperature_softmax needs at least one logit, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("temperature_softmax: logits must be finite")
    scaled = z / t
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def _as_f64_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def distillation_loss(teacher_logits, student_logits, temperature: float = 1.0) -> torch.Tensor:
    """T^2 * KL(softened teacher || softened student), meaned over leading dims.

    The last axis indexes classes. The T^2 factor keeps gradient magnitudes
    comparable across temperatures.
    """
    t = _check_temperature(temperature)
    tl = _as_f64_tensor(teacher_logits)
    sl = _as_f64_tensor(student_logits)
    if tl.shape != sl.shape:
        raise ShapeError(f"teacher logits {tuple(tl.shape)} != student logits {tuple(sl.shape)}")
    if tl.ndim < 1 or tl.shape[-1] < 1:
        raise ShapeError("distillation_loss needs at least one class on the last axis")
    log_p = F.log_softmax(tl / t, dim=-1)
    log_q = F.log_softmax(sl / t, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return (t * t) * kl.mean()


def binary_distillation_loss(teacher_logits, student_logits, temperature: float = 1.0) -> torch.Tensor:
    """Distillation over per-position two-way (present/absent) distributions.

    Each logit z defines the pair (z, 0); softening and KL act on that pair,
    so this equals distillation_loss on logits stacked with zeros but without
    materializing the extra axis.
    """
    t = _check_temperature(temperature)
    tl = _as_f64_tensor(teacher_logits)
    sl = _as_f64_tensor(student_logits)
    if tl.shape != sl.shape:
        raise ShapeError(f"teacher logits {tuple(tl.shape)} != student logits {tuple(sl.shape)}")
    log_p1 = F.logsigmoid(tl / t)
    log_p0 = F.logsigmoid(-tl / t)
    log_q1 = F.logsigmoid(sl / t)
    log_q0 = F.logsigmoid(-sl / t)
    kl = log_p1.exp() * (log_p1 - log_q1) + log_p0.exp() * (log_p0 - log_q0)
    return (t * t) * kl.mean()


def caption_distillation_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    target_tokens: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Vocabulary-distribution distillation at non-PAD target positions."""
    t = _check_temperature(temperature)
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"teacher logits {tuple(teacher_logits.shape)} != student logits "
            f"{tuple(student_logits.shape)}"
        )
    keep = target_tokens != PAD_ID
    if not bool(keep.any()):
        warnings.warn("caption distillation saw only padding positions; loss is 0")
        return student_logits.sum() * 0.0
    log_p = F.log_softmax(teacher_logits[keep] / t, dim=-1)
    log_q = F.log_softmax(student_logits[keep] / t, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return (t * t) * kl.mean()


# ---------------------------------------------------------------------------
# task losses


def classification_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with logits over every (sample, class) cell."""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} != targets {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def dice_loss(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - (2 |P.G| + eps) / (|P| + |G| + eps) on sigmoid probabilities,
    averaged over the batch. eps keeps the empty-empty case at loss 0."""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} != targets {tuple(targets.shape)}")
    probs = torch.sigmoid(logits)
    g = targets.to(logits.dtype)
    dims = tuple(range(1, logits.ndim))
    inter = (probs * g).sum(dim=dims)
    total = probs.sum(dim=dims) + g.sum(dim=dims)
    return (1.0 - (2.0 * inter + eps) / (total + eps)).mean()


def caption_loss(logits: torch.Tensor, target_tokens: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over non-PAD target positions (teacher forcing)."""
    if logits.shape[:-1] != target_tokens.shape:
        raise ShapeError(
            f"caption logits {tuple(logits.shape)} do not cover targets {tuple(target_tokens.shape)}"
        )
    keep = target_tokens != PAD_ID
    if not bool(keep.any()):
        warnings.warn("caption targets are all padding; caption loss is 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], target_tokens[keep])


def combined_loss(task_loss: torch.Tensor, distill_loss: torch.Tensor, alpha: float) -> torch.Tensor:
    """(1 - alpha) * task + alpha * distill; alpha outside [0, 1] is rejected."""
    a = float(alpha)
    if not np.isfinite(a) or not 0.0 <= a <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - a) * task_loss + a * distill_loss


# ---------------------------------------------------------------------------
# optimization primitives


def zero_grads(model: nn.Module) -> None:
    for p in model.parameters():
        p.grad = None


def sgd_step(model: nn.Module, lr: float) -> None:
    """theta <- theta - lr * grad, applied to trainable parameters only."""
    if lr <= 0:
        raise DomainError(f"learning rate must be > 0, got {lr}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not p.requires_grad or p.grad is None:
                continue
            if not bool(torch.isfinite(p.grad).all()):
                raise TrainingDivergence(f"non-finite gradient in {name}")
            p -= lr * p.grad


def set_trainable_heads(student: MultiTaskStudent, active_task: str) -> list[str]:
    """Freeze the two inactive heads; encoder and active head stay trainable.

    Returns the frozen tasks.
    """
    if active_task not in TASKS:
        raise DomainError(f"unknown task {active_task!r}; expected one of {TASKS}")
    frozen = []
    for task in TASKS:
        head = student.head_for(task)
        trainable = task == active_task
        for p in head.parameters():
            p.requires_grad = trainable
        if not trainable:
            frozen.append(task)
    for p in student.encoder.parameters():
        p.requires_grad = True
    return frozen


def head_checksum(student: MultiTaskStudent, task: str) -> str:
    prefix = HEAD_ATTR[task] + "."
    names = [n for n in student.state_dict() if n.startswith(prefix)]
    return parameter_checksum(student, only=names)


# ---------------------------------------------------------------------------
# batching


@dataclass
class TensorSplit:
    images: torch.Tensor  # (N, 1, H, W) float32
    labels: torch.Tensor  # (N, C) float32
    masks: torch.Tensor  # (N, H, W) float32
    reports: torch.Tensor  # (N, L) long, PAD after EOS
    indices: list[int]


def prepare_tensors(samples: list[Sample], max_report_len: int) -> TensorSplit:
    if not samples:
        raise ConfigurationError("cannot build tensors from an empty split")
    return TensorSplit(
        images=images_to_tensor([s.image for s in samples]),
        labels=torch.from_numpy(np.stack([s.labels for s in samples])).float(),
        masks=torch.from_numpy(np.stack([s.mask for s in samples])).float(),
        reports=pad_reports([s.report for s in samples], max_report_len),
        indices=[s.index for s in samples],
    )


def batch_order(n: int, batch_size: int, seed: int, epoch: int, phase: int = 0) -> list[np.ndarray]:
    """Seeded shuffled batch index lists for one epoch."""
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, phase, epoch)))
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# teacher training


TEACHER_FLOORS = {"abnormality": 0.90, "segmentation": 0.80, "report": 0.85}


@dataclass(frozen=True)
class TeacherTrainConfig:
    task: str
    epochs: int = 40
    lr: float = 0.5
    batch_size: int = 32
    seed: int = 0
    quality_floor: float | None = None  # None: use the task default

    def floor(self) -> float:
        return TEACHER_FLOORS[self.task] if self.quality_floor is None else self.quality_floor

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"task: unknown task {self.task!r}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs: must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr: must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size: must be >= 1, got {self.batch_size}")


def default_teacher_config(task: str, seed: int = 0) -> TeacherTrainConfig:
    # rates tuned on the default dataset; each clears its floor with margin
    presets = {
        "abnormality": dict(epochs=60, lr=0.2),
        "segmentation": dict(epochs=20, lr=0.2),
        "report": dict(epochs=60, lr=0.5),
    }
    if task not in presets:
        raise ConfigurationError(f"task: unknown task {task!r}")
    return TeacherTrainConfig(task=task, seed=seed, **presets[task])


def _teacher_batch_loss(teacher: nn.Module, data: TensorSplit, idx: np.ndarray) -> torch.Tensor:
    ix = torch.as_tensor(idx, dtype=torch.long)
    x = data.images[ix]
    if teacher.task == "abnormality":
        return classification_loss(teacher(x), data.labels[ix])
    if teacher.task == "segmentation":
        return dice_loss(teacher(x), data.masks[ix])
    logits, _ = teacher(x, data.reports[ix])
    return caption_loss(logits, data.reports[ix][:, 1:])


@torch.no_grad()
def teacher_metric(teacher: nn.Module, data: TensorSplit, batch_size: int = 64) -> float:
    """Task quality vs ground truth: macro F1, DICE, or token accuracy."""
    teacher.eval()
    preds, targets = [], []
    for start in range(0, data.images.shape[0], batch_size):
        x = data.images[start : start + batch_size]
        if teacher.task == "abnormality":
            preds.append((torch.sigmoid(teacher(x)) >= 0.5).numpy())
            targets.append(data.labels[start : start + batch_size].numpy() >= 0.5)
        elif teacher.task == "segmentation":
            preds.append((torch.sigmoid(teacher(x)) >= 0.5).numpy())
            targets.append(data.masks[start : start + batch_size].numpy() >= 0.5)
        else:
            toks = data.reports[start : start + batch_size]
            logits, _ = teacher(x, toks)
            preds.append(logits.argmax(dim=-1).numpy())
            targets.append(toks[:, 1:].numpy())
    teacher.train()
    pred = np.concatenate(preds)
    target = np.concatenate(targets)
    if teacher.task == "abnormality":
        return metrics.macro_f1(pred, target)
    if teacher.task == "segmentation":
        return metrics.dice_score(pred, target)
    return metrics.token_accuracy(pred, target)


def train_teacher(
    teacher: nn.Module,
    train_data: TensorSplit,
    val_data: TensorSplit,
    config: TeacherTrainConfig,
) -> list[dict]:
    """Plain-SGD training with best-epoch selection on the validation metric.

    Raises QualityFloorError when the best validation metric stays under the
    task's floor. The teacher is left loaded with its best weights.
    """
    config.validate()
    n = train_data.images.shape[0]
    records = []
    best_metric, best_state = -1.0, None
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        batches = batch_order(n, config.batch_size, config.seed, epoch)
        for idx in batches:
            zero_grads(teacher)
            loss = _teacher_batch_loss(teacher, train_data, idx)
            loss.backward()
            sgd_step(teacher, config.lr)
            epoch_loss += float(loss.detach()) * len(idx)
        metric = teacher_metric(teacher, val_data)
        records.append({"epoch": epoch, "loss": epoch_loss / n, "metric": metric})
        if metric > best_metric:
            best_metric = metric
            best_state = {k: v.detach().clone() for k, v in teacher.state_dict().items()}
    teacher.load_state_dict(best_state)
    if best_metric < config.floor():
        raise QualityFloorError(
            f"{config.task} teacher reached {best_metric:.4f} < floor {config.floor():.2f}"
        )
    return records


# ---------------------------------------------------------------------------
# student distillation


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    alpha: float = 0.7
    lr: float = 0.02
    epochs_per_phase: int = 60
    batch_size: int = 32
    phase_order: tuple[str, ...] = ("segmentation", "abnormality", "report")
    labels_from_teacher: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ConfigurationError(f"temperature: must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha: must be in [0, 1], got {self.alpha}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr: must be > 0, got {self.lr}")
        if self.epochs_per_phase < 1:
            raise ConfigurationError(f"epochs_per_phase: must be >= 1, got {self.epochs_per_phase}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size: must be >= 1, got {self.batch_size}")
        if sorted(self.phase_order) != sorted(TASKS):
            raise ConfigurationError(
                f"phase_order: must be a permutation of {TASKS}, got {self.phase_order}"
            )


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    frozen_checksums: list[dict] = field(default_factory=list)
    phase_end_metrics: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["phase,epoch,task_loss,distill_loss,combined,metric"]
        for r in self.records:
            lines.append(
                f"{r['phase']},{r['epoch']},{r['task_loss']:.6f},"
                f"{r['distill_loss']:.6f},{r['combined']:.6f},{r['metric']:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "train_log.csv").write_text(self.to_csv())
        (outdir / "frozen_checksums.json").write_text(
            json.dumps(self.frozen_checksums, indent=2, sort_keys=True) + "\n"
        )
        (outdir / "phase_metrics.json").write_text(
            json.dumps(self.phase_end_metrics, indent=2, sort_keys=True) + "\n"
        )


def _teacher_targets(task: str, t_out, reports: torch.Tensor) -> torch.Tensor:
    """Literal-transfer targets: the teacher's own predictions."""
    if task == "abnormality" or task == "segmentation":
        return torch.sigmoid(t_out)
    return reports  # report distillation keeps teacher forcing on the given tokens


def _phase_batch(
    student: MultiTaskStudent,
    teacher: nn.Module,
    task: str,
    data: TensorSplit,
    idx: np.ndarray,
    config: DistillConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    ix = torch.as_tensor(idx, dtype=torch.long)
    x = data.images[ix]
    reports = data.reports[ix]
    with torch.no_grad():
        if task == "report":
            t_logits, _ = teacher(x, reports)
        else:
            t_logits = teacher(x)
    if task == "report":
        out = student(x, tokens=reports)
        s_logits = out.caption_logits
        targets = reports[:, 1:]
        if config.labels_from_teacher:
            targets = t_logits.argmax(dim=-1)
        t_l = caption_loss(s_logits, targets)
        d_l = caption_distillation_loss(t_logits, s_logits, reports[:, 1:], config.temperature)
    elif task == "abnormality":
        out = student(x)
        s_logits = out.class_logits
        targets = data.labels[ix]
        if config.labels_from_teacher:
            targets = _teacher_targets(task, t_logits, reports)
        t_l = classification_loss(s_logits, targets)
        d_l = binary_distillation_loss(t_logits, s_logits, config.temperature)
    else:
        out = student(x)
        s_logits = out.mask_logits
        targets = data.masks[ix]
        if config.labels_from_teacher:
            targets = _teacher_targets(task, t_logits, reports)
        t_l = dice_loss(s_logits, targets)
        d_l = binary_distillation_loss(t_logits, s_logits, config.temperature)
    return t_l, d_l, combined_loss(t_l, d_l, config.alpha)


@torch.no_grad()
def agreement_metrics(
    student: MultiTaskStudent,
    teachers: dict[str, nn.Module],
    data: TensorSplit,
    batch_size: int = 64,
) -> dict[str, float]:
    """Student-teacher agreement per task on one split.

    Classification and segmentation compare thresholded sigmoid outputs per
    position; reports compare argmax tokens under teacher forcing at non-PAD
    positions.
    """
    student.eval()
    cls_s, cls_t, seg_s, seg_t, cap_s, cap_t, cap_ref = [], [], [], [], [], [], []
    for start in range(0, data.images.shape[0], batch_size):
        x = data.images[start : start + batch_size]
        reports = data.reports[start : start + batch_size]
        out = student(x, tokens=reports)
        cls_s.append(torch.sigmoid(out.class_logits).numpy())
        cls_t.append(torch.sigmoid(teachers["abnormality"](x)).numpy())
        seg_s.append(torch.sigmoid(out.mask_logits).numpy())
        seg_t.append(torch.sigmoid(teachers["segmentation"](x)).numpy())
        t_logits, _ = teachers["report"](x, reports)
        cap_s.append(out.caption_logits.argmax(dim=-1).numpy())
        cap_t.append(t_logits.argmax(dim=-1).numpy())
        cap_ref.append(reports[:, 1:].numpy())
    student.train()
    return {
        "abnormality": metrics.binary_agreement(np.concatenate(cls_s), np.concatenate(cls_t)),
        "segmentation": metrics.binary_agreement(np.concatenate(seg_s), np.concatenate(seg_t)),
        "report": metrics.token_agreement(
            np.concatenate(cap_s), np.concatenate(cap_t), np.concatenate(cap_ref)
        ),
    }


def distill_student(
    student: MultiTaskStudent,
    teachers: dict[str, nn.Module],
    train_data: TensorSplit,
    val_data: TensorSplit,
    config: DistillConfig,
) -> TrainLog:
    """Sequential three-phase distillation; see the module docstring.

    Teachers are evaluated under no_grad and never updated. The returned log
    carries per-epoch losses, per-epoch checksums of the frozen heads, and
    all three validation agreements at the end of every phase.
    """
    config.validate()
    missing = sorted(set(TASKS) - set(teachers))
    if missing:
        raise ConfigurationError(f"teachers: missing {missing}")
    for t in teachers.values():
        t.eval()
    n = train_data.images.shape[0]
    log = TrainLog()
    for phase_idx, task in enumerate(config.phase_order, start=1):
        frozen = set_trainable_heads(student, task)
        start_sums = {ft: head_checksum(student, ft) for ft in frozen}
        epoch_sums = []
        for epoch in range(config.epochs_per_phase):
            task_sum = distill_sum = combined_sum = 0.0
            for idx in batch_order(n, config.batch_size, config.seed, epoch, phase=phase_idx):
                zero_grads(student)
                t_l, d_l, c_l = _phase_batch(student, teachers[task], task, train_data, idx, config)
                c_l.backward()
                sgd_step(student, config.lr)
                task_sum += float(t_l.detach()) * len(idx)
                distill_sum += float(d_l.detach()) * len(idx)
                combined_sum += float(c_l.detach()) * len(idx)
            val = agreement_metrics(student, teachers, val_data)
            log.records.append(
                {
                    "phase": phase_idx,
                    "epoch": epoch,
                    "task_loss": task_sum / n,
                    "distill_loss": distill_sum / n,
                    "combined": combined_sum / n,
                    "metric": val[task],
                }
            )
            epoch_sums.append({ft: head_checksum(student, ft) for ft in frozen})
        log.frozen_checksums.append(
            {
                "phase": phase_idx,
                "task": task,
                "frozen": sorted(frozen),
                "start": start_sums,
                "per_epoch": epoch_sums,
            }
        )
        log.phase_end_metrics.append(
            {"phase": phase_idx, "task": task, **agreement_metrics(student, teachers, val_data)}
        )
    for p in student.parameters():
        p.requires_grad = True
    return log
