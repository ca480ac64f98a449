"""Temperature softmax, per-task heads, feature KL transfer loss and the total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ValueError(f"temperature must be positive, got {alpha}")


def temp_softmax(logits: Tensor, alpha: float) -> Tensor:
    """``exp(g_j / alpha) / sum_j exp(g_j / alpha)`` along the last axis."""
    _check_alpha(alpha)
    return tn.softmax(logits * (1.0 / alpha), axis=-1)


def transfer_kl(f_teacher: Tensor, f_student: Tensor, alpha: float) -> Tensor:
    """KL(softmax(f_teacher/alpha) || softmax(f_student/alpha)).

    1-D inputs give a scalar; 2-D inputs (N, d) give one value per row.
    """
    _check_alpha(alpha)
    if f_teacher.shape != f_student.shape:
        raise tn.ShapeError(f"transfer_kl: teacher {f_teacher.shape} vs student {f_student.shape}")
    inv = 1.0 / alpha
    t, s = f_teacher.data * inv, f_student.data * inv
    log_p = t - t.max(axis=-1, keepdims=True)
    log_p -= np.log(np.exp(log_p).sum(axis=-1, keepdims=True))
    log_q = s - s.max(axis=-1, keepdims=True)
    log_q -= np.log(np.exp(log_q).sum(axis=-1, keepdims=True))
    p, q = np.exp(log_p), np.exp(log_q)
    # KL = sum p*d - log(sum q*e^d) with d = t - s; the log1p/expm1 form keeps
    # full relative precision when the two distributions are close
    d = t - s
    with np.errstate(over="ignore"):
        kl = (p * d).sum(axis=-1) - np.log1p((q * np.expm1(d)).sum(axis=-1))
    kl = np.maximum(kl, 0.0)

    def backward(g):
        g = np.asarray(g)[..., None]
        return (g * inv * p * (log_p - log_q - kl[..., None]) if f_teacher.requires_grad else None,
                g * inv * (q - p) if f_student.requires_grad else None)

    return tn._make(kl, (f_teacher, f_student), backward, "transfer_kl")


@dataclass
class TaskHead:
    weight: Tensor  # (Y_t, d)
    bias: Tensor  # (Y_t,)
    task: int

    @classmethod
    def init(cls, task: int, n_classes: int, dim: int, rng: np.random.Generator) -> TaskHead:
        bound = 1.0 / math.sqrt(dim)
        w = rng.uniform(-bound, bound, size=(n_classes, dim))
        return cls(Tensor(w, requires_grad=True), tn.zeros(n_classes, requires_grad=True), task)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def __call__(self, f: Tensor) -> Tensor:
        return tn.linear(f, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    kl: float
    alpha: float
    beta: float


def head_logits(features: Tensor, tasks: np.ndarray, heads: list[TaskHead]) -> dict[int, tuple[np.ndarray, Tensor]]:
    """Route each sample to its own task head: ``{t: (batch rows, logits)}``."""
    out = {}
    for t, head in enumerate(heads):
        rows = np.flatnonzero(tasks == t)
        if rows.size:
            out[t] = (rows, head(tn.take_rows(features, rows)))
    return out


def total_loss(
    features: Tensor,
    tasks,
    labels,
    heads: list[TaskHead],
    teacher_features: Tensor,
    alpha: float = 10.0,
    beta: float = 1.0,
    projection: Tensor | None = None,
) -> LossTerms:
    """Mean over the batch of ``CE_i + beta * alpha^2 * KL_i``.

    CE uses the sample's own task head with temperature-``alpha`` softmax and
    the within-task label. The KL compares temperature-softmaxed teacher
    features against (optionally projected) student features.
    """
    _check_alpha(alpha)
    tasks = np.asarray(tasks, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if tasks.shape != (n,) or labels.shape != (n,):
        raise tn.ShapeError(f"need one task and one label per sample ({n})")
    for t, head in enumerate(heads):
        sel = labels[tasks == t]
        if sel.size and (sel.min() < 0 or sel.max() >= head.n_classes):
            raise ValueError(f"label out of range for task {t} head with {head.n_classes} classes")
    if tasks.size and (tasks.min() < 0 or tasks.max() >= len(heads)):
        raise ValueError(f"task index out of range for {len(heads)} heads")

    ce_sum = None
    for t, (rows, logits) in head_logits(features, tasks, heads).items():
        logp = tn.log_softmax(logits * (1.0 / alpha), axis=-1)
        term = -tn.pick(logp, labels[rows]).sum()
        ce_sum = term if ce_sum is None else ce_sum + term

    student = features if projection is None else tn.linear(features, projection)
    kl_rows = transfer_kl(teacher_features, student, alpha)
    kl_sum = kl_rows.sum()
    total = (ce_sum + kl_sum * (beta * alpha * alpha)) * (1.0 / n)
    return LossTerms(total, ce_sum.item() / n, kl_sum.item() / n, alpha, beta)


def cross_entropy(logits: Tensor, labels, alpha: float = 1.0) -> Tensor:
    """Mean CE of a single head (used for the teacher's global head)."""
    _check_alpha(alpha)
    logp = tn.log_softmax(logits * (1.0 / alpha), axis=-1)
    return -tn.pick(logp, labels).mean()
