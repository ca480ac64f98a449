"""SGD with cosine annealing, teacher training, decomposition training and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .data import TRAIN, VAL, Dataset
from .eks import TaskMask
from .losses import cross_entropy, total_loss
from .metrics import mig_score, task_accuracies, task_average
from .model import (DecompModel, TeacherModel, count_params, export_expert, expert_flops, plain_baseline,
                    student_train_cost)
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    alpha: float = 10.0
    beta: float = 1.0
    rank: int = 8
    seed: int = 0
    momentum: float = 0.0
    per_task_batches: bool = False
    train_experts: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.rank < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and rank >= 1 are required")


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * step / total)) / 2``, annealing to 0 at ``step == total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


def sgd_step(params: list[Tensor], lr: float, momentum: float = 0.0, buffers: dict | None = None) -> None:
    """``p <- p - lr * g`` (heavy-ball momentum when ``momentum > 0``)."""
    if momentum and buffers is None:
        raise ValueError("momentum needs a buffers dict that persists across steps")
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise tn.ShapeError(f"grad shape {p.grad.shape} does not match parameter {p.shape}")
        g = p.grad
        if momentum:
            buf = buffers.get(id(p))
            buf = g.copy() if buf is None else momentum * buf + g
            buffers[id(p)] = buf
            g = buf
        p.data = p.data - lr * g


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


def _batches(idx: np.ndarray, tasks: np.ndarray, size: int, rng: np.random.Generator, per_task: bool):
    perm = idx[rng.permutation(len(idx))]
    if not per_task:
        return [perm[i:i + size] for i in range(0, len(perm), size)]
    out = []
    for t in np.unique(tasks[perm]):
        sub = perm[tasks[perm] == t]
        out += [sub[i:i + size] for i in range(0, len(sub), size)]
    return [out[i] for i in rng.permutation(len(out))]


def checksum(params: list[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("EKS_THREADS", "1")))
    except ValueError:
        return 1


def _chunked_map(fn, idx: np.ndarray, chunk: int, threads: int):
    parts = [idx[i:i + chunk] for i in range(0, len(idx), chunk)]
    with tn.no_grad():
        if threads <= 1 or len(parts) <= 1:
            return [fn(p) for p in parts]
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, parts))


# -- teacher ---------------------------------------------------------------------------

def train_teacher(teacher: TeacherModel, ds: Dataset, cfg: TrainConfig, log_fn=None) -> list[dict]:
    """Plain CE on the global label space with one unified head."""
    rng = np.random.default_rng([cfg.seed, 11])
    params = teacher.parameters()
    train_idx = ds.indices(TRAIN)
    glabels = ds.global_labels
    steps = math.ceil(len(train_idx) / cfg.batch_size) * cfg.epochs
    step, records, bufs = 0, [], {}
    for epoch in range(cfg.epochs):
        losses = []
        for b in _batches(train_idx, ds.tasks, cfg.batch_size, rng, False):
            lr = cosine_lr(step, steps, cfg.lr)
            loss = cross_entropy(teacher.logits(Tensor(ds.images[b])), glabels[b])
            loss.backward()
            sgd_step(params, lr, cfg.momentum, bufs)
            zero_grad(params)
            losses.append(loss.item())
            step += 1
        rec = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
               "val_acc": teacher_accuracy(teacher, ds, VAL)}
        records.append(rec)
        if log_fn:
            log_fn(rec)
    return records


def teacher_accuracy(teacher: TeacherModel, ds: Dataset, split: int = VAL) -> float:
    idx = ds.indices(split)
    preds = _chunked_map(lambda b: teacher.logits(Tensor(ds.images[b])).data.argmax(1), idx, 256, eval_threads())
    return float((np.concatenate(preds) == ds.global_labels[idx]).mean())


def teacher_features(teacher: TeacherModel, images: np.ndarray) -> np.ndarray:
    idx = np.arange(len(images))
    parts = _chunked_map(lambda b: teacher.features(Tensor(images[b])).data, idx, 256, eval_threads())
    return np.concatenate(parts)


# -- student ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    per_task_acc: list[float]
    avg_acc: float
    features: np.ndarray
    tasks: np.ndarray


def evaluate(model: DecompModel, ds: Dataset, split: int = VAL, threads: int | None = None) -> EvalResult:
    """Per-task accuracy with each sample routed through its own expert and head."""
    idx = ds.indices(split)
    threads = eval_threads() if threads is None else threads
    n_tasks = model.arch.n_tasks

    def run(b):
        mask = TaskMask.from_tasks(ds.tasks[b], n_tasks)
        f = model.features(Tensor(ds.images[b]), mask)
        pred = np.empty(len(b), dtype=np.int64)
        for t, head in enumerate(model.heads):
            rows = np.flatnonzero(ds.tasks[b] == t)
            if rows.size:
                # argmax keeps the lowest index on ties
                pred[rows] = head(tn.take_rows(f, rows)).data.argmax(axis=1)
        return f.data, pred

    parts = _chunked_map(run, idx, 128, threads)
    feats = np.concatenate([p[0] for p in parts])
    preds = np.concatenate([p[1] for p in parts])
    accs = task_accuracies(preds, ds.labels[idx], ds.tasks[idx], n_tasks)
    return EvalResult(accs, task_average(accs), feats, ds.tasks[idx])


@dataclass
class MetricsReport:
    per_task_acc: list[float]
    avg_acc: float
    init_avg_acc: float
    train_params: int
    deploy_params: list[int]
    baseline_params: list[int]
    train_flops_per_sample: int
    deploy_flops: list[int]
    baseline_flops: list[int]
    mig: float | None
    checksum: str
    epochs: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _moving_average_check(totals: list[float], window: int = 5) -> bool:
    if len(totals) < window + 1:
        return True
    ma = np.convolve(totals, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(ma) <= 1e-12))


def train_decomposition(teacher: TeacherModel, student: DecompModel, ds: Dataset, cfg: TrainConfig,
                        log_fn=None, with_mig: bool = True) -> MetricsReport:
    """Distil the frozen teacher into the EKS student with mixed-task batches."""
    teacher.freeze()
    teacher_sum = checksum(teacher.parameters())
    t_feats = teacher_features(teacher, ds.images)
    rng = np.random.default_rng([cfg.seed, 13])
    params = student.backbone_parameters() + student.head_parameters()
    if cfg.train_experts:
        params += student.expert_parameters()
    else:
        for p in student.expert_parameters():
            p.requires_grad = False

    init = evaluate(student, ds, VAL)
    train_idx = ds.indices(TRAIN)
    steps = math.ceil(len(train_idx) / cfg.batch_size) * cfg.epochs
    if cfg.per_task_batches:
        steps = sum(math.ceil(np.sum(ds.tasks[train_idx] == t) / cfg.batch_size) for t in range(ds.n_tasks)) * cfg.epochs
    step, records, totals, bufs = 0, [], [], {}
    n_tasks = student.arch.n_tasks
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        count = 0
        for i, b in enumerate(_batches(train_idx, ds.tasks, cfg.batch_size, rng, cfg.per_task_batches)):
            lr = cosine_lr(step, steps, cfg.lr)
            try:
                mask = TaskMask.from_tasks(ds.tasks[b], n_tasks)
                f = student.features(Tensor(ds.images[b]), mask)
                terms = total_loss(f, ds.tasks[b], ds.labels[b], student.heads, Tensor(t_feats[b]),
                                   cfg.alpha, cfg.beta, student.projection)
                terms.total.backward()
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {i}: {exc}") from exc
            sgd_step(params, lr, cfg.momentum, bufs)
            zero_grad(params)
            sums += len(b) * np.array([terms.ce, terms.kl, terms.total.item()])
            count += len(b)
            step += 1
        ev = evaluate(student, ds, VAL)
        ce, kl, total = sums / count
        rec = {"epoch": epoch, "lr": lr, "ce": ce, "kl": kl, "total": total,
               "acc": ev.per_task_acc, "avg_acc": ev.avg_acc}
        records.append(rec)
        totals.append(total)
        if log_fn:
            log_fn(rec)
        log.info("epoch %d total %.4f avg_acc %.4f", epoch, total, ev.avg_acc)
    if not cfg.train_experts:
        for p in student.expert_parameters():
            p.requires_grad = True
    if not _moving_average_check(totals):
        warnings.warn("5-epoch moving average of the total loss increased during training")
    if checksum(teacher.parameters()) != teacher_sum:
        raise TrainingError("teacher parameters changed during decomposition")

    final = evaluate(student, ds, VAL)
    return build_report(student, ds, cfg, final, init.avg_acc, records, with_mig)


def build_report(student: DecompModel, ds: Dataset, cfg: TrainConfig, final: EvalResult, init_avg: float,
                 records: list[dict], with_mig: bool = True) -> MetricsReport:
    cost = student_train_cost(student, cfg.batch_size)
    deploy_p, deploy_f, base_p, base_f = [], [], [], []
    for t in range(student.arch.n_tasks):
        exp = export_expert(student, t)
        base = plain_baseline(student.arch, t)
        deploy_p.append(count_params(exp.parameters()))
        deploy_f.append(expert_flops(exp))
        base_p.append(count_params(base.parameters()))
        base_f.append(expert_flops(base))
    mig = mig_score(final.features, final.tasks) if with_mig and len(final.tasks) >= 100 else None
    return MetricsReport(
        per_task_acc=final.per_task_acc,
        avg_acc=final.avg_acc,
        init_avg_acc=init_avg,
        train_params=cost["train_params"],
        deploy_params=deploy_p,
        baseline_params=base_p,
        train_flops_per_sample=cost["train_flops_per_sample"],
        deploy_flops=deploy_f,
        baseline_flops=base_f,
        mig=mig,
        checksum=checksum(student.parameters()),
        epochs=records,
    )
