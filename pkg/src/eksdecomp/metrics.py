"""Accuracy summaries and the mutual information gap (MIG) with task as the factor."""

from __future__ import annotations

import numpy as np


def quantile_discretize(x: np.ndarray, bins: int = 20) -> np.ndarray:
    """Map each column of (N, d) to integer bin ids using that column's quantiles."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape, dtype=np.int64)
    qs = np.linspace(0, 1, bins + 1)[1:-1]
    for j in range(x.shape[1]):
        edges = np.quantile(x[:, j], qs)
        out[:, j] = np.searchsorted(edges, x[:, j], side="right")
    return out


def entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in estimate of I(a; b) in nats for two integer label vectors."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def mig_score(features: np.ndarray, task_labels: np.ndarray, bins: int = 20) -> float:
    """``(I_1 - I_2) / H(task)`` from the two most task-informative feature dims, clamped to [0, 1]."""
    features = np.asarray(features, dtype=np.float64)
    task_labels = np.asarray(task_labels)
    if features.ndim != 2 or features.shape[0] != task_labels.shape[0]:
        raise ValueError(f"features {features.shape} and labels {task_labels.shape} disagree")
    n, d = features.shape
    if n < 100 or d < 2:
        raise ValueError(f"MIG needs N >= 100 and d >= 2, got N={n}, d={d}")
    h = entropy(task_labels)
    if h == 0.0:
        raise ValueError("MIG is undefined for a single task")
    codes = quantile_discretize(features, bins)
    mi = np.sort([mutual_info(codes[:, j], task_labels) for j in range(d)])[::-1]
    return float(np.clip((mi[0] - mi[1]) / h, 0.0, 1.0))


def task_accuracies(pred: np.ndarray, labels: np.ndarray, tasks: np.ndarray, n_tasks: int) -> list[float]:
    out = []
    for t in range(n_tasks):
        sel = tasks == t
        out.append(float((pred[sel] == labels[sel]).mean()) if sel.any() else float("nan"))
    return out


def task_average(accs: list[float]) -> float:
    """Unweighted mean over tasks (each task counts once regardless of its size)."""
    return float(np.mean(accs))
