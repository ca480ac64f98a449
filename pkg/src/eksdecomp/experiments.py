"""Seeded end-to-end comparison: decomposed student vs shared-backbone-only student."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .data import generate, standard_specs
from .model import ArchConfig, DecompModel, TeacherModel
from .train import MetricsReport, TrainConfig, teacher_accuracy, train_decomposition, train_teacher


@dataclass(frozen=True)
class BenefitConfig:
    teacher_epochs: int = 3
    student_epochs: int = 3
    correlated: bool = False
    lr: float = 0.05
    rank: int = 8


@dataclass
class BenefitResult:
    seed: int
    teacher_acc: float
    decomposed: MetricsReport
    shared_only: MetricsReport
    seconds: float

    @property
    def gap(self) -> float:
        return self.decomposed.avg_acc - self.shared_only.avg_acc

    @property
    def gain_over_init(self) -> float:
        return self.decomposed.avg_acc - self.decomposed.init_avg_acc

    def summary(self) -> str:
        d, s = self.decomposed, self.shared_only
        return (f"seed={self.seed} teacher={self.teacher_acc:.4f} decomposed={d.avg_acc:.4f} "
                f"shared_only={s.avg_acc:.4f} init={d.init_avg_acc:.4f} "
                f"mig_decomposed={d.mig:.4f} mig_shared_only={s.mig:.4f} seconds={self.seconds:.1f}")


def run_benefit(seed: int, cfg: BenefitConfig = BenefitConfig()) -> BenefitResult:
    """Train a teacher, then two students from the same init: with experts and with experts frozen at zero."""
    start = time.perf_counter()
    ds = generate(standard_specs(n_tasks=4, n_classes=4, sigma=0.1, samples_per_class=200,
                                 correlated=cfg.correlated), seed)
    arch = ArchConfig(task_classes=ds.task_classes)
    teacher = TeacherModel.init(arch, seed)
    train_teacher(teacher, ds, TrainConfig(epochs=cfg.teacher_epochs, lr=cfg.lr, seed=seed))
    reports = []
    for train_experts in (True, False):
        student = DecompModel.init(arch, cfg.rank, seed)
        tc = TrainConfig(epochs=cfg.student_epochs, lr=cfg.lr, rank=cfg.rank, seed=seed, train_experts=train_experts)
        reports.append(train_decomposition(teacher, student, ds, tc))
    return BenefitResult(seed, teacher_accuracy(teacher, ds), reports[0], reports[1], time.perf_counter() - start)
