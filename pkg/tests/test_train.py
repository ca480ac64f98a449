import math

import numpy as np
import pytest

from eksdecomp import tensor as tn
from eksdecomp.data import FAMILIES, TaskSpec, generate
from eksdecomp.eks import eks_param_count
from eksdecomp.metrics import entropy, mig_score, mutual_info, quantile_discretize, task_accuracies, task_average
from eksdecomp.model import ArchConfig, DecompModel, StageConfig, TeacherModel, count_params
from eksdecomp.train import (TrainConfig, TrainingError, checksum, cosine_lr, evaluate, sgd_step, train_decomposition,
                             train_teacher)
from eksdecomp.tensor import Tensor

TINY_ARCH_STAGES = (StageConfig(8), StageConfig(16))


@pytest.fixture(scope="module")
def tiny():
    specs = [TaskSpec(t, 3, FAMILIES[t], 0.1, 40) for t in range(3)]
    ds = generate(specs, seed=0, size=8)
    arch = ArchConfig(stages=TINY_ARCH_STAGES, image_size=8, task_classes=ds.task_classes)
    teacher = TeacherModel.init(arch, 0)
    train_teacher(teacher, ds, TrainConfig(epochs=2, lr=0.1))
    return ds, arch, teacher


def test_cosine_examples():
    assert cosine_lr(0, 100, 0.05) == 0.05
    assert cosine_lr(100, 100, 0.05) == 0.0
    assert cosine_lr(50, 100, 0.05) == pytest.approx(0.025, abs=1e-15)
    assert cosine_lr(0, 0, 0.1) == 0.1
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.05)


def test_cosine_monotone():
    lrs = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    sgd_step([p], 0.1)
    np.testing.assert_allclose(p.data, [0.95, 2.1])
    p.grad = np.zeros(3)
    with pytest.raises(tn.ShapeError):
        sgd_step([p], 0.1)


def test_sgd_momentum():
    p = Tensor(np.array([0.0]), requires_grad=True)
    bufs = {}
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step([p], 1.0, momentum=0.5, buffers=bufs)
    np.testing.assert_allclose(p.data, [-2.5])  # 1 then 0.5*1 + 1


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.alpha, cfg.beta, cfg.rank, cfg.momentum) == (0.05, 10.0, 1.0, 8, 0.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_zero_epochs_leaves_student_unchanged(tiny):
    ds, arch, teacher = tiny
    student = DecompModel.init(arch, 4, seed=1)
    before = checksum(student.parameters())
    rep = train_decomposition(teacher, student, ds, TrainConfig(epochs=0))
    assert checksum(student.parameters()) == before == rep.checksum
    assert rep.avg_acc == rep.init_avg_acc
    assert rep.epochs == []


def test_tiny_run_improves_and_is_deterministic(tiny):
    ds, arch, teacher = tiny
    t_sum = checksum(teacher.parameters())
    reps = []
    for _ in range(2):
        student = DecompModel.init(arch, 4, seed=1)
        reps.append(train_decomposition(teacher, student, ds, TrainConfig(epochs=2, lr=0.1, batch_size=16)))
    a, b = reps
    assert a.avg_acc > a.init_avg_acc
    assert a.checksum == b.checksum
    assert a.to_json() == b.to_json()
    assert checksum(teacher.parameters()) == t_sum
    assert [r["epoch"] for r in a.epochs] == [0, 1]
    assert set(a.epochs[0]) >= {"epoch", "lr", "ce", "kl", "total", "acc"}


def test_report_consistency(tiny):
    ds, arch, teacher = tiny
    student = DecompModel.init(arch, 4, seed=2)
    rep = train_decomposition(teacher, student, ds, TrainConfig(epochs=1, batch_size=16))
    assert rep.avg_acc == pytest.approx(np.mean(rep.per_task_acc))
    assert rep.deploy_flops == rep.baseline_flops
    assert rep.deploy_params == rep.baseline_params
    experts = sum(eks_param_count(l.spec, l.n_tasks, l.experts[0].rank).expert_total for l in student.eks_layers)
    shared = sum(eks_param_count(l.spec, l.n_tasks, l.experts[0].rank).shared for l in student.eks_layers)
    assert rep.train_params == shared + experts + count_params(student.head_parameters())


def test_shared_only_keeps_experts_zero(tiny):
    ds, arch, teacher = tiny
    student = DecompModel.init(arch, 4, seed=2)
    train_decomposition(teacher, student, ds, TrainConfig(epochs=1, batch_size=16, train_experts=False))
    assert all(np.all(l.experts[t].b_factor.data == 0) for l in student.eks_layers for t in range(3))
    assert all(p.requires_grad for p in student.expert_parameters())


def test_per_task_batches_run(tiny):
    ds, arch, teacher = tiny
    rep = train_decomposition(teacher, DecompModel.init(arch, 4, 3), ds,
                              TrainConfig(epochs=1, batch_size=16, per_task_batches=True), with_mig=False)
    assert rep.mig is None and len(rep.per_task_acc) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_context(tiny):
    ds, arch, teacher = tiny
    student = DecompModel.init(arch, 4, seed=1)
    with pytest.raises(TrainingError, match=r"epoch 0, step \d+"):
        train_decomposition(teacher, student, ds, TrainConfig(epochs=1, lr=1e30))


def test_eval_threads_agree(tiny):
    ds, arch, _ = tiny
    student = DecompModel.init(arch, 4, seed=1)
    a, b = evaluate(student, ds, threads=1), evaluate(student, ds, threads=3)
    assert a.per_task_acc == b.per_task_acc
    np.testing.assert_array_equal(a.features, b.features)


# -- metrics ---------------------------------------------------------------------------------

def test_task_average_is_unweighted():
    pred = np.array([0, 0, 0, 1, 1])
    labels = np.array([0, 0, 0, 0, 1])
    tasks = np.array([0, 0, 0, 1, 1])
    accs = task_accuracies(pred, labels, tasks, 2)
    assert accs == [1.0, 0.5]
    assert task_average(accs) == 0.75  # sample-weighted would be 0.8


def test_plugin_mi_oracle():
    a = np.array([0, 0, 1, 1])
    assert mutual_info(a, a) == pytest.approx(math.log(2))
    assert mutual_info(a, np.array([0, 1, 0, 1])) == pytest.approx(0.0, abs=1e-15)
    assert entropy(np.array([0, 1, 2, 3])) == pytest.approx(math.log(4))


def test_quantile_bins_balanced(rng):
    codes = quantile_discretize(rng.normal(size=(2000, 2)))
    counts = np.bincount(codes[:, 0])
    assert len(counts) == 20 and counts.min() == counts.max() == 100


def test_mig_single_informative_dim(rng):
    tasks = rng.integers(0, 4, size=5000)
    feats = rng.normal(size=(5000, 6))
    feats[:, 0] = tasks
    assert mig_score(feats, tasks) > 0.9


def test_mig_pure_noise(rng):
    assert mig_score(rng.normal(size=(10000, 5)), rng.integers(0, 4, size=10000)) < 0.1


def test_mig_two_copies(rng):
    tasks = rng.integers(0, 4, size=2000)
    feats = rng.normal(size=(2000, 4))
    feats[:, 1] = feats[:, 3] = tasks
    assert mig_score(feats, tasks) < 1e-12


def test_mig_errors(rng):
    with pytest.raises(ValueError):
        mig_score(rng.normal(size=(200, 3)), np.zeros(200))
    with pytest.raises(ValueError):
        mig_score(rng.normal(size=(50, 3)), rng.integers(0, 2, size=50))
    with pytest.raises(ValueError):
        mig_score(rng.normal(size=(200, 1)), rng.integers(0, 2, size=200))
