"""Release-gate invariant suite: every check reports a measured error against its tolerance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .conv import ConvSpec, call_counts, conv2d, grouped_conv2d
from .data import TaskSpec, from_bytes, generate, to_bytes
from .eks import (EksConvLayer, TaskMask, eks_backward_check, eks_cost_model, eks_forward, eks_forward_naive,
                  eks_param_count)
from .losses import TaskHead, total_loss, transfer_kl
from .metrics import mig_score
from .model import ArchConfig, DecompModel, StageConfig, count_params, expert_flops, export_expert, plain_baseline
from .tensor import Tensor, gradcheck

FAULTS = ("fusion-off-by-one",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    comparison: str = "<"

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name} {status} measured={self.measured:.3e} require {self.comparison} {self.tolerance:.3e}"


@dataclass
class VerificationReport:
    seed: int
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = [f"seed={self.seed}"] + [c.line() for c in self.checks]
        lines.append(f"overall {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _below(name: str, measured: float, tol: float) -> CheckResult:
    return CheckResult(name, bool(measured < tol), float(measured), tol)


def _layer(rng, c_in, c_out, k, n_tasks, rank, stride=1) -> EksConvLayer:
    layer = EksConvLayer.init(ConvSpec(c_in, c_out, k, stride, k // 2), n_tasks, rank, rng)
    for e in layer.experts:
        e.b_factor.data = rng.uniform(-1, 1, size=e.b_factor.shape)
    return layer


def _direct_conv(x, w, stride, padding):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = (h + 2 * padding - k) // stride + 1, (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, w.shape[0], ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out


def check_autodiff(rng) -> CheckResult:
    x = Tensor(rng.uniform(-1, 1, size=(4, 3)))
    w1 = Tensor(rng.uniform(-1, 1, size=(5, 3)), requires_grad=True)
    w2 = Tensor(rng.uniform(-1, 1, size=(2, 5)), requires_grad=True)
    err = gradcheck(lambda: tn.log_softmax(tn.linear(tn.exp(tn.linear(x, w1) * -0.5), w2)).sum(), [w1, w2])
    return _below("autodiff_finite_difference", err, 1e-6)


def check_conv(rng) -> list[CheckResult]:
    x, w = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3))
    worst = 0.0
    for stride in (1, 2):
        for pad in (0, 1):
            got = conv2d(Tensor(x), Tensor(w), ConvSpec(3, 4, 3, stride, pad)).data
            want = _direct_conv(x, w, stride, pad)
            worst = max(worst, np.abs(got - want).max() / np.abs(want).max())
    g = 3
    xg, wg = rng.normal(size=(1, 6, 5, 5)), rng.normal(size=(6, 2, 3, 3))
    got = grouped_conv2d(Tensor(xg), Tensor(wg), ConvSpec(6, 6, 3, 1, 1, g)).data
    want = np.concatenate([_direct_conv(xg[:, 2 * i:2 * i + 2], wg[2 * i:2 * i + 2], 1, 1) for i in range(g)], axis=1)
    gerr = np.abs(got - want).max() / np.abs(want).max()
    xs = Tensor(rng.uniform(-1, 1, size=(2, 2, 5, 5)), requires_grad=True)
    ws = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)), requires_grad=True)
    proj = Tensor(rng.uniform(-1, 1, size=(2, 3, 3, 3)))
    fd = gradcheck(lambda: (conv2d(xs, ws, ConvSpec(2, 3, 3, 2, 1)) * proj).sum(), [xs, ws])
    return [_below("conv2d_loop_oracle", worst, 1e-12), _below("grouped_conv_loop_oracle", gerr, 1e-12),
            _below("conv2d_finite_difference", fd, 1e-6)]


def check_eks_forward(rng, cases: int = 40) -> CheckResult:
    worst = 0.0
    for _ in range(cases):
        n_tasks, b = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        c_in, c_out = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        k = int(rng.choice([1, 3]))
        layer = _layer(rng, c_in, c_out, k, n_tasks, int(rng.integers(1, min(c_in, c_out) + 1)))
        h = Tensor(rng.normal(size=(b, c_in, 5, 5)))
        mask = TaskMask.from_tasks(rng.integers(0, n_tasks, size=b), n_tasks)
        worst = max(worst, np.abs(eks_forward(layer, h, mask).data - eks_forward_naive(layer, h, mask).data).max())
    return _below("eks_forward_naive_oracle", worst, 1e-10)


def check_gradient_separation(rng, cases: int = 10) -> list[CheckResult]:
    zero, err = True, 0.0
    for _ in range(cases):
        n_tasks, b = int(rng.integers(2, 6)), int(rng.integers(1, 7))
        layer = _layer(rng, 3, 2, 3, n_tasks, 2)
        h = Tensor(rng.normal(size=(b, 3, 4, 4)))
        proj = rng.normal(size=(b, 2, 4, 4))
        mask = TaskMask.from_tasks(rng.integers(0, n_tasks, size=b), n_tasks)
        rep = eks_backward_check(layer, h, mask, lambda out, rows: (out * Tensor(proj[rows])).sum())
        zero &= rep.absent_exactly_zero
        err = max(err, rep.expert_rel_err, rep.w0_rel_err)
    return [CheckResult("absent_expert_grad_exactly_zero", zero, 0.0 if zero else 1.0, 0.0, "=="),
            _below("gradient_naive_oracle", err, 1e-8)]


def check_single_pass(rng) -> CheckResult:
    worst = 0
    for n_tasks in (1, 2, 4, 8):
        layer = _layer(rng, 2, 2, 3, n_tasks, 1)
        call_counts.clear()
        eks_forward(layer, Tensor(rng.normal(size=(8, 2, 4, 4))), TaskMask.from_tasks(np.arange(8) % n_tasks, n_tasks))
        worst = max(worst, abs(call_counts["grouped_conv2d"] - 1) + call_counts["conv2d"])
    return CheckResult("single_grouped_call_per_forward", worst == 0, float(worst), 0.0, "==")


def check_fusion(rng, fault: str | None = None) -> list[CheckResult]:
    layer = _layer(rng, 4, 5, 3, 3, 2)
    h = Tensor(rng.normal(size=(3, 4, 6, 6)))
    w0 = layer.w0.data.copy()
    worst_fwd, worst_rt = 0.0, 0.0
    for t in range(layer.n_tasks):
        want = eks_forward(layer, h, TaskMask.from_tasks([t] * 3, layer.n_tasks)).data
        layer.fuse((t + 1) % layer.n_tasks if fault == "fusion-off-by-one" else t)
        worst_fwd = max(worst_fwd, np.abs(conv2d(h, layer.w0, layer.spec).data - want).max())
        layer.unfuse()
        worst_rt = max(worst_rt, np.abs(layer.w0.data - w0).max())
    layer.fuse(0)
    single = layer.w0.data.copy()
    for t in (1, 2, 0):
        layer.switch(t)
    sw = np.abs(layer.w0.data - single).max()
    return [_below("fusion_matches_eks_forward", worst_fwd, 1e-10), _below("fuse_unfuse_roundtrip", worst_rt, 1e-12),
            _below("switch_roundtrip", sw, 1e-12)]


def check_export(rng) -> list[CheckResult]:
    arch = ArchConfig(stages=(StageConfig(4), StageConfig(8)), image_size=8, task_classes=(3, 2))
    model = DecompModel.init(arch, 2, seed=int(rng.integers(1 << 31)))
    for layer in model.eks_layers:
        for e in layer.experts:
            e.b_factor.data = rng.normal(scale=0.3, size=e.b_factor.shape)
    x = Tensor(rng.normal(size=(6, 1, 8, 8)))
    worst, cost_gap = 0.0, 0
    for t in range(arch.n_tasks):
        f = model.features(x, TaskMask.from_tasks([t] * 6, arch.n_tasks))
        want = model.heads[t](f).data
        exp = export_expert(model, t)
        worst = max(worst, np.abs(exp.logits(x).data - want).max())
        base = plain_baseline(arch, t)
        cost_gap += abs(count_params(exp.parameters()) - count_params(base.parameters()))
        cost_gap += abs(expert_flops(exp) - expert_flops(base))
    pc = eks_param_count(ConvSpec(8, 8, 3), 4, 2)
    count_ok = pc.expert_total == 1152 and pc.deployed == pc.shared == 576
    return [_below("export_matches_training_logits", worst, 1e-10),
            CheckResult("deploy_cost_equals_baseline", cost_gap == 0 and count_ok, float(cost_gap), 0.0, "==")]


def check_losses(rng) -> list[CheckResult]:
    a = Tensor(rng.uniform(-1, 1, size=(3, 5)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, size=(3, 5)), requires_grad=True)
    kl_fd = gradcheck(lambda: transfer_kl(a, b, 10.0).sum(), [a, b])
    heads = [TaskHead(Tensor(rng.uniform(-1, 1, size=(y, 5)), requires_grad=True),
                      Tensor(rng.uniform(-1, 1, size=y), requires_grad=True), t) for t, y in enumerate((2, 3))]
    tasks, labels = np.array([0, 1, 1]), np.array([1, 2, 0])
    total_fd = gradcheck(lambda: total_loss(a, tasks, labels, heads, b, 10.0, 1.0).total,
                         [a] + [p for h in heads for p in h.parameters()])
    pairs = transfer_kl(Tensor(rng.normal(size=(1000, 6)) * 10), Tensor(rng.normal(size=(1000, 6)) * 10), 10.0).data
    return [_below("transfer_kl_finite_difference", kl_fd, 1e-6),
            _below("total_loss_finite_difference", total_fd, 1e-6),
            CheckResult("kl_non_negative", bool(pairs.min() >= 0), max(0.0, -float(pairs.min())), 0.0, "==")]


def check_cost_model(rng) -> CheckResult:
    mismatches = 0
    for _ in range(20):
        t, r, b, l, d = (int(v) for v in rng.integers(1, 9, size=5))
        cm = eks_cost_model(t, r, b, l, d)
        eks = t * (d * r) * d + b * l * d * d  # T products (d x r)(r x d), then one shared (bl x d)(d x d)
        flora = r * b * l * d * d
        mismatches += (cm.eks_cost != eks) + (cm.flora_cost != flora) + (cm.eks_cheaper != (t * r + b * l <= r * b * l))
    return CheckResult("cost_model_brute_force", mismatches == 0, float(mismatches), 0.0, "==")


def check_data(seed: int) -> CheckResult:
    specs = [TaskSpec(0, 3, "oriented-bars", 0.1, 4), TaskSpec(1, 2, "gaussian-blobs", 0.1, 4)]
    blob = to_bytes(generate(specs, seed))
    same = blob == to_bytes(generate(specs, seed)) and to_bytes(from_bytes(blob)) == blob
    return CheckResult("dataset_roundtrip_deterministic", same, 0.0 if same else 1.0, 0.0, "==")


def check_mig(rng) -> CheckResult:
    tasks = rng.integers(0, 4, size=4000)
    feats = rng.normal(size=(4000, 5))
    feats[:, 2] = tasks
    return CheckResult("mig_informative_dim", (s := mig_score(feats, tasks)) > 0.9, s, 0.9, ">")


def verify_all(seed: int = 0, fault: str | None = None) -> VerificationReport:
    """Run every invariant check; failures become report entries, never exceptions."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {FAULTS}")
    rep = VerificationReport(seed)

    def run(name, fn, *args):
        # each check gets its own stream so adding or faulting one never shifts another
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        try:
            out = fn(rng, *args)
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check, not a crashed suite
            out = CheckResult(f"{name}_error:{type(exc).__name__}", False, float("nan"), 0.0)
        rep.checks.extend(out if isinstance(out, list) else [out])

    run("autodiff", check_autodiff)
    run("conv", check_conv)
    run("eks_forward", check_eks_forward)
    run("gradient_separation", check_gradient_separation)
    run("single_pass", check_single_pass)
    run("fusion", check_fusion, fault)
    run("export", check_export)
    run("losses", check_losses)
    run("cost_model", check_cost_model)
    run("data", lambda rng: check_data(seed))
    run("mig", check_mig)
    return rep
