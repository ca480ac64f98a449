"""Shared convolution plus per-task low-rank experts (the EKS layer).

A layer owns one shared weight ``w0`` (C_out, C_in, k, k) and T factor pairs.
Expert t contributes ``reshape(B_t @ A_t)`` with
``B_t: (C_out*k, r*k)`` and ``A_t: (r*k, C_in*k)``.

For a mixed-task batch the per-sample weights are aggregated first::

    W'_i = W0 + sum_t M[i, t] * B_t A_t   =   ([1 | M] @ [W0; B_1 A_1; ...; B_T A_T])_i

and the whole batch is then pushed through a single grouped convolution with
``groups=B``. Experts of tasks that have no sample in the batch receive a
gradient of exactly zero because their column of ``M`` is all zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as tn
from .conv import ConvSpec, conv2d, grouped_conv2d
from .tensor import Tensor


class FusionError(RuntimeError):
    pass


@dataclass
class LowRankExpert:
    b_factor: Tensor
    a_factor: Tensor
    rank: int

    def __post_init__(self):
        r = self.rank
        bo, bi = self.b_factor.shape
        ai, ain = self.a_factor.shape
        if r < 1 or bi % r or bi != ai:
            raise ValueError(f"inconsistent factor shapes {self.b_factor.shape} x {self.a_factor.shape} for rank {r}")
        k = bi // r
        if bo % k or ain % k:
            raise ValueError(f"factor shapes {self.b_factor.shape}, {self.a_factor.shape} not multiples of k={k}")
        if r > min(bo // k, ain // k):
            raise ValueError(f"rank {r} exceeds min(C_in, C_out) = {min(bo // k, ain // k)}")

    @property
    def k(self) -> int:
        return self.b_factor.shape[1] // self.rank

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.k
        return (self.b_factor.shape[0] // k, self.a_factor.shape[1] // k, k, k)

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rank: int, rng: np.random.Generator) -> LowRankExpert:
        bound = 1.0 / math.sqrt(rank * k)
        a = rng.uniform(-bound, bound, size=(rank * k, c_in * k))
        b = np.zeros((c_out * k, rank * k))
        return cls(Tensor(b, requires_grad=True), Tensor(a, requires_grad=True), rank)

    def parameters(self) -> list[Tensor]:
        return [self.b_factor, self.a_factor]


def expert_delta(e: LowRankExpert) -> Tensor:
    """``reshape(B @ A)`` as a (C_out, C_in, k, k) weight delta."""
    return tn.matmul(e.b_factor, e.a_factor).reshape(e.weight_shape)


@dataclass
class TaskMask:
    """One-hot (B, T) assignment of batch samples to tasks."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"task mask must be 2-D, got shape {m.shape}")
        binary = np.all((m == 0) | (m == 1), axis=1)
        bad = np.flatnonzero(~binary | (m.sum(axis=1) != 1))
        if bad.size:
            raise ValueError(f"task mask rows {bad.tolist()} are not one-hot")
        self.m = m

    @classmethod
    def from_tasks(cls, tasks, n_tasks: int) -> TaskMask:
        tasks = np.asarray(tasks, dtype=np.int64)
        if tasks.size and (tasks.min() < 0 or tasks.max() >= n_tasks):
            raise ValueError(f"task index out of range for {n_tasks} tasks")
        m = np.zeros((tasks.size, n_tasks))
        m[np.arange(tasks.size), tasks] = 1.0
        return cls(m)

    @property
    def batch(self) -> int:
        return self.m.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.m.shape[1]

    def tasks(self) -> np.ndarray:
        return self.m.argmax(axis=1)


@dataclass
class EksConvLayer:
    w0: Tensor
    experts: list[LowRankExpert]
    spec: ConvSpec
    fused_task: int | None = None
    _canonical_w0: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.experts:
            raise ValueError("an EKS layer needs at least one expert")
        if self.spec.groups != 1:
            raise ValueError("EKS layers wrap dense convolutions only (groups == 1)")
        if self.w0.shape != self.spec.weight_shape:
            raise ValueError(f"w0 shape {self.w0.shape} does not match {self.spec.weight_shape}")
        for e in self.experts:
            if e.weight_shape != self.w0.shape:
                raise ValueError(f"expert shape {e.weight_shape} does not match w0 {self.w0.shape}")

    @classmethod
    def init(cls, spec: ConvSpec, n_tasks: int, rank: int, rng: np.random.Generator) -> EksConvLayer:
        fan_in = spec.c_in * spec.k * spec.k
        bound = math.sqrt(6.0 / fan_in)
        w0 = Tensor(rng.uniform(-bound, bound, size=spec.weight_shape), requires_grad=True)
        experts = [LowRankExpert.init(spec.c_in, spec.c_out, spec.k, rank, rng) for _ in range(n_tasks)]
        return cls(w0, experts, spec)

    @property
    def n_tasks(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Tensor]:
        return [self.w0] + [p for e in self.experts for p in e.parameters()]

    def expert_parameters(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()]

    def __call__(self, h: Tensor, mask: TaskMask) -> Tensor:
        return eks_forward(self, h, mask)

    # -- task knowledge switch ---------------------------------------------
    def _check_task(self, t: int) -> None:
        if not 0 <= t < self.n_tasks:
            raise IndexError(f"task {t} out of range for {self.n_tasks} experts")

    def fuse(self, t: int) -> None:
        """Fold expert t into the shared weight: ``w0 <- w0 + B_t A_t``."""
        if self.fused_task is not None:
            raise FusionError(f"layer already fused to task {self.fused_task}; unfuse first")
        self._check_task(t)
        self._canonical_w0 = self.w0.data.copy()
        with tn.no_grad():
            self.w0.data = self.w0.data + expert_delta(self.experts[t]).data
        self.fused_task = t

    def unfuse(self) -> None:
        """Recover the shared weight: ``w0 <- w0 - B_t A_t``."""
        if self.fused_task is None:
            raise FusionError("layer is not fused")
        with tn.no_grad():
            self.w0.data = self.w0.data - expert_delta(self.experts[self.fused_task]).data
        self.fused_task = None
        self._canonical_w0 = None

    def switch(self, t_new: int) -> None:
        """``W0 = W_t - B_t A_t`` then ``W_t' = W0 + B_t' A_t'``."""
        if self.fused_task is None:
            raise FusionError("switch needs a fused layer; call fuse first")
        self._check_task(t_new)
        canonical = self._canonical_w0
        self.unfuse()
        self.fuse(t_new)
        # the on-disk form keeps the shared weight seen at the first fuse
        self._canonical_w0 = canonical

    def shared_weight(self) -> np.ndarray:
        """Unfused shared weight in canonical form (what checkpoints store)."""
        if self.fused_task is None:
            return self.w0.data
        return self._canonical_w0


def _aggregate(layer: EksConvLayer, mask: TaskMask) -> Tensor:
    """Per-sample weights W' of shape (B*C_out, C_in, k, k).

    Equals ``[1 | M] @ [W0; BA_1; ...; BA_T]``. Since M is one-hot, each row
    of the product is a copy of ``W0 + BA_t`` for the sample's task, so the
    per-task weights are built once (only for tasks present in the batch) and
    copied into their rows. Absent experts never enter the graph, so their
    gradients are exactly zero.
    """
    c_out, c_in, k, _ = layer.w0.shape
    p = c_out * c_in * k * k
    present, index = np.unique(mask.tasks(), return_inverse=True)
    experts = [layer.experts[t] for t in present]
    bs = [e.b_factor.data for e in experts]
    as_ = [e.a_factor.data for e in experts]
    select = index[None, :] == np.arange(len(experts))[:, None]
    out = np.empty((mask.batch, p))
    # one task at a time so the (C_out, C_in, k, k) buffer stays cache-resident while it is copied out
    first = layer.experts[0]
    buf = np.empty((first.b_factor.shape[0], first.a_factor.shape[1]))
    flat = buf.reshape(1, p)
    for i, rows in enumerate(select):
        np.matmul(bs[i], as_[i], out=buf)
        flat += layer.w0.data.reshape(1, p)
        if not tn._all_finite(buf):
            raise FloatingPointError(f"non-finite weights for task {present[i]}")
        out[rows] = flat
    out = out.reshape(mask.batch * c_out, c_in, k, k)
    select = select.astype(np.float64)

    def backward(g):
        g_table = select @ g.reshape(mask.batch, p)
        g_delta = g_table.reshape(len(experts), buf.shape[0], buf.shape[1])
        grads = [g_table.sum(axis=0).reshape(layer.w0.shape)]
        for i in range(len(experts)):
            grads += [g_delta[i] @ as_[i].T, bs[i].T @ g_delta[i]]
        return tuple(grads)

    parents = [layer.w0] + [q for e in experts for q in e.parameters()]
    return tn._make(out, parents, backward, "eks_aggregate", check=False)


def eks_forward(layer: EksConvLayer, h: Tensor, mask: TaskMask) -> Tensor:
    """Sample i is convolved with ``W0 + B_t(i) A_t(i)``, in one grouped conv call."""
    if layer.fused_task is not None:
        raise FusionError(f"layer is fused to task {layer.fused_task}; unfuse before training-mode forward")
    if mask.n_tasks != layer.n_tasks:
        raise ValueError(f"mask has {mask.n_tasks} tasks, layer has {layer.n_tasks}")
    if h.ndim != 4 or h.shape[0] != mask.batch:
        raise tn.ShapeError(f"input {h.shape} does not match mask batch {mask.batch}")
    spec = layer.spec
    b, _, hh, ww = h.shape
    weights = _aggregate(layer, mask)
    gspec = ConvSpec(b * spec.c_in, b * spec.c_out, spec.k, spec.stride, spec.padding, groups=b)
    out = grouped_conv2d(h.reshape(1, b * spec.c_in, hh, ww), weights, gspec)
    ho, wo = spec.out_size(hh, ww)
    return out.reshape(b, spec.c_out, ho, wo)


def eks_forward_naive(layer: EksConvLayer, h: Tensor, mask: TaskMask) -> Tensor:
    """Reference: one dense conv per task on that task's sub-batch, re-concatenated in batch order."""
    tasks = mask.tasks()
    parts, order = [], []
    for t in range(layer.n_tasks):
        rows = np.flatnonzero(tasks == t)
        if rows.size == 0:
            continue
        w_t = layer.w0 + expert_delta(layer.experts[t])
        parts.append(conv2d(tn.take_rows(h, rows), w_t, layer.spec))
        order.append(rows)
    out = tn.concat(parts, axis=0)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return tn.take_rows(out, inverse)


@dataclass
class GradReport:
    absent_tasks: list[int]
    absent_exactly_zero: bool
    expert_rel_err: float
    w0_rel_err: float
    tol: float = 1e-8

    @property
    def ok(self) -> bool:
        return self.absent_exactly_zero and self.expert_rel_err < self.tol and self.w0_rel_err < self.tol


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)) if a.size else 0.0


def _grads(params: list[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def eks_backward_check(layer: EksConvLayer, h: Tensor, mask: TaskMask, loss_fn, tol: float = 1e-8) -> GradReport:
    """Compare single-pass gradients with the per-task formulation.

    ``loss_fn(out, rows)`` must return a scalar that is a sum of per-sample
    terms, where ``rows`` are the batch indices of the rows of ``out``. That
    makes per-task sub-batch losses add up to the full-batch loss.
    """
    params = layer.parameters()
    tasks = mask.tasks()
    all_rows = np.arange(mask.batch)

    for p in params:
        p.grad = None
    loss_fn(eks_forward(layer, h, mask), all_rows).backward()
    fast = _grads(params)

    for p in params:
        p.grad = None
    loss_fn(eks_forward_naive(layer, h, mask), all_rows).backward()
    naive = _grads(params)

    # shared weight: separate per-task sub-batch runs, gradients summed
    w0_sum = np.zeros_like(layer.w0.data)
    for t in np.unique(tasks):
        rows = np.flatnonzero(tasks == t)
        layer.w0.grad = None
        sub = TaskMask.from_tasks(tasks[rows], layer.n_tasks)
        loss_fn(eks_forward_naive(layer, tn.take_rows(h, rows), sub), rows).backward()
        w0_sum += layer.w0.grad
    for p in params:
        p.grad = None

    absent = [t for t in range(layer.n_tasks) if not np.any(tasks == t)]
    zero = all(np.all(fast[1 + 2 * t + j] == 0.0) for t in absent for j in (0, 1))
    present = [i for t in range(layer.n_tasks) if t not in absent for i in (1 + 2 * t, 2 + 2 * t)]
    expert_err = max((_rel_err(fast[i], naive[i]) for i in present), default=0.0)
    w0_err = max(_rel_err(fast[0], naive[0]), _rel_err(fast[0], w0_sum))
    return GradReport(absent, zero, expert_err, w0_err, tol)


@dataclass(frozen=True)
class ParamCount:
    shared: int
    expert_total: int
    deployed: int


def eks_param_count(spec: ConvSpec, n_tasks: int, rank: int) -> ParamCount:
    k = spec.k
    shared = spec.c_out * spec.c_in * k * k
    expert_total = n_tasks * rank * k * k * (spec.c_out + spec.c_in)
    return ParamCount(shared, expert_total, shared)


@dataclass(frozen=True)
class CostModel:
    eks_cost: int
    flora_cost: int
    eks_cheaper: bool


def eks_cost_model(n_tasks: int, rank: int, batch: int, seq_len: int, dim: int) -> CostModel:
    """Matmul cost (unit coefficient) of per-sample low-rank experts.

    Aggregating weights costs ``T*r*d^2 + b*l*d^2``; the per-sample
    Hadamard formulation costs ``r*b*l*d^2``. Aggregation wins (ties
    included) iff ``T*r/(b*l) + 1 <= r``.
    """
    if min(n_tasks, rank, batch, seq_len, dim) < 1:
        raise ValueError("all cost-model arguments must be positive")
    d2 = dim * dim
    eks = n_tasks * rank * d2 + batch * seq_len * d2
    flora = rank * batch * seq_len * d2
    cheaper = Fraction(n_tasks * rank, batch * seq_len) + 1 <= rank
    return CostModel(eks, flora, bool(cheaper))
