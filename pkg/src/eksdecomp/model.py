"""Teacher network, EKS student, deployable expert export and checkpoint files.

Checkpoint layout (little-endian)::

    b"EKSC" | version u16 | header_len u32 | header text | n_sections u32 | sections

The header is three lines, ``KIND:<teacher|student|expert>``, ``FUSED:<t|none>``
and ``ARCH:<canonical json>``. Each section is a u16-length name followed by
one tensor blob. Student checkpoints always hold the unfused shared weights.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .conv import ConvSpec, conv2d, conv_flops, grouped_conv2d
from .eks import EksConvLayer, LowRankExpert, TaskMask, eks_param_count
from .losses import TaskHead, head_logits
from .serialize import FormatError, Reader, read_named, write_named
from .tensor import Tensor

CKPT_MAGIC = b"EKSC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class StageConfig:
    c_out: int
    k: int = 3
    stride: int = 2
    eks: bool = True
    groups: int = 1


def _default_stages() -> tuple[StageConfig, ...]:
    return tuple(StageConfig(c) for c in (16, 32, 64, 128))


@dataclass(frozen=True)
class ArchConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    in_channels: int = 1
    image_size: int = 16
    task_classes: tuple[int, ...] = (4, 4, 4, 4)
    teacher_width: int = 2
    project: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages))
        object.__setattr__(self, "task_classes", tuple(int(c) for c in self.task_classes))
        if not any(s.eks for s in self.stages):
            raise ValueError("architecture needs at least one EKS stage")
        for s in self.stages:
            if s.eks and s.groups != 1:
                raise ValueError("grouped convolutions stay plain; set eks=False on grouped stages")
        if not self.task_classes or min(self.task_classes) < 2:
            raise ValueError("every task needs at least 2 classes")
        if not self.project and self.teacher_width != 1:
            raise ValueError("projection can only be disabled when teacher and student widths match")

    @property
    def n_tasks(self) -> int:
        return len(self.task_classes)

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].c_out

    @property
    def teacher_dim(self) -> int:
        return self.stages[-1].c_out * self.teacher_width

    def specs(self, width: int = 1) -> list[ConvSpec]:
        c_in, out = self.in_channels, []
        for s in self.stages:
            c_out = s.c_out * width
            out.append(ConvSpec(c_in, c_out, s.k, s.stride, s.k // 2, s.groups))
            c_in = c_out
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        d = dict(d)
        d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        return cls(**d)


def _he_uniform(spec: ConvSpec, rng: np.random.Generator) -> np.ndarray:
    fan_in = (spec.c_in // spec.groups) * spec.k * spec.k
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=spec.weight_shape)


@dataclass
class PlainConv:
    weight: Tensor
    spec: ConvSpec

    def __call__(self, h: Tensor, mask: TaskMask | None = None) -> Tensor:
        if self.spec.groups == 1:
            return conv2d(h, self.weight, self.spec)
        return grouped_conv2d(h, self.weight, self.spec)

    def parameters(self) -> list[Tensor]:
        return [self.weight]


def _pool(h: Tensor) -> Tensor:
    return h.mean(axis=(2, 3))


@dataclass
class TeacherModel:
    arch: ArchConfig
    convs: list[PlainConv]
    head_weight: Tensor
    head_bias: Tensor

    @classmethod
    def init(cls, arch: ArchConfig, seed: int) -> TeacherModel:
        rng = np.random.default_rng([seed, 1])
        convs = [PlainConv(Tensor(_he_uniform(s, rng), requires_grad=True), s) for s in arch.specs(arch.teacher_width)]
        d, y = arch.teacher_dim, sum(arch.task_classes)
        bound = 1.0 / math.sqrt(d)
        return cls(arch, convs, Tensor(rng.uniform(-bound, bound, (y, d)), requires_grad=True),
                   tn.zeros(y, requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return [c.weight for c in self.convs] + [self.head_weight, self.head_bias]

    def features(self, x: Tensor) -> Tensor:
        h = x
        for c in self.convs:
            h = tn.relu(c(h))
        return _pool(h)

    def logits(self, x: Tensor) -> Tensor:
        return tn.linear(self.features(x), self.head_weight, self.head_bias)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None


def forward_teacher(teacher: TeacherModel, x: Tensor) -> Tensor:
    _check_input(teacher.arch, x)
    with tn.no_grad():
        return teacher.features(x)


@dataclass
class DecompModel:
    """Student: EKS/plain conv stages, global pool, projection to teacher dim, T heads."""

    arch: ArchConfig
    layers: list
    heads: list[TaskHead]
    projection: Tensor | None
    rank: int

    @classmethod
    def init(cls, arch: ArchConfig, rank: int, seed: int) -> DecompModel:
        rng = np.random.default_rng([seed, 2])
        layers = []
        for stage, spec in zip(arch.stages, arch.specs()):
            if stage.eks:
                r = min(rank, spec.c_in, spec.c_out)
                layers.append(EksConvLayer.init(spec, arch.n_tasks, r, rng))
            else:
                layers.append(PlainConv(Tensor(_he_uniform(spec, rng), requires_grad=True), spec))
        d = arch.feature_dim
        heads = [TaskHead.init(t, y, d, rng) for t, y in enumerate(arch.task_classes)]
        proj = None
        if arch.project:
            bound = 1.0 / math.sqrt(d)
            proj = Tensor(rng.uniform(-bound, bound, (arch.teacher_dim, d)), requires_grad=True)
        return cls(arch, layers, heads, proj, rank)

    @property
    def eks_layers(self) -> list[EksConvLayer]:
        return [l for l in self.layers if isinstance(l, EksConvLayer)]

    def backbone_parameters(self) -> list[Tensor]:
        return [l.w0 if isinstance(l, EksConvLayer) else l.weight for l in self.layers]

    def expert_parameters(self) -> list[Tensor]:
        return [p for l in self.eks_layers for p in l.expert_parameters()]

    def head_parameters(self) -> list[Tensor]:
        out = [p for h in self.heads for p in h.parameters()]
        return out + ([self.projection] if self.projection is not None else [])

    def parameters(self) -> list[Tensor]:
        return self.backbone_parameters() + self.expert_parameters() + self.head_parameters()

    def features(self, x: Tensor, mask: TaskMask) -> Tensor:
        h = x
        for layer in self.layers:
            h = tn.relu(layer(h, mask))
        return _pool(h)


def _check_input(arch: ArchConfig, x: Tensor) -> None:
    want = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise tn.ShapeError(f"input {x.shape} does not match (B, {want[0]}, {want[1]}, {want[2]})")


def forward_student(model: DecompModel, x: Tensor, mask: TaskMask):
    """Returns ``(features, {task: (batch rows, logits)})``; every EKS layer sees the same mask."""
    _check_input(model.arch, x)
    f = model.features(x, mask)
    return f, head_logits(f, mask.tasks(), model.heads)


@dataclass
class ExpertModel:
    """Deployable single-task network: plain convs with fused weights plus one head."""

    arch: ArchConfig
    task: int
    convs: list[PlainConv]
    head: TaskHead

    def parameters(self) -> list[Tensor]:
        return [c.weight for c in self.convs] + self.head.parameters()

    def features(self, x: Tensor) -> Tensor:
        _check_input(self.arch, x)
        h = x
        for c in self.convs:
            h = tn.relu(c(h))
        return _pool(h)

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


def export_expert(model: DecompModel, t: int) -> ExpertModel:
    """Fuse every EKS layer for task ``t`` (on a copy) and keep only plain weights + head t."""
    if not 0 <= t < model.arch.n_tasks:
        raise IndexError(f"task {t} out of range for {model.arch.n_tasks} tasks")
    work = copy.deepcopy(model)
    convs = []
    for layer in work.layers:
        if isinstance(layer, EksConvLayer):
            if layer.fused_task is not None:
                layer.unfuse()
            layer.fuse(t)
            convs.append(PlainConv(Tensor(layer.w0.data.copy()), layer.spec))
        else:
            convs.append(PlainConv(Tensor(layer.weight.data.copy()), layer.spec))
    h = work.heads[t]
    head = TaskHead(Tensor(h.weight.data.copy()), Tensor(h.bias.data.copy()), t)
    return ExpertModel(model.arch, t, convs, head)


def plain_baseline(arch: ArchConfig, task: int, seed: int = 0) -> ExpertModel:
    """Plain CNN of the same architecture with a single task head (cost baseline)."""
    rng = np.random.default_rng([seed, 3])
    convs = [PlainConv(Tensor(_he_uniform(s, rng)), s) for s in arch.specs()]
    head = TaskHead.init(task, arch.task_classes[task], arch.feature_dim, rng)
    return ExpertModel(arch, task, convs, head)


# -- cost accounting ------------------------------------------------------------

def count_params(params) -> int:
    return int(sum(p.size for p in params))


def inference_flops(arch: ArchConfig, convs_specs: list[ConvSpec], head_classes: int) -> int:
    """Per-sample FLOPs of convs plus the linear head (2 per multiply-add)."""
    h = w = arch.image_size
    total = 0
    for spec in convs_specs:
        total += conv_flops(spec, h, w)
        h, w = spec.out_size(h, w)
    return total + 2 * arch.feature_dim * head_classes


def expert_flops(m: ExpertModel) -> int:
    return inference_flops(m.arch, [c.spec for c in m.convs], m.head.n_classes)


def student_train_cost(model: DecompModel, batch_size: int) -> dict:
    """Trainable parameter count and per-sample training-forward FLOPs."""
    shared = sum(eks_param_count(l.spec, l.n_tasks, l.experts[0].rank).shared for l in model.eks_layers)
    experts = sum(eks_param_count(l.spec, l.n_tasks, l.experts[0].rank).expert_total for l in model.eks_layers)
    plain = sum(l.weight.size for l in model.layers if isinstance(l, PlainConv))
    heads = count_params(model.head_parameters())
    conv = inference_flops(model.arch, [l.spec for l in model.layers], 0)
    delta = 0
    for l in model.eks_layers:
        k, r = l.spec.k, l.experts[0].rank
        delta += l.n_tasks * 2 * (l.spec.c_out * k) * (r * k) * (l.spec.c_in * k)
    head_flops = 2 * model.arch.feature_dim * max(model.arch.task_classes)
    if model.projection is not None:
        head_flops += 2 * model.projection.size
    return {
        "shared_params": shared + plain,
        "expert_params": experts,
        "head_params": heads,
        "train_params": shared + plain + experts + heads,
        "train_flops_per_sample": conv + head_flops + delta // max(batch_size, 1),
    }


# -- checkpoints ------------------------------------------------------------------

def _write_ckpt(path, kind: str, fused, header_extra: dict, arch: ArchConfig, sections) -> None:
    meta = json.loads(arch.to_json())
    meta.update(header_extra)
    header = f"KIND:{kind}\nFUSED:{'none' if fused is None else fused}\nARCH:{json.dumps(meta, sort_keys=True, separators=(',', ':'))}\n"
    hb = header.encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hb)) + hb)
    buf.write(struct.pack("<I", len(sections)))
    for name, arr in sections:
        write_named(buf, name, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        r = Reader(f.read())
    magic = r.take(4, "checkpoint magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version, hlen = r.unpack("HI", "checkpoint header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    text = r.take(hlen, "checkpoint header").decode()
    header = {}
    for line in text.splitlines():
        key, _, value = line.partition(":")
        header[key] = value
    for key in ("KIND", "FUSED", "ARCH"):
        if key not in header:
            raise FormatError(f"checkpoint header missing {key}")
    header["ARCH"] = json.loads(header["ARCH"])
    header["FUSED"] = None if header["FUSED"] == "none" else int(header["FUSED"])
    n = r.unpack("I", "section count")
    sections = dict(read_named(r) for _ in range(n))
    if not r.at_end():
        raise FormatError(f"trailing bytes at offset {r.offset}")
    return header, sections


def _arch_of(meta: dict) -> ArchConfig:
    fields = {k: v for k, v in meta.items() if k in ArchConfig.__dataclass_fields__}
    return ArchConfig.from_dict(fields)


def save_teacher(path, t: TeacherModel) -> None:
    sections = [(f"layer{i}.weight", c.weight.data) for i, c in enumerate(t.convs)]
    sections += [("head.weight", t.head_weight.data), ("head.bias", t.head_bias.data)]
    _write_ckpt(path, "teacher", None, {}, t.arch, sections)


def save_student(path, m: DecompModel) -> None:
    sections = []
    for i, layer in enumerate(m.layers):
        if isinstance(layer, EksConvLayer):
            sections.append((f"layer{i}.w0", layer.shared_weight()))
            for t, e in enumerate(layer.experts):
                sections.append((f"layer{i}.expert{t}.B", e.b_factor.data))
                sections.append((f"layer{i}.expert{t}.A", e.a_factor.data))
        else:
            sections.append((f"layer{i}.weight", layer.weight.data))
    if m.projection is not None:
        sections.append(("proj.weight", m.projection.data))
    for t, h in enumerate(m.heads):
        sections += [(f"head{t}.weight", h.weight.data), (f"head{t}.bias", h.bias.data)]
    fused = {l.fused_task for l in m.eks_layers}
    if len(fused) != 1:
        raise ValueError(f"EKS layers disagree on fused task: {sorted(map(str, fused))}")
    _write_ckpt(path, "student", fused.pop(), {"rank": m.rank}, m.arch, sections)


def save_expert(path, m: ExpertModel) -> None:
    sections = [(f"layer{i}.weight", c.weight.data) for i, c in enumerate(m.convs)]
    sections += [("head.weight", m.head.weight.data), ("head.bias", m.head.bias.data)]
    _write_ckpt(path, "expert", m.task, {}, m.arch, sections)


def load_checkpoint(path):
    """Load any checkpoint kind; fused student checkpoints come back fused."""
    header, s = read_checkpoint(path)
    kind, arch = header["KIND"], _arch_of(header["ARCH"])
    specs = arch.specs(arch.teacher_width if kind == "teacher" else 1)
    try:
        if kind == "teacher":
            convs = [PlainConv(Tensor(s[f"layer{i}.weight"], requires_grad=True), sp) for i, sp in enumerate(specs)]
            return TeacherModel(arch, convs, Tensor(s["head.weight"], requires_grad=True),
                                Tensor(s["head.bias"], requires_grad=True))
        if kind == "expert":
            convs = [PlainConv(Tensor(s[f"layer{i}.weight"]), sp) for i, sp in enumerate(specs)]
            head = TaskHead(Tensor(s["head.weight"]), Tensor(s["head.bias"]), header["FUSED"])
            return ExpertModel(arch, header["FUSED"], convs, head)
        if kind != "student":
            raise FormatError(f"unknown checkpoint kind {kind!r}")
        rank = int(header["ARCH"]["rank"])
        layers = []
        for i, (stage, sp) in enumerate(zip(arch.stages, specs)):
            if stage.eks:
                experts = []
                for t in range(arch.n_tasks):
                    b = Tensor(s[f"layer{i}.expert{t}.B"], requires_grad=True)
                    a = Tensor(s[f"layer{i}.expert{t}.A"], requires_grad=True)
                    experts.append(LowRankExpert(b, a, b.shape[1] // sp.k))
                layers.append(EksConvLayer(Tensor(s[f"layer{i}.w0"], requires_grad=True), experts, sp))
            else:
                layers.append(PlainConv(Tensor(s[f"layer{i}.weight"], requires_grad=True), sp))
        heads = [TaskHead(Tensor(s[f"head{t}.weight"], requires_grad=True),
                          Tensor(s[f"head{t}.bias"], requires_grad=True), t) for t in range(arch.n_tasks)]
        proj = Tensor(s["proj.weight"], requires_grad=True) if arch.project else None
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing section {exc.args[0]}") from None
    model = DecompModel(arch, layers, heads, proj, rank)
    if header["FUSED"] is not None:
        for layer in model.eks_layers:
            layer.fuse(header["FUSED"])
    return model
