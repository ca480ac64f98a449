"""Seeded synthetic multi-task image datasets and their binary file format.

Each task draws its classes from one generator family. Tasks that share a
family are correlated (same kind of structure, different task-specific
parameters); tasks from different families are diverse.

File layout (little-endian)::

    b"EKSD" | version u16 | header_len u32 | header json | count u64
    | count * (task u16, label u16, split u8, offset u64) | tensor blobs

``offset`` is relative to the start of the blob region.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .serialize import FormatError, Reader, read_tensor, tensor_to_bytes

FAMILIES = ("oriented-bars", "gaussian-blobs", "checker-frequency")
DATA_MAGIC = b"EKSD"
DATA_VERSION = 1
TRAIN, VAL = 0, 1
_INDEX = struct.Struct("<HHBQ")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    n_classes: int
    family: str = "oriented-bars"
    sigma: float = 0.1
    samples_per_class: int = 50

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"task {self.task_id}: need at least 2 classes")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}; pick one of {FAMILIES}")
        if self.sigma < 0 or self.samples_per_class < 1:
            raise ValueError(f"task {self.task_id}: invalid sigma or sample count")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    task: int
    within_label: int
    global_label: int


@dataclass
class Dataset:
    specs: list[TaskSpec]
    images: np.ndarray  # (N, C, H, W)
    tasks: np.ndarray
    labels: np.ndarray  # within-task
    split: np.ndarray

    @property
    def n_tasks(self) -> int:
        return len(self.specs)

    @property
    def task_classes(self) -> tuple[int, ...]:
        return tuple(s.n_classes for s in self.specs)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.task_classes)[:-1]]).astype(np.int64)

    @property
    def global_labels(self) -> np.ndarray:
        return self.offsets[self.tasks] + self.labels

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.tasks[i]), int(self.labels[i]), int(self.global_labels[i]))

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.specs == other.specs and np.array_equal(self.images, other.images)
                and np.array_equal(self.tasks, other.tasks) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.split, other.split))


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def prototypes(spec: TaskSpec, seed: int, size: int = 16) -> np.ndarray:
    """Noise-free class images (Y_t, size, size) in [-1, 1]."""
    rng = np.random.default_rng([seed, 7919, spec.task_id])
    u, v = _grid(size)
    y = spec.n_classes
    out = np.empty((y, size, size))
    if spec.family == "oriented-bars":
        base, phase = rng.uniform(0, np.pi / y), rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(1.5, 3.0)
        for c in range(y):
            th = base + np.pi * c / y
            out[c] = np.cos(2 * np.pi * freq * (u * np.cos(th) + v * np.sin(th)) + phase)
    elif spec.family == "gaussian-blobs":
        base, radius = rng.uniform(0, 2 * np.pi / y), rng.uniform(0.22, 0.32)
        width = rng.uniform(0.10, 0.14)
        for c in range(y):
            a = base + 2 * np.pi * c / y
            cu, cv = 0.5 + radius * np.cos(a), 0.5 + radius * np.sin(a)
            out[c] = 2 * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * width ** 2)) - 1
    else:
        f0, phase = rng.uniform(0.8, 1.4), rng.uniform(0, 2 * np.pi)
        for c in range(y):
            f = f0 + 0.9 * c
            out[c] = np.cos(2 * np.pi * f * u + phase) * np.cos(2 * np.pi * f * v + phase)
    return out


def _check_separation(spec: TaskSpec, protos: np.ndarray) -> None:
    flat = protos.reshape(len(protos), -1)
    d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
    d[np.diag_indices(len(flat))] = np.inf
    if d.min() <= 4 * spec.sigma:
        raise ValueError(
            f"task {spec.task_id}: class prototypes collide (min distance {d.min():.3f} <= 4*sigma={4 * spec.sigma:.3f})")


def generate(specs: list[TaskSpec], seed: int, size: int = 16) -> Dataset:
    """Deterministic dataset with an 80/20 train/val split inside every task."""
    if not specs:
        raise ValueError("need at least one task spec")
    if [s.task_id for s in specs] != list(range(len(specs))):
        raise ValueError("task ids must be 0..T-1 in order")
    rng = np.random.default_rng([seed, 104729])
    images, tasks, labels, split = [], [], [], []
    for spec in specs:
        protos = prototypes(spec, seed, size)
        _check_separation(spec, protos)
        n = spec.n_classes * spec.samples_per_class
        lab = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
        noise = rng.standard_normal((n, size, size)) * spec.sigma
        images.append((protos[lab] + noise)[:, None])
        tasks.append(np.full(n, spec.task_id))
        labels.append(lab)
        s = np.full(n, VAL)
        s[rng.permutation(n)[: (4 * n) // 5]] = TRAIN
        split.append(s)
    order = rng.permutation(sum(len(t) for t in tasks))
    return Dataset(
        list(specs),
        np.concatenate(images)[order],
        np.concatenate(tasks)[order].astype(np.int64),
        np.concatenate(labels)[order].astype(np.int64),
        np.concatenate(split)[order].astype(np.int64),
    )


def standard_specs(n_tasks: int = 4, n_classes: int = 4, sigma: float = 0.1, samples_per_class: int = 200,
                   correlated: bool = False) -> list[TaskSpec]:
    """Correlated tasks share one family; diverse tasks cycle through all families."""
    fams = [FAMILIES[0] if correlated else FAMILIES[t % len(FAMILIES)] for t in range(n_tasks)]
    return [TaskSpec(t, n_classes, fams[t], sigma, samples_per_class) for t in range(n_tasks)]


# -- file I/O -------------------------------------------------------------------------

def to_bytes(ds: Dataset) -> bytes:
    header = json.dumps({"specs": [asdict(s) for s in ds.specs], "image_shape": list(ds.images.shape[1:])},
                        sort_keys=True, separators=(",", ":")).encode()
    blobs, index, off = io.BytesIO(), io.BytesIO(), 0
    for i in range(len(ds)):
        blob = tensor_to_bytes(ds.images[i])
        index.write(_INDEX.pack(int(ds.tasks[i]), int(ds.labels[i]), int(ds.split[i]), off))
        blobs.write(blob)
        off += len(blob)
    head = DATA_MAGIC + struct.pack("<HI", DATA_VERSION, len(header)) + header + struct.pack("<Q", len(ds))
    return head + index.getvalue() + blobs.getvalue()


def from_bytes(buf: bytes) -> Dataset:
    r = Reader(buf)
    magic = r.take(4, "dataset magic")
    if magic != DATA_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r} at byte 0")
    version, hlen = r.unpack("HI", "dataset header")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    header = json.loads(r.take(hlen, "dataset header").decode())
    specs = [TaskSpec(**s) for s in header["specs"]]
    if not specs:
        raise FormatError("dataset declares no tasks")
    count = r.unpack("Q", "sample count")
    recs = [_INDEX.unpack(r.take(_INDEX.size, "index record")) for _ in range(count)]
    base = r.offset
    images = []
    for task, label, split, off in recs:
        if base + off != r.offset:
            raise FormatError(f"index offset {off} does not match blob position {r.offset - base}")
        images.append(read_tensor(r))
    if not r.at_end():
        raise FormatError(f"trailing bytes at byte {r.offset}")
    tasks = np.array([rec[0] for rec in recs], dtype=np.int64)
    for s in specs:
        if not np.any(tasks == s.task_id):
            raise FormatError(f"task {s.task_id} has no samples")
    labels = np.array([rec[1] for rec in recs], dtype=np.int64)
    if count and (tasks.max() >= len(specs)):
        raise FormatError("index references an undeclared task")
    shape = tuple(header["image_shape"])
    imgs = np.stack(images) if images else np.zeros((0,) + shape)
    return Dataset(specs, imgs, tasks, labels, np.array([rec[2] for rec in recs], dtype=np.int64))


def save(ds: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(ds))


def load(path) -> Dataset:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def export_index_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "task", "label", "global_label", "split"])
        for i in range(len(ds)):
            w.writerow([i, int(ds.tasks[i]), int(ds.labels[i]), int(ds.global_labels[i]),
                        "train" if ds.split[i] == TRAIN else "val"])
