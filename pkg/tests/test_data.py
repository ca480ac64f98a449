import csv
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eksdecomp import data
from eksdecomp.data import FAMILIES, TRAIN, VAL, TaskSpec, from_bytes, generate, prototypes, standard_specs, to_bytes
from eksdecomp.eks import TaskMask
from eksdecomp.serialize import FormatError


def small_specs(sigma=0.1, n=50):
    return [TaskSpec(t, 4, FAMILIES[t % 3], sigma, n) for t in range(3)]


def test_counts_and_split():
    ds = generate(small_specs(), seed=3)
    assert len(ds) == 600
    assert (ds.split == TRAIN).sum() == 480 and (ds.split == VAL).sum() == 120
    for t in range(3):
        assert (ds.tasks == t).sum() == 200
        assert (ds.split[ds.tasks == t] == TRAIN).sum() == 160
    assert ds.images.shape == (600, 1, 16, 16)


def test_deterministic_bytes():
    assert to_bytes(generate(small_specs(), 7)) == to_bytes(generate(small_specs(), 7))
    assert to_bytes(generate(small_specs(), 7)) != to_bytes(generate(small_specs(), 8))


def test_sigma_zero_equals_prototypes():
    specs = small_specs(sigma=0.0, n=5)
    ds = generate(specs, 2)
    for t, spec in enumerate(specs):
        protos = prototypes(spec, 2)
        for i in np.flatnonzero(ds.tasks == t):
            np.testing.assert_array_equal(ds.images[i, 0], protos[ds.labels[i]])


def test_global_labels():
    ds = generate([TaskSpec(0, 3, sigma=0.0, samples_per_class=2), TaskSpec(1, 2, "gaussian-blobs", 0.0, 2)], 0)
    np.testing.assert_array_equal(ds.offsets, [0, 3])
    np.testing.assert_array_equal(ds.global_labels, ds.offsets[ds.tasks] + ds.labels)
    assert set(ds.global_labels.tolist()) == set(range(5))
    s = ds[0]
    assert s.global_label == ds.offsets[s.task] + s.within_label


@pytest.mark.parametrize("family", FAMILIES)
def test_prototypes_separated(family):
    for t in range(4):
        p = prototypes(TaskSpec(t, 4, family), seed=11).reshape(4, -1)
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
        assert d[~np.eye(4, dtype=bool)].min() > 0.4


def test_collision_rejected():
    # noise so large that 4*sigma exceeds any prototype distance
    with pytest.raises(ValueError, match="collide"):
        generate([TaskSpec(0, 4, sigma=100.0, samples_per_class=2)], 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(0, 1)
    with pytest.raises(ValueError):
        TaskSpec(0, 2, family="noise")
    with pytest.raises(ValueError):
        generate([TaskSpec(1, 2)], 0)


def test_standard_specs_families():
    assert [s.family for s in standard_specs(correlated=True)] == [FAMILIES[0]] * 4
    assert len({s.family for s in standard_specs()}) == 3


def test_roundtrip(tmp_path):
    ds = generate(small_specs(n=6), 5)
    path = tmp_path / "d.eksd"
    data.save(ds, path)
    assert data.load(path) == ds


def test_truncation_names_offset():
    blob = to_bytes(generate(small_specs(n=2), 5))
    for cut in (3, 40, len(blob) - 1):
        with pytest.raises(FormatError, match=r"byte \d+"):
            from_bytes(blob[:cut])


def test_bad_magic_and_version():
    blob = to_bytes(generate(small_specs(n=2), 5))
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="version"):
        from_bytes(blob[:4] + struct.pack("<H", 99) + blob[6:])


def test_empty_task_rejected():
    ds = generate(small_specs(n=2), 5)
    keep = ds.tasks != 1
    hollow = data.Dataset(ds.specs, ds.images[keep], ds.tasks[keep], ds.labels[keep], ds.split[keep])
    with pytest.raises(FormatError, match="task 1"):
        from_bytes(to_bytes(hollow))


def test_csv_export(tmp_path):
    ds = generate(small_specs(n=2), 1)
    path = tmp_path / "index.csv"
    data.export_index_csv(ds, path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == len(ds)
    assert int(rows[3]["global_label"]) == ds.global_labels[3]


def linear_probe_accuracy(x_tr, y_tr, x_va, y_va, n_classes, ridge=1e-2):
    """Ridge regression onto one-hot targets, argmax decision."""
    add_bias = lambda x: np.hstack([x, np.ones((len(x), 1))])
    a = add_bias(x_tr)
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ np.eye(n_classes)[y_tr])
    return float((add_bias(x_va) @ w).argmax(1).__eq__(y_va).mean())


@pytest.mark.parametrize("correlated", [False, True])
def test_linear_probe_separates_classes(correlated):
    ds = generate(standard_specs(correlated=correlated), 0)
    x = ds.images.reshape(len(ds), -1)
    for t in range(ds.n_tasks):
        tr = (ds.tasks == t) & (ds.split == TRAIN)
        va = (ds.tasks == t) & (ds.split == VAL)
        acc = linear_probe_accuracy(x[tr], ds.labels[tr], x[va], ds.labels[va], 4)
        assert acc > 0.9, (t, acc)


@settings(max_examples=30, deadline=None)
@given(tasks=st.lists(st.integers(0, 5), min_size=1, max_size=40))
def test_mask_from_batch_is_one_hot(tasks):
    m = TaskMask.from_tasks(tasks, 6).m
    assert np.all(m.sum(1) == 1) and set(np.unique(m)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m.argmax(1), tasks)
