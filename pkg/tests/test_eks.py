import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eksdecomp import tensor as tn
from eksdecomp.conv import ConvSpec, call_counts, conv2d
from eksdecomp.eks import (EksConvLayer, FusionError, LowRankExpert, TaskMask, eks_backward_check, eks_cost_model,
                           eks_forward, eks_forward_naive, eks_param_count, expert_delta)
from eksdecomp.tensor import Tensor, gradcheck

from oracles import conv2d_loops, counted_matmul


def random_layer(rng, c_in, c_out, k, n_tasks, rank, stride=1, padding=None):
    spec = ConvSpec(c_in, c_out, k, stride, k // 2 if padding is None else padding)
    layer = EksConvLayer.init(spec, n_tasks, rank, rng)
    # non-zero B so every expert actually contributes
    for e in layer.experts:
        e.b_factor.data = rng.uniform(-1, 1, size=e.b_factor.shape)
    return layer


def test_zero_b_gives_zero_delta(rng):
    e = LowRankExpert.init(3, 4, 3, 2, rng)
    assert np.all(expert_delta(e).data == 0.0)
    assert expert_delta(e).shape == (4, 3, 3, 3)


def test_delta_matches_matmul_reshape(rng):
    c_in, c_out, k = 3, 5, 3
    r = min(c_in, c_out)
    b, a = rng.normal(size=(c_out * k, r * k)), rng.normal(size=(r * k, c_in * k))
    e = LowRankExpert(Tensor(b), Tensor(a), r)
    want = np.array(counted_matmul(b, a, {"mul": 0})).reshape(c_out, c_in, k, k)
    np.testing.assert_allclose(expert_delta(e).data, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_delta_rank_bound(rng, r):
    k = 3
    e = LowRankExpert(Tensor(rng.normal(size=(6 * k, r * k))), Tensor(rng.normal(size=(r * k, 5 * k))), r)
    mat = expert_delta(e).data.reshape(6 * k, 5 * k)
    assert np.linalg.matrix_rank(mat) <= r * k


def test_expert_validation(rng):
    with pytest.raises(ValueError):
        LowRankExpert.init(2, 4, 3, 3, rng)  # rank above min(C_in, C_out)
    with pytest.raises(ValueError):
        LowRankExpert(tn.zeros((6, 4)), tn.zeros((6, 6)), 2)


def test_mask_validation():
    with pytest.raises(ValueError, match=r"\[1\]"):
        TaskMask(np.array([[1.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        TaskMask(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        TaskMask.from_tasks([0, 3], 3)
    np.testing.assert_array_equal(TaskMask.from_tasks([2, 0], 3).tasks(), [2, 0])


def test_zero_experts_equal_shared_conv(rng):
    layer = EksConvLayer.init(ConvSpec(2, 3, 3, 1, 1), 3, 2, rng)
    h = Tensor(rng.normal(size=(4, 2, 5, 5)))
    shared = conv2d(h, layer.w0, layer.spec).data
    for tasks in ([0, 0, 0, 0], [0, 1, 2, 1], [2, 2, 1, 0]):
        out = eks_forward(layer, h, TaskMask.from_tasks(tasks, 3)).data
        np.testing.assert_array_equal(out, shared)


def test_single_task_equals_merged_conv(rng):
    layer = random_layer(rng, 3, 4, 3, 1, 2)
    h = Tensor(rng.normal(size=(3, 3, 6, 6)))
    w = layer.w0.data + expert_delta(layer.experts[0]).data
    out = eks_forward(layer, h, TaskMask.from_tasks([0, 0, 0], 1)).data
    np.testing.assert_allclose(out, conv2d_loops(h.data, w, 1, 1), atol=1e-10)


def test_mixed_batch_matches_naive(rng):
    layer = random_layer(rng, 3, 4, 3, 3, 2)
    h = Tensor(rng.normal(size=(4, 3, 5, 5)))
    mask = TaskMask.from_tasks([2, 0, 2, 1], 3)
    diff = np.abs(eks_forward(layer, h, mask).data - eks_forward_naive(layer, h, mask).data).max()
    assert diff < 1e-10


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_tasks=st.integers(1, 8), batch=st.integers(1, 16), c_in=st.integers(1, 16),
       c_out=st.integers(1, 16), k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]), data=st.data())
def test_forward_oracle_property(seed, n_tasks, batch, c_in, c_out, k, stride, data):
    rank = data.draw(st.integers(1, min(c_in, c_out)))
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, c_in, c_out, k, n_tasks, rank, stride)
    h = Tensor(rng.normal(size=(batch, c_in, 5, 5)))
    mask = TaskMask.from_tasks(rng.integers(0, n_tasks, size=batch), n_tasks)
    diff = np.abs(eks_forward(layer, h, mask).data - eks_forward_naive(layer, h, mask).data).max()
    assert diff < 1e-10


def test_fused_forward_rejected(rng):
    layer = random_layer(rng, 2, 2, 1, 2, 1)
    layer.fuse(0)
    with pytest.raises(FusionError, match="unfuse"):
        eks_forward(layer, tn.zeros((1, 2, 3, 3)), TaskMask.from_tasks([0], 2))


def test_one_grouped_call_per_forward(rng):
    for n_tasks in (1, 2, 8):
        layer = random_layer(rng, 2, 3, 3, n_tasks, 1)
        mask = TaskMask.from_tasks(np.arange(8) % n_tasks, n_tasks)
        call_counts.clear()
        eks_forward(layer, Tensor(rng.normal(size=(8, 2, 4, 4))), mask)
        assert call_counts["grouped_conv2d"] == 1 and call_counts["conv2d"] == 0


# -- gradient separation ----------------------------------------------------------------

def weighted_sum(proj):
    return lambda out, rows: (out * Tensor(proj[rows])).sum()


def test_single_task_batch_zero_grads(rng):
    layer = random_layer(rng, 2, 3, 3, 4, 2)
    h = Tensor(rng.normal(size=(5, 2, 4, 4)))
    proj = rng.normal(size=(5, 3, 4, 4))
    rep = eks_backward_check(layer, h, TaskMask.from_tasks([0] * 5, 4), weighted_sum(proj))
    assert rep.absent_tasks == [1, 2, 3]
    assert rep.ok


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_tasks=st.integers(1, 6), batch=st.integers(1, 10))
def test_gradient_separation_property(seed, n_tasks, batch):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 3, 2, 3, n_tasks, 2)
    h = Tensor(rng.normal(size=(batch, 3, 4, 4)))
    proj = rng.normal(size=(batch, 2, 4, 4))
    rep = eks_backward_check(layer, h, TaskMask.from_tasks(rng.integers(0, n_tasks, size=batch), n_tasks),
                             weighted_sum(proj))
    assert rep.absent_exactly_zero
    assert rep.expert_rel_err < 1e-8 and rep.w0_rel_err < 1e-8


def test_duplicate_sample_doubles_expert_grad(rng):
    layer = random_layer(rng, 2, 2, 3, 2, 1)
    x = rng.normal(size=(1, 2, 4, 4))

    def grads(h, tasks):
        for p in layer.parameters():
            p.grad = None
        eks_forward(layer, Tensor(h), TaskMask.from_tasks(tasks, 2)).sum().backward()
        return [p.grad.copy() for p in layer.experts[1].parameters()]

    once = grads(x, [1])
    twice = grads(np.concatenate([x, x]), [1, 1])
    for a, b in zip(once, twice):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_eks_forward_fd(seed):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 2, 3, 3, 3, 2)
    for e in layer.experts:
        e.a_factor.data = rng.uniform(-1, 1, size=e.a_factor.shape)
    h = Tensor(rng.uniform(-1, 1, size=(3, 2, 4, 4)), requires_grad=True)
    proj = Tensor(rng.uniform(-1, 1, size=(3, 3, 4, 4)))
    mask = TaskMask.from_tasks([0, 2, 0], 3)
    params = [h, layer.w0] + layer.experts[0].parameters() + layer.experts[2].parameters()
    assert gradcheck(lambda: (eks_forward(layer, h, mask) * proj).sum(), params) < 1e-6


# -- fusion and switching ---------------------------------------------------------------

def test_fuse_unfuse_roundtrip(rng):
    layer = random_layer(rng, 4, 4, 3, 3, 2)
    w0 = layer.w0.data.copy()
    layer.fuse(1)
    layer.unfuse()
    assert np.abs(layer.w0.data - w0).max() < 1e-12
    assert layer.fused_task is None


def test_fused_conv_equals_eks_forward(rng):
    layer = random_layer(rng, 3, 4, 3, 3, 2)
    h = Tensor(rng.normal(size=(4, 3, 5, 5)))
    want = eks_forward(layer, h, TaskMask.from_tasks([2] * 4, 3)).data
    layer.fuse(2)
    np.testing.assert_allclose(conv2d(h, layer.w0, layer.spec).data, want, atol=1e-10)


def test_switch_roundtrip(rng):
    layer = random_layer(rng, 4, 4, 3, 3, 2)
    layer.fuse(0)
    single = layer.w0.data.copy()
    layer.switch(1)
    np.testing.assert_allclose(layer.w0.data, layer.shared_weight() + expert_delta(layer.experts[1]).data,
                               atol=1e-12)
    layer.switch(2)
    layer.switch(0)
    assert np.abs(layer.w0.data - single).max() < 1e-12


def test_fusion_errors(rng):
    layer = random_layer(rng, 2, 2, 1, 2, 1)
    with pytest.raises(FusionError):
        layer.unfuse()
    with pytest.raises(FusionError):
        layer.switch(1)
    with pytest.raises(IndexError):
        layer.fuse(2)
    layer.fuse(0)
    with pytest.raises(FusionError):
        layer.fuse(1)
    with pytest.raises(IndexError):
        layer.switch(-1)


def test_shared_weight_is_canonical(rng):
    layer = random_layer(rng, 2, 3, 3, 2, 1)
    w0 = layer.w0.data.copy()
    layer.fuse(1)
    layer.switch(0)
    assert layer.shared_weight().tobytes() == w0.tobytes()


# -- parameter and cost accounting -------------------------------------------------------

def test_param_count_example(rng):
    spec = ConvSpec(8, 8, 3)
    pc = eks_param_count(spec, 4, 2)
    assert pc.expert_total == 1152
    layer = EksConvLayer.init(spec, 4, 2, rng)
    assert sum(p.data.size for p in layer.expert_parameters()) == pc.expert_total
    assert pc.shared == layer.w0.data.size == pc.deployed


def test_param_count_zero_rank():
    # rank 0 is not constructible as an expert but the count formula degenerates cleanly
    assert eks_param_count(ConvSpec(4, 4, 3), 3, 0).expert_total == 0


def test_cost_model_examples():
    assert eks_cost_model(11, 8, 64, 49, 256).eks_cheaper
    for t, b, l in [(1, 1, 1), (8, 64, 49), (100, 1, 1)]:
        assert not eks_cost_model(t, 1, b, l, 4).eks_cheaper
    # T*r/(b*l) + 1 == r  ->  2*2/4 + 1 == 2
    boundary = eks_cost_model(2, 2, 4, 1, 3)
    assert boundary.eks_cheaper
    assert boundary.eks_cost == boundary.flora_cost


def test_cost_model_rejects_non_positive():
    with pytest.raises(ValueError):
        eks_cost_model(0, 1, 1, 1, 1)
