from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eksdecomp import tensor as tn
from eksdecomp.conv import ConvSpec, call_counts, col2im, conv2d, conv_flops, grouped_conv2d, im2col
from eksdecomp.tensor import ShapeError, Tensor, gradcheck

from oracles import conv2d_loops, grouped_conv_loops


def test_ones_kernel_sums_window():
    out = conv2d(tn.ones((1, 1, 3, 3)), tn.ones((1, 1, 3, 3)), ConvSpec(1, 1, 3))
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 4, 5))
    out = conv2d(Tensor(x), tn.ones((1, 1, 1, 1)), ConvSpec(1, 1, 1))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_loops(rng, stride, padding):
    x, w = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3))
    got = conv2d(Tensor(x), Tensor(w), ConvSpec(3, 4, 3, stride, padding)).data
    want = conv2d_loops(x, w, stride, padding)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-12


def test_spec_validation():
    with pytest.raises(ValueError):
        ConvSpec(3, 4, 3, groups=2)
    with pytest.raises(ValueError):
        ConvSpec(2, 2, 3, stride=3)
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 5).out_size(3, 3)
    with pytest.raises(ValueError):
        conv2d(tn.zeros((1, 4, 3, 3)), tn.zeros((4, 2, 1, 1)), ConvSpec(4, 4, 1, groups=2))


def test_shape_mismatch_errors():
    with pytest.raises(ShapeError):
        conv2d(tn.zeros((1, 2, 4, 4)), tn.zeros((1, 3, 3, 3)), ConvSpec(3, 1, 3))
    with pytest.raises(ShapeError):
        conv2d(tn.zeros((1, 3, 4, 4)), tn.zeros((2, 3, 1, 1)), ConvSpec(3, 1, 3))


def test_grouped_degenerates_to_dense(rng):
    x, w = Tensor(rng.normal(size=(2, 3, 6, 6))), Tensor(rng.normal(size=(5, 3, 3, 3)))
    spec = ConvSpec(3, 5, 3, 1, 1)
    np.testing.assert_array_equal(grouped_conv2d(x, w, spec).data, conv2d(x, w, spec).data)


def test_grouped_shared_weights_equals_per_sample(rng):
    b, c_in, c_out = 3, 2, 4
    x = rng.normal(size=(b, c_in, 5, 5))
    w = rng.normal(size=(c_out, c_in, 3, 3))
    packed = grouped_conv2d(Tensor(x.reshape(1, b * c_in, 5, 5)), Tensor(np.concatenate([w] * b)),
                            ConvSpec(b * c_in, b * c_out, 3, 1, 1, groups=b)).data
    per_sample = np.concatenate([conv2d_loops(x[i:i + 1], w, 1, 1) for i in range(b)], axis=1)
    assert np.abs(packed - per_sample).max() < 1e-10


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0)])
def test_grouped_matches_loop_oracle(rng, stride, padding):
    groups, c_in, c_out = 3, 2, 3
    x = rng.normal(size=(1, groups * c_in, 6, 6))
    w = rng.normal(size=(groups * c_out, c_in, 3, 3))
    got = grouped_conv2d(Tensor(x), Tensor(w), ConvSpec(groups * c_in, groups * c_out, 3, stride, padding, groups)).data
    want = grouped_conv_loops(x, w, groups, stride, padding)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-12


def test_indivisible_groups_rejected():
    with pytest.raises(ValueError):
        ConvSpec(6, 4, 3, groups=4)


def test_im2col_col2im_adjoint(rng):
    # <im2col(x), c> == <x, col2im(c)>
    x = rng.normal(size=(2, 3, 7, 6))
    cols = im2col(x, 3, 2, 1)
    c = rng.normal(size=cols.shape)
    lhs = (cols * c).sum()
    rhs = (x * col2im(c, x.shape, 3, 2, 1)).sum()
    assert abs(lhs - rhs) < 1e-10 * abs(lhs)


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=20, deadline=None)
@given(seed=seeds, stride=st.sampled_from([1, 2]), padding=st.sampled_from([0, 1]), k=st.sampled_from([1, 3]))
def test_conv_fd(seed, stride, padding, k):
    r = np.random.default_rng(seed)
    x = Tensor(r.uniform(-1, 1, size=(2, 2, 5, 5)), requires_grad=True)
    w = Tensor(r.uniform(-1, 1, size=(3, 2, k, k)), requires_grad=True)
    spec = ConvSpec(2, 3, k, stride, padding)
    proj = Tensor(r.uniform(-1, 1, size=conv2d(x, w, spec).shape))
    assert gradcheck(lambda: (conv2d(x, w, spec) * proj).sum(), [x, w]) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=seeds, groups=st.integers(1, 3))
def test_grouped_conv_fd(seed, groups):
    r = np.random.default_rng(seed)
    x = Tensor(r.uniform(-1, 1, size=(1, 2 * groups, 4, 4)), requires_grad=True)
    w = Tensor(r.uniform(-1, 1, size=(3 * groups, 2, 3, 3)), requires_grad=True)
    spec = ConvSpec(2 * groups, 3 * groups, 3, 1, 1, groups)
    proj = Tensor(r.uniform(-1, 1, size=(1, 3 * groups, 4, 4)))
    assert gradcheck(lambda: (grouped_conv2d(x, w, spec) * proj).sum(), [x, w]) < 1e-6


@pytest.mark.parametrize("padding", [0, 1])
def test_translation_consistency(rng, padding):
    stride = 2
    x = rng.normal(size=(1, 2, 12, 12))
    w = rng.normal(size=(3, 2, 3, 3))
    spec = ConvSpec(2, 3, 3, stride, padding)
    shifted = np.zeros_like(x)
    shifted[:, :, stride:, stride:] = x[:, :, :-stride, :-stride]
    a = conv2d(Tensor(x), Tensor(w), spec).data
    b = conv2d(Tensor(shifted), Tensor(w), spec).data
    # interior outputs whose receptive fields avoid the zero border move by one pixel
    lo = 1 + padding
    np.testing.assert_allclose(b[:, :, lo + 1:-1, lo + 1:-1], a[:, :, lo:-2, lo:-2], rtol=1e-12, atol=1e-12)


def test_call_counter():
    call_counts.clear()
    conv2d(tn.zeros((1, 1, 3, 3)), tn.zeros((1, 1, 1, 1)), ConvSpec(1, 1, 1))
    grouped_conv2d(tn.zeros((1, 2, 3, 3)), tn.zeros((2, 1, 1, 1)), ConvSpec(2, 2, 1, groups=2))
    assert call_counts == Counter({"conv2d": 1, "grouped_conv2d": 1})


# -- FLOP accounting --------------------------------------------------------------------

def test_flops_single_mac():
    assert conv_flops(ConvSpec(1, 1, 1), 1, 1) == 2


def test_flops_linear_in_c_out():
    assert conv_flops(ConvSpec(3, 8, 3, 2, 1), 9, 9) == 2 * conv_flops(ConvSpec(3, 4, 3, 2, 1), 9, 9)


def test_flops_grouped():
    assert conv_flops(ConvSpec(4, 6, 3, 1, 1, groups=2), 5, 5) == 2 * 2 * 9 * 6 * 25


def test_small_cnn_flops_match_instrumented_count(rng):
    specs = [ConvSpec(1, 4, 3, 2, 1), ConvSpec(4, 6, 3, 2, 1), ConvSpec(6, 8, 1, 1, 0)]
    counter = Counter()
    h = rng.normal(size=(1, 1, 9, 9))
    size = 9
    predicted = 0
    for s in specs:
        predicted += conv_flops(s, size, size)
        h = conv2d_loops(h, rng.normal(size=s.weight_shape), s.stride, s.padding, counter)
        size = h.shape[-1]
    assert predicted == 2 * counter["macs"]
