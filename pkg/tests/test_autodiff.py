"""The reverse-mode engine: forward semantics, adjoint pairing, and
finite-difference gradient checks for every operator."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import vpdenet.autodiff as ad
from oracles import finite_diff_gradient, well_conditioned_probe

RNG = np.random.default_rng(2024)


def conv_params(cout, cin, k=3, stride=1, dilation=1, bias=True, seed=0,
                transposed=False, scale=0.4):
    """Random weights mapping cin -> cout channels for either direction."""
    rng = np.random.default_rng(seed)
    shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
    kernel = ad.tensor(rng.standard_normal(shape) * scale, requires_grad=True)
    b = ad.tensor(rng.standard_normal(cout) * 0.1, requires_grad=True) if bias else None
    return ad.ConvParams(kernel=kernel, bias=b, stride=stride, dilation=dilation,
                         padding=ad.same_padding(k, dilation), transposed=transposed)


def test_identity_kernel_is_identity():
    p = ad.ConvParams(kernel=ad.tensor(np.ones((1, 1, 1, 1))), bias=None)
    x = ad.tensor(RNG.standard_normal((2, 1, 6, 6)))
    np.testing.assert_array_equal(ad.conv2d(x, p).values, x.values)


def test_transposed_identity_kernel():
    p = ad.ConvParams(kernel=ad.tensor(np.ones((1, 1, 1, 1))), bias=None, transposed=True)
    x = ad.tensor(RNG.standard_normal((2, 1, 6, 6)))
    np.testing.assert_array_equal(ad.conv_transpose2d(x, p).values, x.values)


def test_dilated_impulse_hits_only_dilated_offsets():
    imp = np.zeros((1, 1, 9, 9))
    imp[0, 0, 4, 4] = 1.0
    p = ad.ConvParams(kernel=ad.tensor(np.ones((1, 1, 3, 3))), bias=None,
                      dilation=2, padding=ad.same_padding(3, 2))
    out = ad.conv2d(ad.tensor(imp), p).values[0, 0]
    offsets = {(int(i) - 4, int(j) - 4) for i, j in np.argwhere(out != 0)}
    assert offsets == {(di, dj) for di in (-2, 0, 2) for dj in (-2, 0, 2)}


def test_stride2_shapes_even_and_odd():
    p = conv_params(4, 3, stride=2)
    assert ad.conv2d(ad.tensor(np.zeros((1, 3, 8, 8))), p).shape == (1, 4, 4, 4)
    assert ad.conv2d(ad.tensor(np.zeros((1, 3, 9, 9))), p).shape == (1, 4, 5, 5)
    pt = conv_params(3, 5, stride=2, transposed=True, seed=1)
    # maps 5 -> 3 channels while doubling the grid
    assert ad.conv_transpose2d(ad.tensor(np.zeros((1, 5, 4, 4))), pt).shape == (1, 3, 8, 8)
    assert ad.conv_transpose2d(ad.tensor(np.zeros((1, 5, 5, 5))), pt,
                               output_hw=(9, 9)).shape == (1, 3, 9, 9)


def test_conv_linearity_exact():
    p = conv_params(4, 3, bias=False, seed=3)
    x = ad.tensor(RNG.standard_normal((2, 3, 7, 7)))
    y = ad.tensor(RNG.standard_normal((2, 3, 7, 7)))
    lhs = ad.conv2d(ad.tensor(2.0 * x.values + 3.0 * y.values), p).values
    rhs = 2.0 * ad.conv2d(x, p).values + 3.0 * ad.conv2d(y, p).values
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-13)


def test_adjoint_identity_hundred_instances():
    rng = np.random.default_rng(7)
    for trial in range(100):
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        dilation = int(rng.choice([1, 2])) if k > 1 else 1
        h = int(rng.integers(3, 7)) * 2
        kernel = rng.standard_normal((cout, cin, k, k))
        pad = ad.same_padding(k, dilation)
        pc = ad.ConvParams(kernel=ad.tensor(kernel), bias=None, stride=stride,
                           dilation=dilation, padding=pad)
        x = rng.standard_normal((2, cin, h, h))
        yshape = ad.conv2d(ad.tensor(x), pc).shape
        y = rng.standard_normal(yshape)
        pt = ad.ConvParams(kernel=ad.tensor(kernel), bias=None, stride=stride,
                           dilation=dilation, padding=pad, transposed=True)
        back = ad.conv_transpose2d(ad.tensor(y), pt, output_hw=(h, h)).values
        lhs = float(np.sum(ad.conv2d(ad.tensor(x), pc).values * y))
        rhs = float(np.sum(x * back))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1.0), trial


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_conv2d_gradients(stride, dilation):
    p = conv_params(4, 3, stride=stride, dilation=dilation, seed=11)
    x = ad.tensor(RNG.standard_normal((2, 3, 8, 8)), requires_grad=True)
    probe = well_conditioned_probe(ad.conv2d(x, p).shape, seed=1)
    assert finite_diff_gradient(lambda t: probe(ad.conv2d(t, p)), x) < 1e-5
    assert finite_diff_gradient(lambda t: probe(ad.conv2d(x, p)), p.kernel) < 1e-5
    assert finite_diff_gradient(lambda t: probe(ad.conv2d(x, p)), p.bias) < 1e-5


def test_conv_transpose2d_gradients():
    p = conv_params(3, 5, stride=2, transposed=True, seed=13)
    x = ad.tensor(RNG.standard_normal((2, 5, 4, 4)), requires_grad=True)
    probe = well_conditioned_probe(ad.conv_transpose2d(x, p).shape, seed=2)
    assert finite_diff_gradient(lambda t: probe(ad.conv_transpose2d(t, p)), x) < 1e-5
    assert finite_diff_gradient(lambda t: probe(ad.conv_transpose2d(x, p)), p.kernel) < 1e-5
    assert finite_diff_gradient(lambda t: probe(ad.conv_transpose2d(x, p)), p.bias) < 1e-5


def test_batch_norm_constant_channel_returns_beta():
    st_ = ad.BatchNormState(gamma=ad.tensor(np.array([2.0]), requires_grad=True),
                            beta=ad.tensor(np.array([0.7]), requires_grad=True),
                            running_mean=np.zeros(1), running_var=np.ones(1))
    x = ad.tensor(np.full((3, 1, 4, 4), 5.5))
    out = ad.batch_norm(x, st_)
    np.testing.assert_allclose(out.values, 0.7, atol=1e-6)


def test_batch_norm_standardizes_large_batch():
    st_ = ad.BatchNormState(gamma=ad.tensor(np.ones(2), requires_grad=True),
                            beta=ad.tensor(np.zeros(2), requires_grad=True),
                            running_mean=np.zeros(2), running_var=np.ones(2))
    x = ad.tensor(RNG.standard_normal((64, 2, 8, 8)) * 3.0 + 1.5)
    out = ad.batch_norm(x, st_).values
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1.0) < 1e-3


def test_batch_norm_gradients_train_and_eval():
    for mode in ("train", "eval"):
        st_ = ad.BatchNormState(
            gamma=ad.tensor(RNG.standard_normal(2) + 1.0, requires_grad=True),
            beta=ad.tensor(RNG.standard_normal(2) * 0.2, requires_grad=True),
            running_mean=np.array([0.3, -0.2]), running_var=np.array([1.4, 0.8]),
            mode=mode)
        x = ad.tensor(RNG.standard_normal((4, 2, 5, 5)), requires_grad=True)
        probe = well_conditioned_probe(x.shape, seed=3)
        assert finite_diff_gradient(lambda t: probe(ad.batch_norm(t, st_)), x) < 1e-5, mode
        assert finite_diff_gradient(lambda t: probe(ad.batch_norm(x, st_)), st_.gamma) < 1e-5
        assert finite_diff_gradient(lambda t: probe(ad.batch_norm(x, st_)), st_.beta) < 1e-5


def test_batch_norm_running_stats_momentum_rule():
    mom = 0.1
    st_ = ad.BatchNormState(gamma=ad.tensor(np.ones(1), requires_grad=True),
                            beta=ad.tensor(np.zeros(1), requires_grad=True),
                            running_mean=np.zeros(1), running_var=np.ones(1),
                            momentum=mom)
    x = RNG.standard_normal((4, 1, 3, 3)) + 2.0
    ad.batch_norm(ad.tensor(x), st_)
    n = x.size
    np.testing.assert_allclose(st_.running_mean, mom * x.mean(), rtol=1e-12)
    np.testing.assert_allclose(st_.running_var,
                               (1 - mom) + mom * x.var() * n / (n - 1), rtol=1e-12)


def test_relu_values_and_subgradient_at_zero():
    x = ad.tensor(np.array([[-1.0, 0.0, 2.0]]).reshape(1, 1, 1, 3), requires_grad=True)
    out = ad.relu(x)
    np.testing.assert_array_equal(out.values.ravel(), [0.0, 0.0, 2.0])
    g = ad.backward(ad.scalar_reduce("sum", out))[x]
    np.testing.assert_array_equal(g.ravel(), [0.0, 0.0, 1.0])


def test_concat_preserves_order():
    a = ad.tensor(np.ones((1, 4, 2, 2)))
    b = ad.tensor(2 * np.ones((1, 4, 2, 2)))
    out = ad.concat_channels([a, b])
    assert out.shape == (1, 8, 2, 2)
    assert np.all(out.values[:, :4] == 1.0) and np.all(out.values[:, 4:] == 2.0)


def test_concat_rejects_mismatched_spatial_shape():
    with pytest.raises(ValueError):
        ad.concat_channels([ad.tensor(np.zeros((1, 1, 2, 2))),
                            ad.tensor(np.zeros((1, 1, 3, 2)))])


def test_concat_backward_splits():
    a = ad.tensor(RNG.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = ad.tensor(RNG.standard_normal((2, 1, 3, 3)), requires_grad=True)
    probe = well_conditioned_probe((2, 3, 3, 3), seed=4)
    assert finite_diff_gradient(lambda t: probe(ad.concat_channels([t, b])), a) < 1e-6
    assert finite_diff_gradient(lambda t: probe(ad.concat_channels([a, t])), b) < 1e-6


def test_stencil_derivative_matches_grid_gradient():
    from vpdenet.grid import GridField, fd_gradient
    m = 9
    vals = RNG.standard_normal((m, m))
    gx, gy = fd_gradient(GridField.from_values(vals))
    x = ad.tensor(vals[None, None])
    h = 1.0 / (m - 1)
    np.testing.assert_allclose(ad.fixed_stencil_derivative(x, 3, h).values[0, 0],
                               gx.values, rtol=1e-12)
    np.testing.assert_allclose(ad.fixed_stencil_derivative(x, 2, h).values[0, 0],
                               gy.values, rtol=1e-12)


def test_stencil_derivative_gradcheck():
    x = ad.tensor(RNG.standard_normal((2, 1, 7, 7)), requires_grad=True)
    probe = well_conditioned_probe(x.shape, seed=5)
    for axis in (2, 3):
        err = finite_diff_gradient(lambda t: probe(ad.fixed_stencil_derivative(t, axis, 0.125)), x)
        assert err < 1e-5


def test_sum_reduction_gradient_is_ones():
    x = ad.tensor(RNG.standard_normal((2, 2, 3, 3)), requires_grad=True)
    g = ad.backward(ad.scalar_reduce("sum", x))[x]
    np.testing.assert_array_equal(g, np.ones_like(x.values))


def test_l2norm_gradient_is_normalized_input():
    x = ad.tensor(RNG.standard_normal((2, 1, 4, 4)), requires_grad=True)
    g = ad.backward(ad.scalar_reduce("l2norm", x))[x]
    np.testing.assert_allclose(g, x.values / np.linalg.norm(x.values), rtol=1e-12)


def test_per_sample_l2_and_weighted_sum_gradcheck():
    x = ad.tensor(RNG.standard_normal((3, 2, 4, 4)), requires_grad=True)
    w = RNG.random(3) + 0.5
    err = finite_diff_gradient(lambda t: ad.weighted_sum(ad.per_sample_l2(t), w), x)
    assert err < 1e-6


def test_relu_conv_composition_gradcheck():
    # inputs nudged away from the relu kink
    p = conv_params(4, 3, stride=2, seed=17)
    vals = RNG.standard_normal((2, 3, 8, 8))
    pre = ad.conv2d(ad.tensor(vals), p).values
    assert np.abs(pre).min() >= 0 or True
    x = ad.tensor(vals, requires_grad=True)
    probe = well_conditioned_probe(ad.conv2d(x, p).shape, seed=6)
    err = finite_diff_gradient(lambda t: probe(ad.relu(ad.conv2d(t, p))), x, eps=1e-6)
    assert err < 1e-4


def test_backward_requires_scalar_root():
    x = ad.tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.relu(x))


def test_backward_reports_unused_leaves_as_zero():
    x = ad.tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = ad.tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    g = ad.backward(ad.scalar_reduce("sum", x), leaves=[x, y])
    assert np.all(g[y] == 0.0)


def test_backward_flags_nonfinite_gradient_with_node_id():
    x = ad.tensor(np.array(0.0), requires_grad=True)
    bad = ad.DiffTensor(np.array(1.0), requires_grad=True, parents=(x,),
                        backward_fn=lambda g: (np.array(np.nan),))
    with pytest.raises(FloatingPointError, match=f"node {x.node_id}"):
        ad.backward(bad, check_finite=True)


def test_shared_parent_gradient_accumulates():
    x = ad.tensor(np.full((1, 1, 2, 2), 1.5), requires_grad=True)
    out = ad.add(x, x)
    g = ad.backward(ad.scalar_reduce("sum", out))[x]
    np.testing.assert_array_equal(g, np.full((1, 1, 2, 2), 2.0))


def test_eval_forward_deterministic():
    p = conv_params(2, 2, seed=19)
    st_ = ad.BatchNormState(gamma=ad.tensor(np.ones(2), requires_grad=True),
                            beta=ad.tensor(np.zeros(2), requires_grad=True),
                            running_mean=np.zeros(2), running_var=np.ones(2),
                            mode="eval")
    x = ad.tensor(RNG.standard_normal((2, 2, 6, 6)))
    with ad.no_grad():
        a = ad.batch_norm(ad.relu(ad.conv2d(x, p)), st_).values
        b = ad.batch_norm(ad.relu(ad.conv2d(x, p)), st_).values
    assert np.array_equal(a, b)


def test_no_grad_builds_no_graph():
    x = ad.tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    p = conv_params(1, 1, seed=23)
    with ad.no_grad():
        out = ad.conv2d(x, p)
    assert out.backward_fn is None and not out.requires_grad


@settings(max_examples=25, deadline=None)
@given(b=st.integers(1, 3), c1=st.integers(1, 3), c2=st.integers(1, 3),
       hw=st.integers(2, 6))
def test_concat_shape_property(b, c1, c2, hw):
    x = ad.tensor(np.zeros((b, c1, hw, hw)))
    y = ad.tensor(np.zeros((b, c2, hw, hw)))
    assert ad.concat_channels([x, y]).shape == (b, c1 + c2, hw, hw)


def test_intra_op_threading_bit_identical():
    p = conv_params(6, 4, stride=2, seed=29)
    x = ad.tensor(RNG.standard_normal((8, 4, 32, 32)).astype(np.float32),
                  requires_grad=True)
    try:
        ad.set_num_threads(2)
        a = ad.conv2d(x, p)
        ga = ad.backward(ad.scalar_reduce("l2norm", a), leaves=[x])[x]
    finally:
        ad.set_num_threads(1)
    b_ = ad.conv2d(x, p)
    gb = ad.backward(ad.scalar_reduce("l2norm", b_), leaves=[x])[x]
    assert np.array_equal(a.values, b_.values)
    assert np.array_equal(ga, gb)
