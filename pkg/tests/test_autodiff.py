import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bmil import autodiff as ad
from bmil.autodiff import Node
from bmil.verify import finite_diff_check


def leaf(x):
    return Node(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_product_rule():
    x, y = leaf(3.0), leaf(4.0)
    ad.backward(ad.mul(x, y))
    assert x.grad == 4.0 and y.grad == 3.0


def test_tanh_at_zero_weights_passes_input_through():
    w = leaf(np.zeros((3, 4)))
    v = np.array([[0.5], [-1.0], [2.0], [0.25]])
    ad.backward(ad.sum(ad.tanh(ad.matmul(w, v))))
    np.testing.assert_allclose(w.grad, np.tile(v.T, (3, 1)))


def test_three_layer_composition_matches_finite_differences(rng):
    x = rng.uniform(-1, 1, (4, 3))
    w1, b1 = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5))
    w2, b2 = leaf(rng.normal(size=(5, 4))), leaf(rng.normal(size=4))
    w3 = leaf(rng.normal(size=(4, 2)))

    def build():
        h = ad.tanh(ad.linear(x, w1, b1))
        h = ad.sigmoid(ad.linear(h, w2, b2))
        return ad.mean(ad.square(ad.matmul(h, w3)))

    rep = finite_diff_check(build, [w1, b1, w2, b2, w3])
    assert rep.passed, rep


def test_elementary_values():
    assert ad.sigmoid(Node(0.0)).item() == 0.5
    assert ad.tanh(Node(0.0)).item() == 0.0


def test_conv1d_zero_kernels_give_zero_output(rng):
    x = rng.normal(size=(7, 2))
    out = ad.conv1d(x, np.zeros((3, 2, 4)))
    assert out.shape == (7, 4)
    assert not out.value.any()


def test_conv1d_box_kernel_with_zero_padding():
    x = np.arange(1.0, 6.0).reshape(5, 1)
    out = ad.conv1d(x, np.ones((3, 1, 1)))
    np.testing.assert_array_equal(out.value[:, 0], [3, 6, 9, 12, 9])


def test_conv1d_batched_matches_unbatched(rng):
    x = rng.normal(size=(3, 6, 2))
    k = rng.normal(size=(3, 2, 4))
    batched = ad.conv1d(x, k).value
    for i in range(3):
        np.testing.assert_allclose(batched[i], ad.conv1d(x[i], k).value)


def test_repeated_index_accumulates_gradient():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum(ad.take(x, np.array([0, 0, 2]))))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_shared_subexpression_gradient_sums_paths():
    x = leaf(2.0)
    y = ad.mul(x, x)
    ad.backward(ad.add(y, x))
    assert x.grad == pytest.approx(5.0)


def test_softplus_is_stable_and_matches_log1p_exp():
    z = np.array([-800.0, -3.0, 0.0, 3.0, 800.0])
    np.testing.assert_allclose(ad.softplus(Node(z)).value, np.logaddexp(0, z))
    x = leaf(z)
    ad.backward(ad.sum(ad.softplus(x)))
    np.testing.assert_allclose(x.grad, [0.0, 1 / (1 + math.exp(3)), 0.5, 1 / (1 + math.exp(-3)), 1.0], atol=1e-15)


def test_nonfinite_values_are_rejected():
    with pytest.raises(ad.NonFiniteError):
        Node(np.nan)
    with pytest.raises(ad.NonFiniteError):
        ad.log(Node(0.0))


def test_no_grad_builds_no_graph():
    x = leaf(1.0)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad and y.is_leaf
    assert ad.grad_enabled()


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Node(np.ones((2, 3))), Node(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        Node(np.ones(2)).item()


def test_fused_gru_matches_composed_ops(rng):
    from bmil.nn import GruCell
    cell = GruCell(3, rng, hidden_size=4)
    h = leaf(rng.normal(size=(2, 4)))
    xproj = leaf(rng.normal(size=(2, 12)))
    grads = []
    for step in (cell.step_projected, cell.step_composed):
        for n in [h, xproj, cell.u_zr, cell.u_h]:
            n.grad = None
        out = step(h, xproj)
        ad.backward(ad.sum(ad.square(out)))
        grads.append((out.value, h.grad, xproj.grad, cell.u_zr.grad, cell.u_h.grad))
    for fused, composed in zip(*grads):
        np.testing.assert_allclose(fused, composed, atol=1e-12)


def test_gru_sequence_matches_stepping(rng):
    from bmil.nn import GruCell
    cell = GruCell(3, rng, hidden_size=5)
    xs = rng.normal(size=(6, 2, 3))
    h0 = rng.normal(size=(2, 5))
    seq = ad.gru_sequence(h0, cell.project_inputs(xs), cell.u_zr, cell.u_h).value
    h = h0
    for t in range(6):
        h = cell(h, xs[t]).value
        np.testing.assert_allclose(seq[t], h, atol=1e-13)


# -- optimizer -----------------------------------------------------------------


def test_rmsprop_zero_gradient_leaves_params():
    p = leaf([1.0, -2.0])
    p.grad = np.zeros(2)
    st_ = ad.RmsPropState(total_steps=10)
    ad.rmsprop_step([p], st_)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert st_.step_count == 1


def test_rmsprop_first_step_hand_value():
    p = leaf(0.0)
    p.grad = np.array(1.0)
    ad.rmsprop_step([p], ad.RmsPropState(total_steps=10 ** 9, base_lr=3e-4, decay=0.99, epsilon=1e-8))
    assert p.value == pytest.approx(-3e-4 / (math.sqrt(0.01) + 1e-8), rel=1e-6)
    assert p.value == pytest.approx(-3e-3, rel=1e-5)


def test_rmsprop_linear_decay_reaches_zero():
    p = leaf(0.0)
    st_ = ad.RmsPropState(total_steps=5, step_count=4)
    p.grad = np.array(1.0)
    assert ad.rmsprop_step([p], st_)
    moved = p.value.copy()
    assert moved != 0.0
    p.grad = np.array(1.0)
    assert not ad.rmsprop_step([p], st_)
    assert p.value == moved


def test_rmsprop_clips_global_norm():
    p = leaf([0.0, 0.0])
    p.grad = np.array([30.0, 40.0])
    st_ = ad.RmsPropState(total_steps=10 ** 9, max_grad_norm=5.0)
    ad.rmsprop_step([p], st_)
    np.testing.assert_allclose(st_.square_avg[0], 0.01 * np.array([3.0, 4.0]) ** 2)


# -- properties ----------------------------------------------------------------

arrays = hnp.arrays(np.float64, (3, 2), elements=st.floats(-3, 3))


@settings(max_examples=40, deadline=None)
@given(arrays, arrays)
def test_mul_gradient_is_other_operand(a, b):
    x, y = leaf(a), leaf(b)
    ad.backward(ad.sum(ad.mul(x, y)))
    np.testing.assert_allclose(x.grad, b)
    np.testing.assert_allclose(y.grad, a)


@settings(max_examples=40, deadline=None)
@given(arrays)
def test_mean_gradient_is_uniform(a):
    x = leaf(a)
    ad.backward(ad.mean(x))
    np.testing.assert_allclose(x.grad, np.full(a.shape, 1 / a.size))


@settings(max_examples=40, deadline=None)
@given(arrays, st.floats(-2, 2), st.floats(-2, 2))
def test_clip_gradient_masks_outside(a, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    x = leaf(a)
    ad.backward(ad.sum(ad.clip(x, lo, hi)))
    inside = (a >= lo) & (a <= hi)
    assert np.all(x.grad[~inside] == 0)
    assert np.all(x.grad[(a > lo) & (a < hi)] == 1)
