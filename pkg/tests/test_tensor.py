import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptsm import tensor as T
from ptsm.errors import ContractError, GradCheckError
from ptsm.gradsuite import PRIMITIVE_CASES, run_case
from ptsm.tensor import Tensor, backward, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_every_primitive_has_a_gradient_case():
    assert set(PRIMITIVE_CASES) == set(T.primitive_set())


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_matches_central_differences(name):
    rep = run_case(PRIMITIVE_CASES[name], seed=1, probes=100, step=1e-5, tol=1e-4)
    assert rep.n_probes >= 100
    assert rep.ok, rep.failures[:3]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composed_ops_match_finite_differences_on_random_inputs(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.standard_normal((3, 4)))
    w = leaf(rng.standard_normal((4, 2)))

    def f():
        h = T.elu(a @ w)
        return T.tsum(T.softmax(h, axis=1) * np.arange(2.0)) + T.mean(T.sigmoid(a))

    rep = grad_check(f, {"a": a, "w": w}, step=1e-5, tol=1e-4)
    assert rep.ok, rep.failures[:3]


def test_sum_of_x_squared_gradient_is_2x():
    x = leaf([1.0, -2.0, 3.0])
    g = backward(T.tsum(x * x), [x])[x]
    np.testing.assert_array_equal(g, [2.0, -4.0, 6.0])


def test_gradient_is_linear_in_the_root():
    rng = np.random.default_rng(0)
    x = leaf(rng.standard_normal(5))
    f1 = T.tsum(T.sigmoid(x))
    g1 = backward(f1, [x])[x]
    f2 = T.tsum(T.exp(x))
    g2 = backward(f2, [x])[x]
    both = backward(T.sigmoid(x).sum() * 2.0 + T.exp(x).sum() * -3.0, [x])[x]
    np.testing.assert_allclose(both, 2 * g1 - 3 * g2, rtol=1e-12)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    x = leaf(rng.standard_normal((4, 6)))
    w = leaf(rng.standard_normal((6, 3)))

    def grads():
        out = T.tsum(T.elu(x @ w) * T.sigmoid(x @ w))
        g = backward(out, [x, w])
        return g[x].copy(), g[w].copy()

    a, b = grads(), grads()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = x * x
    z = y + y
    assert backward(T.tsum(z), [x])[x][0] == pytest.approx(8.0)


def test_unused_leaf_gets_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf([[3.0]])
    g = backward(T.tsum(x), [x, unused])
    np.testing.assert_array_equal(g[unused], [[0.0]])


def test_backward_requires_scalar_root():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_deep_chain_does_not_hit_recursion_limit():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    assert backward(T.tsum(y), [x])[x][0] == 1.0


def test_broadcast_gradients_are_reduced_to_operand_shape():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    g = backward(T.tsum(a * b), [a, b])
    assert g[b].shape == (4,)
    np.testing.assert_array_equal(g[b], [3.0] * 4)


def test_l2_norm_gradient_at_origin_is_zero():
    x = leaf(np.zeros((1, 3)))
    g = backward(T.tsum(T.l2_norm(x, axis=1)), [x])[x]
    np.testing.assert_array_equal(g, np.zeros((1, 3)))


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_softmax_matches_exp_normalize():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((5, 4)) * 3
    expected = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(T.softmax(Tensor(z), axis=1).data, expected, rtol=0, atol=1e-12)


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 10))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    out = T.conv1d(Tensor(x), Tensor(w), Tensor(b), padding=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.zeros((2, 4, 10))
    for n in range(2):
        for o in range(4):
            for t in range(10):
                ref[n, o, t] = np.sum(xp[n, :, t : t + 5] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_batch_cov_matches_numpy():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((9, 3)), rng.standard_normal((9, 2))
    full = np.cov(np.hstack([a, b]).T)
    np.testing.assert_allclose(T.batch_cov(Tensor(a), Tensor(b)).data, full[:3, 3:], atol=1e-12)


def test_batch_cov_needs_two_rows():
    with pytest.raises(ContractError):
        T.batch_cov(Tensor(np.ones((1, 3))))


def test_adaptive_pool_bins_cover_input_evenly():
    p = T.pooling_matrix(10, 4)
    np.testing.assert_allclose(p.sum(axis=0), 1.0)
    counts = (p > 0).sum(axis=0)
    assert list(counts) == [3, 3, 2, 2]
    x = np.arange(10.0)[None, None]
    np.testing.assert_allclose(T.adaptive_avg_pool1d(Tensor(x), 4).data[0, 0], [1, 4, 6.5, 8.5])


def test_dropout_is_identity_in_eval_mode_and_unbiased_in_training():
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.5, training=False) is x
    out = T.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(out)) == {0.0, 2.0}
    assert out.mean() == pytest.approx(1.0, abs=0.03)


def test_batch_norm_eval_uses_running_statistics():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    rm, rv = np.array([1.0, 2.0]), np.array([4.0, 16.0])
    out, m2, v2 = T.batch_norm(x, g, b, rm, rv, training=False)
    np.testing.assert_allclose(out.data, (x.data - rm) / np.sqrt(rv + T.BN_EPS))
    assert m2 is rm and v2 is rv


def test_batch_norm_training_updates_running_statistics():
    x = Tensor(np.array([[1.0], [3.0]]))
    _, m2, v2 = T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), training=True)
    np.testing.assert_allclose(m2, [0.1 * 2.0])
    # unbiased batch variance of (1, 3) is 2
    np.testing.assert_allclose(v2, [0.9 + 0.1 * 2.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_non_finite_parameter():
    x = leaf([0.0])
    with pytest.raises(GradCheckError, match="x"):
        grad_check(lambda: T.tsum(T.log(x + 1e-7)), {"x": x}, step=1e-5)


def test_grad_check_detects_a_wrong_gradient():
    x = leaf([0.7, -0.3])

    def broken(a):
        return T._node(a.data * 3.0, (a,), lambda g: (g * 2.0,), "broken")

    rep = grad_check(lambda: T.tsum(broken(x)), {"x": x})
    assert not rep.ok
    assert rep.worst == pytest.approx(1 / 3)


def test_clip_min_propagates_nan():
    out = T.clip_min(Tensor(np.array([np.nan, 0.0, 2.0])), 1.0).data
    assert np.isnan(out[0]) and list(out[1:]) == [1.0, 2.0]
