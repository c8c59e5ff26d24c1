import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptsm import stap
from ptsm.errors import ContractError
from ptsm.tensor import Tensor


def params(c=4, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    p = stap.init_generator_params(c, rng)
    return {k: Tensor(v * scale) for k, v in p.items()}


def fixed(alpha, beta):
    return stap.FusionWeights(alpha, beta, learnable=False)


def test_zero_generators_give_half_everywhere():
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in params().items()}
    x = np.random.default_rng(1).standard_normal((3, 4, 20))
    m = stap.generate_masks(x, p, stap.fusion_weights(p)).as_arrays()
    for name, arr in m.items():
        assert np.all(arr == 0.5), name


def test_mask_shapes_for_batched_and_single_input():
    p = params()
    x = np.random.default_rng(1).standard_normal((3, 4, 20))
    m = stap.generate_masks(x, p, stap.fusion_weights(p))
    assert m.m_s.shape == (3, 4) and m.m_t.shape == (3, 20)
    single = stap.generate_masks(x[0], p, stap.fusion_weights(p))
    np.testing.assert_allclose(single.m_s.data[0], m.m_s.data[0])


@pytest.mark.parametrize("alpha,beta", [(1.0, 1.0), (0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])
def test_fusion_endpoints_are_bitwise(alpha, beta):
    p = params(seed=3)
    x = np.random.default_rng(4).standard_normal((5, 4, 16))
    m = stap.generate_masks(x, p, fixed(alpha, beta))
    m_t_src = m.m_t_p if alpha == 1.0 else m.m_t_c
    m_s_src = m.m_s_p if beta == 1.0 else m.m_s_c
    assert m.m_t.data.tobytes() == m_t_src.data.tobytes()
    assert m.m_s.data.tobytes() == m_s_src.data.tobytes()


def test_fused_masks_are_convex_combinations():
    p = params(seed=5)
    x = np.random.default_rng(6).standard_normal((2, 4, 16))
    m = stap.generate_masks(x, p, fixed(0.3, 0.8))
    np.testing.assert_array_equal(m.m_t.data, 0.3 * m.m_t_p.data + (1.0 - 0.3) * m.m_t_c.data)
    np.testing.assert_array_equal(m.m_s.data, 0.8 * m.m_s_p.data + (1.0 - 0.8) * m.m_s_c.data)


def test_fusion_midpoint():
    out = stap._fuse(0.5, Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    assert out.data[0] == 0.5


def test_learnable_fusion_starts_at_half():
    f = stap.fusion_weights(params())
    assert f.values() == (0.5, 0.5) and f.learnable


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 50.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_masks_stay_in_unit_interval(seed, scale, alpha, beta):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 12)) * rng.uniform(0.1, 100)
    m = stap.generate_masks(x, params(seed=seed % 7, scale=scale), fixed(alpha, beta))
    for arr in m.as_arrays().values():
        assert arr.min() >= 0.0 and arr.max() <= 1.0


def test_generate_masks_rejects_bad_input():
    p = params()
    with pytest.raises(ContractError):
        stap.generate_masks(np.ones((2, 5, 10)), p, stap.fusion_weights(p))
    with pytest.raises(ContractError):
        stap.generate_masks(np.full((4, 10), np.nan), p, stap.fusion_weights(p))


def test_apply_masks_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(stap.apply_masks(x, (np.ones(2), np.ones(2))).data, x)
    zeroed = stap.apply_masks(x, (np.array([0.0, 1.0]), np.ones(2))).data
    np.testing.assert_array_equal(zeroed[0], [0.0, 0.0])
    # elementwise oracle: x[c, t] * m_s[c] * m_t[t]
    got = stap.apply_masks(x, (np.array([0.5, 1.0]), np.array([1.0, 0.5]))).data
    np.testing.assert_array_equal(got, [[0.5, 0.5], [3.0, 2.0]])


def test_apply_masks_length_mismatch():
    with pytest.raises(ContractError):
        stap.apply_masks(np.ones((2, 3)), (np.ones(3), np.ones(3)))
    with pytest.raises(ContractError):
        stap.apply_masks(np.ones((1, 2, 3)), (np.ones((1, 2)), np.ones((1, 2))))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_apply_masks_is_bilinear_and_monotone(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5))
    s1, s2, t = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3), rng.uniform(0, 1, 5)
    lhs = stap.apply_masks(x, (a * s1 + b * s2, t)).data
    rhs = a * stap.apply_masks(x, (s1, t)).data + b * stap.apply_masks(x, (s2, t)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    bigger = t.copy()
    bigger[2] = min(1.0, bigger[2] + 0.25)
    assert np.all(np.abs(stap.apply_masks(x, (s1, bigger)).data) >= np.abs(stap.apply_masks(x, (s1, t)).data))


def test_outer_flatten_examples():
    np.testing.assert_array_equal(stap.outer_flatten(np.ones(2), np.ones(2)).data, [1, 1, 1, 1])
    np.testing.assert_array_equal(stap.outer_flatten(np.array([0.5, 0.5]), np.array([1.0, 0.0])).data, [0.5, 0.5, 0, 0])
    np.testing.assert_array_equal(stap.outer_flatten(np.array([0.3, 0.9, 2.0]), np.zeros(1)).data, [0, 0, 0])


def test_outer_flatten_index_layout_and_l1():
    rng = np.random.default_rng(0)
    m_t, m_s = rng.uniform(size=6), rng.uniform(size=3)
    flat = stap.outer_flatten(m_t, m_s).data
    for c in range(3):
        for t in range(6):
            assert flat[c * 6 + t] == m_s[c] * m_t[t]
    assert np.abs(stap.outer_flatten(np.ones(6), np.ones(3)).data).sum() == 18


def test_outer_flatten_batched_and_errors():
    out = stap.outer_flatten(np.ones((2, 3)), np.ones((2, 4)))
    assert out.shape == (2, 12)
    with pytest.raises(ContractError):
        stap.outer_flatten(np.ones(0), np.ones(2))
    with pytest.raises(ContractError):
        stap.outer_flatten(np.ones((2, 3)), np.ones((3, 4)))


def test_personal_parameter_names():
    names = stap.personal_param_names(params())
    assert names and all(n.startswith(("stap.spatial_p.", "stap.temporal_p.")) for n in names)
    assert len(names) == 8
