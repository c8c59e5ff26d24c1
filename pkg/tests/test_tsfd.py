import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptsm import tensor as T
from ptsm import tsfd
from ptsm.config import PtsmConfig
from ptsm.errors import ContractError
from ptsm.model import forward, init_state_arrays, predict, predict_proba
from ptsm.tensor import Tensor

CFG = PtsmConfig(n_channels=4, n_times=32, n_classes=3, n_subjects=5, pooled_len=8, feature_dim=16)


@pytest.fixture(scope="module")
def arrays():
    return init_state_arrays(CFG, np.random.default_rng(0))


def batch(n=6, seed=1):
    return np.random.default_rng(seed).standard_normal((n, CFG.n_channels, CFG.n_times))


class Recording(dict):
    def __init__(self, *a):
        super().__init__(*a)
        self.read = set()

    def __getitem__(self, key):
        self.read.add(key)
        return super().__getitem__(key)


def test_forward_shapes(arrays):
    params, buffers = arrays
    fr = forward(params, buffers, batch(), CFG)
    lat = fr.latents
    assert lat.h_temp.shape == (6, 128, 8)
    assert lat.h_shared.shape == (6, 128)
    assert lat.f_task.shape == lat.f_subj.shape == (6, 16)
    assert fr.p_task.shape == (6, 3) and fr.p_subj.shape == (6, 5)
    np.testing.assert_allclose(fr.p_task.data.sum(axis=1), 1.0, atol=1e-12)


def test_heads_have_disjoint_parameters(arrays):
    params, _ = arrays
    task = {k for k in params if k.startswith("task_")}
    subj = {k for k in params if k.startswith("subj_")}
    assert task and {k.replace("task_", "subj_", 1) for k in task} == subj
    assert params["task_head.fc.w"] is not params["subj_head.fc.w"]


def test_classifiers_start_uniform(arrays):
    params, buffers = arrays
    fr = forward(params, buffers, batch(), CFG)
    np.testing.assert_array_equal(fr.p_task.data, 1 / 3)
    np.testing.assert_array_equal(fr.p_subj.data, 1 / 5)


def test_prediction_never_reads_subject_parameters(arrays):
    params, buffers = arrays
    rec = Recording(params)
    predict(rec, buffers, batch(), CFG)
    assert rec.read
    assert not [k for k in rec.read if k.startswith("subj_")]
    assert {k for k in params if k.startswith("task_")} <= rec.read


def test_eval_mode_is_deterministic_and_leaves_buffers(arrays):
    params, buffers = arrays
    x = batch()
    a = forward(params, buffers, x, CFG)
    b = forward(params, buffers, x, CFG)
    assert a.p_task.data.tobytes() == b.p_task.data.tobytes()
    assert a.buffer_updates == {}


def test_training_mode_uses_dropout_and_batch_statistics(arrays):
    params, buffers = arrays
    x = batch()
    a = forward(params, buffers, x, CFG, training=True, rng=np.random.default_rng(0))
    b = forward(params, buffers, x, CFG, training=True, rng=np.random.default_rng(1))
    assert not np.array_equal(a.latents.h_shared.data, b.latents.h_shared.data)
    assert set(a.buffer_updates) == set(buffers)


def test_single_trial_prediction_matches_batch(arrays):
    params, buffers = arrays
    x = batch()
    one = predict_proba(params, buffers, x[2], CFG)
    np.testing.assert_allclose(one[0], predict_proba(params, buffers, x, CFG)[2], rtol=1e-12)


def test_argmax_rule():
    assert tsfd.argmax_labels(np.array([[0.1, 0.7, 0.2]]))[0] == 1
    assert tsfd.argmax_labels(np.array([[0.5, 0.5]]))[0] == 0
    assert tsfd.argmax_labels(np.array([[0.2, 0.4, 0.4]]))[0] == 1


def test_shape_errors(arrays):
    params, buffers = arrays
    with pytest.raises(ContractError):
        forward(params, buffers, np.zeros((2, 3, 32)), CFG)
    with pytest.raises(ContractError):
        tsfd.encode_temporal(np.zeros((1, 4, 3)), params, buffers, 2)
    with pytest.raises(ContractError):
        tsfd.project_head(Tensor(np.zeros((1, 128))), params, buffers, "task", training=True)
    with pytest.raises(ContractError):
        tsfd.encode_shared(Tensor(np.zeros((2, 128, 3))), params)
    with pytest.raises(ContractError):
        tsfd.classify(Tensor(np.zeros((2, 16))), params, head="other")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_is_a_distribution(logits):
    p = T.softmax(Tensor(np.array([logits])), axis=-1).data
    assert abs(p.sum() - 1) <= 1e-9
    assert (p > 0).all()
