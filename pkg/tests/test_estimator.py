import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from progcl import ProGCL, TrainConfig, generate_sbm, train_transductive


@pytest.fixture(scope="module")
def graph():
    return generate_sbm(3, 10, p_in=0.4, p_out=0.05, feature_dim=5, seed=0)


def test_params_mirror_train_config():
    names = set(ProGCL().get_params()) - {"inductive"}
    assert names == set(TrainConfig().to_dict())
    assert ProGCL().config() == TrainConfig()


def test_fit_transform_matches_training_loop(graph):
    est = ProGCL(mode="weight", epochs=4, E=1, hidden_dim=6, M_prime=8, seed=3)
    emb = est.fit_transform(graph)
    res = train_transductive(graph, est.config())
    np.testing.assert_array_equal(emb, res.model.embed(graph).data)
    assert est.records_ == res.records and est.fit_calls_ == 1
    assert emb.shape == (30, 6)


def test_clone_and_set_params(graph):
    est = ProGCL(epochs=3, E=1).set_params(mode="mix", m=2, N_prime=3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "model_")


def test_inductive_flag(graph):
    est = ProGCL(epochs=2, E=1, hidden_dim=4, batch_size=10, neighbor_fanouts=(2, 2),
                 inductive=True, mode="weight", M_prime=5).fit(graph)
    assert len(est.store_) == 3


def test_errors(graph):
    with pytest.raises(NotFittedError):
        ProGCL().transform(graph)
    with pytest.raises(ValueError, match="E="):
        ProGCL(epochs=3, E=5).fit(graph)
    with pytest.raises(TypeError):
        ProGCL().fit(np.zeros((3, 3)))
    est = ProGCL(epochs=2, E=1, hidden_dim=4).fit(graph)
    with pytest.raises(ValueError, match="features"):
        est.transform(generate_sbm(2, 3, feature_dim=2))
