import numpy as np
import pytest
from sklearn.base import clone

from gasnet_verify.estimator import TopologyVerifier
from gasnet_verify.sensing import generate_observations


def window(obs):
    return np.hstack([obs.p_tilde, obs.q_tilde, obs.phi_tilde])


def test_params_and_clone():
    est = TopologyVerifier(network="network2", h0="CCCC", rsd=0.08)
    assert est.get_params()["h0"] == "CCCC"
    again = clone(est).set_params(p_fa=0.01)
    assert again.p_fa == 0.01 and again.network == "network2"


@pytest.mark.parametrize("algorithm", ["relaxed", "efficient"])
def test_predict_matches_truth(case1, algorithm):
    est = TopologyVerifier(h0="CCC", rsd=0.10, algorithm=algorithm).fit()
    assert est.noise_ == case1["noise"]
    w1 = window(generate_observations(case1["s1"], est.noise_, 80, seed=0))
    w0 = window(generate_observations(case1["s0"], est.noise_, 80, seed=0))
    assert list(est.predict([w1, w0])) == ["H1", "H0"]
    score = est.decision_function([w1, w0])
    assert score[0] > 0 > score[1]


def test_validation():
    with pytest.raises(RuntimeError):
        TopologyVerifier().predict([np.zeros((3, 42))])
    est = TopologyVerifier().fit()
    with pytest.raises(ValueError):
        est.predict([np.zeros((3, 5))])
    with pytest.raises(ValueError):
        TopologyVerifier(algorithm="standard").fit()
