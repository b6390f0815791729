import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dtltune.controls import InvalidArgument
from dtltune.estimator import A3CTuner


def small(**kw):
    params = dict(n_episodes=3, max_steps=20, hidden_layers=(5,), eval_sample_size=3, eval_max_steps=10)
    params.update(kw)
    return A3CTuner(**params)


def test_params_round_trip_and_clone():
    est = small(c1=3.0)
    assert est.get_params()["c1"] == 3.0
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(gamma=0.9)
    assert est.gamma == 0.9


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 13)))


def test_fit_predict_score():
    est = small().fit()
    assert est.n_features_in_ == 13 and est.n_actions_ == 3
    assert len(est.episode_records_) == 3
    X = np.random.default_rng(0).uniform(-1, 1, (4, 13))
    mu = est.predict(X)
    assert mu.shape == (4, 3) and np.all(np.abs(mu) <= est.max_step_)
    assert est.value(X).shape == (4,)
    assert 0.0 <= est.score() <= 1.0
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 15)))


def test_fit_is_reproducible():
    a = small(random_state=4).fit()
    b = small(random_state=4).fit()
    X = np.ones((1, 13)) * 0.1
    assert np.array_equal(a.predict(X), b.predict(X))


def test_warm_start_continues_episode_count():
    est = small().fit()
    est.set_params(warm_start=True, n_episodes=5)
    est.fit()
    assert [r.episode for r in est.episode_records_] == [0, 1, 2, 3, 4]


def test_save_and_load(tmp_path):
    est = small().fit()
    path = tmp_path / "ck.txt"
    est.save(path)
    again = small().load(path)
    X = np.random.default_rng(1).uniform(-1, 1, (3, 13))
    assert np.array_equal(est.predict(X), again.predict(X))
    assert again.global_model_.completed == 3
    with pytest.raises(InvalidArgument):
        small(mode="5action").load(path)


def test_rollout_from_design_point():
    est = small().fit()
    traj = est.rollout(est._config().make_env().design_point())
    assert traj.success and traj.length == 0


def test_bad_mode():
    with pytest.raises(InvalidArgument):
        small(mode="7action").fit()
