import threading

import numpy as np
import pytest

from dtltune.a3c import (
    EpisodeRecord,
    HyperParams,
    RolloutBuffer,
    build_networks,
    compute_gradients,
    compute_returns_advantages,
    epsilon_schedule,
    make_global_model,
    policy_loss,
    policy_loss_terms,
    run_monitor,
    run_worker,
    select_action,
    shared_loss,
    state_value,
    train,
    value_loss,
)
from dtltune.controls import CONTROL_MAX, CONTROL_MIN, InvalidArgument
from dtltune.env import EpisodeConfig, LinacTuningEnv
from dtltune.neural import (
    GaussianHead,
    NetworkParams,
    NetworkSpec,
    PolicyOutput,
    gaussian_log_density,
    init_params,
    make_dropout_masks,
    tail_mass_outside,
)
from oracles import brute_force_returns, central_difference, relative_error

HP = HyperParams()


def make_buffer(rng, n, state_dim, n_act, max_step):
    buf = RolloutBuffer()
    for t in range(n):
        lo = -rng.uniform(0, 1, n_act) * max_step
        hi = rng.uniform(0, 1, n_act) * max_step
        buf.add(rng.normal(size=state_dim), rng.normal(size=n_act) * max_step, None, None,
                rng.normal(), lo, hi, False)
    return buf


def test_returns_examples():
    r, a = compute_returns_advantages([0.0, 0.0], 0.5, [0.0, 0.0], bootstrap=1.0)
    assert r.tolist() == [0.25, 0.5]
    r, a = compute_returns_advantages([1000.0], 0.99, [3.0], bootstrap=50.0, dones=[True])
    assert r[0] == 1000.0 and a[0] == 997.0
    _, a = compute_returns_advantages([1.0], 0.9, [2.0], bootstrap=2.0)
    assert a[0] == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(InvalidArgument):
        compute_returns_advantages([], 0.9, [])


def test_returns_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 51))
        rewards = rng.normal(size=n) * 10
        dones = rng.random(n) < 0.1
        gamma, boot = rng.uniform(0.5, 0.999), rng.normal()
        r, _ = compute_returns_advantages(rewards, gamma, np.zeros(n), boot, dones)
        assert np.allclose(r, brute_force_returns(rewards, gamma, boot, dones), rtol=0, atol=1e-12)


def test_zero_advantage_gives_zero_loss():
    rng = np.random.default_rng(1)
    mu, sig = rng.normal(size=(4, 2)), rng.uniform(0.2, 1, (4, 2))
    loss, dmu, dsig = policy_loss_terms(mu, sig, rng.normal(size=(4, 2)), -np.ones((4, 2)), np.ones((4, 2)),
                                        np.zeros(4), "eq7")
    assert loss == 0 and np.all(dmu == 0) and np.all(dsig == 0)


def test_eq6_single_step_hand_value():
    mu, sig = np.array([[0.0]]), np.array([[1.0]])
    a = np.array([[0.0]])
    lo, hi = np.array([[-1.0]]), np.array([[1.0]])
    loss, _, _ = policy_loss_terms(mu, sig, a, lo, hi, np.array([1.0]), "eq6", c1=10.0)
    assert loss == pytest.approx(0.9189385332 + 10 * 0.3173105079, abs=1e-9)


def test_eq6_and_eq7_differ():
    mu, sig = np.array([[0.0]]), np.array([[1.0 / np.sqrt(2 * np.pi)]])  # density 1 at the mean
    args = (mu, sig, mu.copy(), -np.ones((1, 1)), np.ones((1, 1)), np.array([1.0]))
    l6 = policy_loss_terms(*args, "eq6")[0]
    l7 = policy_loss_terms(*args, "eq7")[0]
    assert l6 == pytest.approx(0.0, abs=1e-12) and l7 == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(InvalidArgument):
        policy_loss_terms(*args, "eq8")


def test_value_loss_hand_values():
    spec = NetworkSpec(2, (3,), value_head=True, dropout=0.0)
    p = NetworkParams(spec)
    buf = RolloutBuffer(states=[np.zeros(2)])
    loss, g = value_loss(p, buf, [2.0])
    assert loss == 4.0
    assert g[-1] == -4.0  # output bias: dLoss/dV
    loss, g = value_loss(p, buf, [0.0])
    assert loss == 0.0 and np.all(g == 0)


@pytest.mark.parametrize("variant", ["eq6", "eq7"])
@pytest.mark.parametrize("c2", [0.0, 0.05])
@pytest.mark.parametrize("seed", range(5))
def test_policy_loss_gradient(variant, c2, seed):
    rng = np.random.default_rng(seed)
    max_step = np.array([1.0, 5.0])
    head = GaussianHead(max_step)
    spec = NetworkSpec(4, (5, 3) if seed % 2 else (6,), policy_dim=2, dropout=0.2 if seed < 3 else 0.0)
    p = init_params(spec, seed)
    buf = make_buffer(rng, 6, 4, 2, max_step)
    adv = rng.normal(size=6)
    masks = make_dropout_masks(spec, 6, rng) if spec.dropout else None
    loss, g = policy_loss(p, head, buf, adv, variant, c1=10.0, c2=c2, masks=masks)
    f = lambda flat: policy_loss(NetworkParams(spec, flat.copy()), head, buf, adv, variant, 10.0, c2, masks=masks)[0]
    assert relative_error(g, central_difference(f, p.flat)) < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_value_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(5, (4, 3), value_head=True, dropout=0.1 * (seed % 2))
    p = init_params(spec, seed)
    buf = make_buffer(rng, 7, 5, 1, np.ones(1))
    ret = rng.normal(size=7)
    masks = make_dropout_masks(spec, 7, rng) if spec.dropout else None
    _, g = value_loss(p, buf, ret, masks=masks)
    f = lambda flat: value_loss(NetworkParams(spec, flat.copy()), buf, ret, masks=masks)[0]
    assert relative_error(g, central_difference(f, p.flat)) < 1e-4


@pytest.mark.parametrize("variant", ["eq6", "eq7"])
def test_shared_loss_gradient(variant):
    rng = np.random.default_rng(9)
    max_step = np.array([1.0, 1.0, 5.0])
    head = GaussianHead(max_step)
    spec = NetworkSpec(6, (5,), policy_dim=3, value_head=True, dropout=0.1)
    p = init_params(spec, 3)
    buf = make_buffer(rng, 5, 6, 3, max_step)
    adv, ret = rng.normal(size=5), rng.normal(size=5)
    masks = make_dropout_masks(spec, 5, rng)
    _, g = shared_loss(p, head, buf, adv, ret, variant, 10.0, 0.01, 0.5, masks=masks)
    f = lambda flat: shared_loss(NetworkParams(spec, flat.copy()), head, buf, adv, ret, variant, 10.0, 0.01, 0.5,
                                 masks=masks)[0]
    assert relative_error(g, central_difference(f, p.flat)) < 1e-4


def test_policy_gradient_ignores_value_params():
    rng = np.random.default_rng(4)
    nets = build_networks(13, 3, (10,), seed=1)
    head = GaussianHead(np.array([1.0, 1.0, 5.0]))
    buf = make_buffer(rng, 5, 13, 3, head.max_step)
    adv = rng.normal(size=5)
    _, g1 = policy_loss(nets["policy"], head, buf, adv, dropout_seed=1)
    nets["value"].assign(nets["value"].flat + rng.normal(size=nets["value"].flat.size))
    _, g2 = policy_loss(nets["policy"], head, buf, adv, dropout_seed=1)
    assert np.array_equal(g1, g2)


def test_epsilon_schedule():
    assert epsilon_schedule(0, HP) == 0.5
    assert epsilon_schedule(100_000, HP) == HP.epsilon_min
    flat = HyperParams(epsilon_decay=1.0)
    assert epsilon_schedule(500, flat) == 0.5


def test_select_action_branches():
    rng = np.random.default_rng(0)
    pol = PolicyOutput(np.array([0.2, -0.1]), np.array([0.5, 0.5]))
    lo, hi = np.array([-0.3, -1.0]), np.array([0.1, 0.4])
    assert not any(select_action(pol, 0.0, lo, hi, rng)[1] for _ in range(200))
    for _ in range(200):
        a, rand = select_action(pol, 1.0, lo, hi, rng)
        assert rand and np.all(a >= lo) and np.all(a <= hi)
    frac = np.mean([select_action(pol, 0.5, lo, hi, rng)[1] for _ in range(10_000)])
    assert abs(frac - 0.5) < 0.02
    with pytest.raises(InvalidArgument):
        select_action(pol, 1.5, lo, hi, rng)


def small_model(**hp_kwargs):
    hp = HyperParams(**hp_kwargs)
    nets = build_networks(13, 3, (6,), seed=0)
    return make_global_model(nets, hp), hp


def test_zero_gradient_leaves_params():
    gm, _ = small_model()
    before = gm.snapshot()
    gm.apply_gradients({k: np.zeros_like(v.flat) for k, v in gm.networks.items()})
    assert all(np.array_equal(before[k], gm.networks[k].flat) for k in before)


def test_clipping_equals_rescaled_gradient():
    rng = np.random.default_rng(0)
    g = {k: rng.normal(size=v.flat.size) for k, v in small_model()[0].networks.items()}
    big = {k: v / np.linalg.norm(v) * 10 * HP.grad_clip for k, v in g.items()}
    clipped = {k: v / np.linalg.norm(v) * HP.grad_clip for k, v in g.items()}
    a, _ = small_model()
    b, _ = small_model()
    a.apply_gradients(big)
    b.apply_gradients(clipped)
    for k in a.networks:
        assert np.allclose(a.networks[k].flat, b.networks[k].flat, rtol=0, atol=1e-15)
        assert np.allclose(a.accumulators[k], b.accumulators[k], rtol=1e-12)


def test_rms_update_rule():
    gm, hp = small_model(grad_clip=1e9)
    k = "value"
    g = np.full(gm.networks[k].flat.size, 0.01)
    before = gm.networks[k].flat.copy()
    gm.apply_gradients({k: g})
    acc = 0.01 * g * g
    assert np.allclose(gm.networks[k].flat, before - hp.lr_value * g / np.sqrt(acc + 1e-8), rtol=0, atol=1e-15)


def test_nan_gradient_is_skipped_and_counted():
    gm, _ = small_model()
    before = gm.snapshot()
    g = {k: np.zeros_like(v.flat) for k, v in gm.networks.items()}
    g["policy"][0] = np.nan
    assert gm.apply_gradients(g) is False
    assert gm.skipped == 1 and gm.submitted == 1 and gm.updates == 0
    assert all(np.array_equal(before[k], gm.networks[k].flat) for k in before)


def test_shape_mismatch_rejected():
    gm, _ = small_model()
    with pytest.raises(InvalidArgument):
        gm.apply_gradients({"policy": np.zeros(3)})
    with pytest.raises(InvalidArgument):
        gm.apply_gradients({"critic": np.zeros(3)})


def test_concurrent_updates_stay_finite_and_accounted():
    gm, _ = small_model()
    n_threads, per_thread = 4, 2500

    def hammer(seed):
        rng = np.random.default_rng(seed)
        for _ in range(per_thread):
            gm.apply_gradients({k: rng.normal(size=v.flat.size) * 100 for k, v in gm.networks.items()})

    threads = [threading.Thread(target=hammer, args=(i,)) for i in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert gm.submitted == gm.updates == n_threads * per_thread
    assert all(np.all(np.isfinite(v.flat)) for v in gm.networks.values())
    assert all(np.all(a >= 0) for a in gm.accumulators.values())


def env_factory(max_steps=40, reset_mode="fixed"):
    return lambda i=0: LinacTuningEnv(episode=EpisodeConfig(active_controls=3, max_steps=max_steps,
                                                            reset_mode=reset_mode), seed=100 + i)


def test_single_worker_runs_are_identical():
    streams = []
    for _ in range(2):
        gm, hp = small_model(seed=3)
        recs, _ = train(env_factory(), gm, hp, 4)
        streams.append(([(r.episode, r.length, r.total_reward, r.success, r.epsilon) for r in recs], gm.snapshot()))
    assert streams[0][0] == streams[1][0]
    assert all(np.array_equal(streams[0][1][k], streams[1][1][k]) for k in streams[0][1])


def test_episode_records_respect_reward_bound():
    gm, hp = small_model()
    recs, _ = train(env_factory(30), gm, hp, 3)
    assert [r.episode for r in recs] == [0, 1, 2]
    for r in recs:
        assert r.length <= 30
        assert r.total_reward >= -1.7225 * r.length + 1000 * r.success - 1e-9
        assert len(r.csv_row().split(",")) == len(EpisodeRecord.CSV_HEADER.split(","))


def test_stop_signal_ends_worker():
    gm, hp = small_model()
    stop = threading.Event()
    seen = []

    def on_episode(rec):
        seen.append(rec)
        stop.set()

    recs = run_worker(0, env_factory(20)(), gm, hp, stop, 1000, on_episode)
    assert len(recs) == 1 and gm.completed == 1


def test_stop_mid_episode_returns_within_one_rollout():
    gm, hp = small_model(t_max=5)
    stop = threading.Event()
    stop.set()
    assert run_worker(0, env_factory(5000)(), gm, hp, stop, 10) == []
    assert gm.steps == 0


def test_multi_worker_training_with_monitor():
    gm, hp = small_model(workers=3)
    mon_env = env_factory(15)(99)
    recs, mon = train(env_factory(15, "random"), gm, hp, 9, monitor_env=mon_env, monitor_cadence=3)
    assert sorted(r.episode for r in recs) == list(range(9))
    assert {r.worker for r in recs} <= {0, 1, 2}
    assert gm.completed == 9 and len(mon) >= 1
    for r in mon:
        assert r.worker == -1 and r.epsilon == 0.0 and r.length <= 15
    assert all(np.all(np.isfinite(v.flat)) for v in gm.networks.values())


def test_monitor_does_not_touch_parameters():
    gm, _ = small_model()
    before = gm.checksum()
    stop = threading.Event()
    stop.set()
    recs = run_monitor(env_factory(25)(), gm, 5, stop)
    assert len(recs) == 1
    assert recs[0].length == 25 or recs[0].success
    assert gm.checksum() == before


def test_worker_actions_keep_controls_in_range():
    gm, hp = small_model(epsilon0=1.0, epsilon_min=1.0)
    env = env_factory(60)()
    orig_step = env.step

    def checked(a):
        res = orig_step(a)
        assert np.all(env.controls >= CONTROL_MIN) and np.all(env.controls <= CONTROL_MAX)
        return res

    env.step = checked
    run_worker(0, env, gm, hp, threading.Event(), 2)


def test_state_arrays_round_trip():
    gm, hp = small_model()
    train(env_factory(10), gm, hp, 2)
    arrays = gm.state_arrays()
    other = make_global_model({k: v.copy() for k, v in gm.networks.items()}, hp)
    other.load_state_arrays(arrays)
    assert other.completed == other.episodes == 2
    assert other.updates == gm.updates
    assert all(np.array_equal(other.accumulators[k], gm.accumulators[k]) for k in gm.accumulators)


def test_hyperparam_validation():
    for kw in (dict(gamma=1.0), dict(t_max=0), dict(loss_variant="x"), dict(epsilon0=0.01, epsilon_min=0.1)):
        with pytest.raises(InvalidArgument):
            HyperParams(**kw)


def test_tail_penalty_enters_loss():
    mu, sig = np.array([[0.0]]), np.array([[1.0]])
    lo, hi = np.array([[-1.0]]), np.array([[1.0]])
    base = policy_loss_terms(mu, sig, mu, lo, hi, np.array([0.0]), "eq7", c1=0.0)[0]
    pen = policy_loss_terms(mu, sig, mu, lo, hi, np.array([0.0]), "eq7", c1=2.0)[0]
    assert pen - base == pytest.approx(2 * float(tail_mass_outside(-1.0, 1.0, 0.0, 1.0)), abs=1e-12)
    assert base == 0.0
    assert gaussian_log_density(mu, mu, sig)[0] < 0


def test_penalty_weight_follows_reward_scale():
    rng = np.random.default_rng(12)
    max_step = np.array([1.0, 1.0, 5.0])
    head = GaussianHead(max_step)
    nets = build_networks(4, 3, (5,), dropout=0.0, seed=2)
    buf = make_buffer(rng, 6, 4, 3, max_step)
    hp = HyperParams(c1=10.0, c2=0.3, reward_scale=1e-3)
    grads, _ = compute_gradients(nets, head, buf, hp, dropout_seed=0)
    values = state_value(nets, np.asarray(buf.states))
    _, adv = compute_returns_advantages(np.asarray(buf.rewards) * 1e-3, hp.gamma, values, 0.0, buf.dones)
    _, want = policy_loss(nets["policy"], head, buf, adv, "eq7", c1=0.01, c2=3e-4)
    np.testing.assert_allclose(grads["policy"], want, rtol=1e-12, atol=1e-15)
