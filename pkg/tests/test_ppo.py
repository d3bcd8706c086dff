"""Trainer: policy sets, GAE, exact loss gradients, updates, persistence."""

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from pvgridrl import grid, nn, ppo


def two_bus():
    return grid.load_bundled("feeder2.json")


def deep8():
    return grid.load_bundled("feeder_deeppv8.json")


def small_policy(n_agents=2, seed=0, mode="decentralized"):
    model = grid.generate_synthetic_feeder(n_agents + 1, n_agents, seed=1)
    rng = np.random.default_rng(seed)
    return ppo.PolicySet.create(model, mode, rng)


def fingerprint(result: ppo.TrainResult):
    h = hashlib.sha256()
    for k in range(result.policy_set.n_agents):
        for p in result.policy_set.agent_parameters(k):
            h.update(p.tobytes())
    for p in nn.parameters(result.critic):
        h.update(p.tobytes())
    h.update(json.dumps(result.metrics, sort_keys=True).encode())
    return h.hexdigest()


# -- policy sets ------------------------------------------------------------------


def test_decentralized_policy_structure():
    ps = small_policy(5)
    assert ps.n_agents == 5
    for actor in ps.actors:
        assert actor.sizes == [2, 4, 4, 2]
    assert ps.actor_parameter_count() == 5 * 42
    assert ps.log_std_parameter_count() == 5 * 2


def test_centralized_policy_structure():
    ps = small_policy(16, mode="centralized")
    assert ps.n_agents == 1
    assert ps.actors[0].sizes == [32, 64, 64, 32]
    assert ps.actor_parameter_count() == 8352
    assert ps.log_std_parameter_count() == 32


def test_unknown_mode_rejected():
    with pytest.raises(ValueError, match="mode"):
        ppo.PolicySet("federated", [1], [], [])


def test_act_matches_per_agent_forward():
    # the stacked einsum path must agree with running each actor alone
    ps = small_policy(4, seed=3)
    obs = np.random.default_rng(9).uniform(-1.5, 1.5, size=8)
    action, log_probs, raw = ps.act(obs, stochastic=False)
    np.testing.assert_array_equal(action, np.clip(raw, -1.0, 1.0))
    for k, actor in enumerate(ps.actors):
        mean, _ = nn.forward(actor, obs[2 * k:2 * k + 2])
        np.testing.assert_allclose(raw[2 * k:2 * k + 2], mean,
                                   rtol=1e-13, atol=1e-15)
        # deterministic sample sits at the mean, so only the normalizer remains
        expect_lp = float(-np.sum(ps.log_stds[k]) - np.log(2.0 * np.pi))
        assert log_probs[k] == pytest.approx(expect_lp, rel=1e-12)


def test_act_stochastic_reproducible_and_logged_correctly():
    ps = small_policy(3, seed=1)
    obs = np.random.default_rng(2).uniform(-1, 1, size=6)
    a1, lp1, raw1 = ps.act(obs, stochastic=True, rng=np.random.default_rng(5))
    a2, lp2, raw2 = ps.act(obs, stochastic=True, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(raw1, raw2)
    np.testing.assert_array_equal(lp1, lp2)
    # log-prob of the raw sample under the actor's own Gaussian
    _, _, det = ps.act(obs, stochastic=False)
    for k in range(3):
        mean = det[2 * k:2 * k + 2]
        std = np.exp(ps.log_stds[k])
        z = (raw1[2 * k:2 * k + 2] - mean) / std
        expect = np.sum(-0.5 * z * z - np.log(std) - 0.5 * np.log(2 * np.pi))
        assert lp1[k] == pytest.approx(expect, rel=1e-10)


def test_act_checks_observation_width():
    ps = small_policy(2)
    with pytest.raises(ValueError, match="observation"):
        ps.act(np.zeros(5), stochastic=False)


def test_optimizer_updates_flow_through_to_act():
    # per-agent Mlp views and the stacked act() arrays share storage
    ps = small_policy(3, seed=4)
    obs = np.random.default_rng(0).uniform(-1, 1, size=6)
    before, _, _ = ps.act(obs, stochastic=False)
    params = ps.agent_parameters(1)
    state = nn.AdamState(params, lr=0.5)
    nn.adam_step(params, [np.ones_like(p) for p in params], state)
    after, _, _ = ps.act(obs, stochastic=False)
    assert not np.array_equal(before[2:4], after[2:4])
    np.testing.assert_array_equal(before[0:2], after[0:2])
    np.testing.assert_array_equal(before[4:6], after[4:6])


def test_assert_decentralized_passes_and_centralized_is_noop():
    ppo.assert_decentralized(small_policy(6, seed=2),
                             np.random.default_rng(0), trials=50)
    ppo.assert_decentralized(small_policy(6, seed=2, mode="centralized"),
                             np.random.default_rng(0), trials=5)


def test_episode_seed_is_pure():
    a = np.random.default_rng(ppo.episode_seed(3, 17)).uniform(size=4)
    b = np.random.default_rng(ppo.episode_seed(3, 17)).uniform(size=4)
    c = np.random.default_rng(ppo.episode_seed(3, 18)).uniform(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- buffer and advantages ----------------------------------------------------------


def filled_buffer(rewards, dones, obs_dim=2, act_dim=2, n_agents=1, seed=0):
    rng = np.random.default_rng(seed)
    buf = ppo.ExperienceBuffer()
    for r, d in zip(rewards, dones):
        buf.append(rng.normal(size=obs_dim), rng.normal(size=act_dim),
                   rng.normal(size=n_agents), r, d)
    return buf


def zero_critic(obs_dim=2):
    return nn.Mlp.from_params([np.zeros((1, obs_dim))], [np.zeros(1)])


def test_buffer_stacking_and_episode_returns():
    buf = filled_buffer([1.0, 2.0, 3.0, 4.0], [False, True, False, True])
    obs, actions, logps, rewards, dones = buf.stacked()
    assert obs.shape == (4, 2)
    assert actions.shape == (4, 2)
    assert logps.shape == (4, 1)
    np.testing.assert_array_equal(rewards, [1.0, 2.0, 3.0, 4.0])
    assert buf.episode_returns() == [3.0, 7.0]
    buf.clear()
    assert len(buf) == 0


def test_gae_hand_case():
    # zero critic: delta_t = r_t, acc_t = r_t + gamma lam acc_{t+1}
    buf = filled_buffer([1.0, 2.0, 3.0], [False, False, True])
    adv, ret = ppo.compute_gae(buf, zero_critic(), gamma=0.5, lam=0.5,
                               normalize=False)
    np.testing.assert_allclose(adv, [1.0 + 0.25 * 2.75, 2.0 + 0.25 * 3.0, 3.0])
    np.testing.assert_allclose(ret, adv)  # values are zero


def test_gae_respects_episode_boundaries():
    buf = filled_buffer([1.0, 2.0, 10.0, 20.0], [False, True, False, True])
    adv, _ = ppo.compute_gae(buf, zero_critic(), gamma=0.5, lam=0.5,
                             normalize=False)
    np.testing.assert_allclose(adv, [1.5, 2.0, 15.0, 20.0])
    # the first episode's advantages ignore the second episode entirely
    buf2 = filled_buffer([1.0, 2.0, -5.0, 7.0], [False, True, False, True])
    adv2, _ = ppo.compute_gae(buf2, zero_critic(), gamma=0.5, lam=0.5,
                              normalize=False)
    np.testing.assert_allclose(adv2[:2], adv[:2])


def test_gae_uses_critic_bootstrap_within_episodes():
    # constant critic v: delta_t = r + gamma v - v mid-episode, r - v at the end
    critic = nn.Mlp.from_params([np.zeros((1, 2))], [np.array([2.0])])
    buf = filled_buffer([1.0, 1.0], [False, True])
    adv, ret = ppo.compute_gae(buf, critic, gamma=0.5, lam=1.0, normalize=False)
    d1 = 1.0 - 2.0                 # terminal: no bootstrap
    d0 = 1.0 + 0.5 * 2.0 - 2.0
    np.testing.assert_allclose(adv, [d0 + 0.5 * d1, d1])
    np.testing.assert_allclose(ret, adv + 2.0)


def test_gae_normalization():
    buf = filled_buffer([1.0, 5.0, -2.0, 0.5], [False, True, False, True])
    adv, _ = ppo.compute_gae(buf, zero_critic(), gamma=0.9, lam=0.9,
                             normalize=True)
    assert adv.mean() == pytest.approx(0.0, abs=1e-12)
    assert adv.std() == pytest.approx(1.0, rel=1e-6)


def test_gae_requires_complete_episodes():
    buf = filled_buffer([1.0, 2.0], [False, False])
    with pytest.raises(ValueError, match="complete"):
        ppo.compute_gae(buf, zero_critic(), 0.99, 0.95)
    with pytest.raises(ValueError, match="complete"):
        ppo.compute_gae(ppo.ExperienceBuffer(), zero_critic(), 0.99, 0.95)


# -- loss gradients -------------------------------------------------------------------


def make_minibatch(ps, batch, rng, ratio_spread=0.05):
    """Minibatch whose importance ratios stay well inside the clip band."""
    n = ps.n_buses
    obs = rng.uniform(-1.5, 1.5, size=(batch, 2 * n))
    actions = np.empty((batch, 2 * n))
    new_logp = np.empty((batch, ps.n_agents))
    for i in range(batch):
        _, lp, raw = ps.act(obs[i], stochastic=True, rng=rng)
        actions[i] = raw
        new_logp[i] = lp
    old = new_logp + rng.uniform(-ratio_spread, ratio_spread,
                                 size=new_logp.shape)
    return {
        "obs": obs, "actions": actions, "old_log_probs": old,
        "advantages": rng.normal(size=batch),
        "returns": rng.normal(size=batch),
    }


def all_parameters(ps, critic):
    out = []
    for k in range(ps.n_agents):
        out.extend(ps.agent_parameters(k))
    out.extend(nn.parameters(critic))
    return out


def flatten_grads(grads: ppo.PpoGrads):
    out = []
    for g in grads.actors:
        out.extend(g)
    out.extend(grads.critic)
    return out


def test_loss_gradients_match_finite_differences():
    ps = small_policy(2, seed=11)
    critic = nn.init_mlp([4, 8, 1], np.random.default_rng(12))
    config = ppo.PpoConfig(entropy_coef=0.01)
    mb = make_minibatch(ps, 6, np.random.default_rng(13))
    _, grads, _ = ppo.ppo_loss(ps, critic, mb, config)

    params = all_parameters(ps, critic)
    flat = flatten_grads(grads)
    assert len(params) == len(flat)
    # central differences carry O(eps/h) cancellation noise, so tiny entries
    # are judged by the absolute floor rather than relative error
    h = 1e-6
    for p, g in zip(params, flat):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = p[idx]
            p[idx] = keep + h
            up, _, _ = ppo.ppo_loss(ps, critic, mb, config)
            p[idx] = keep - h
            dn, _, _ = ppo.ppo_loss(ps, critic, mb, config)
            p[idx] = keep
            fd = (up - dn) / (2.0 * h)
            assert abs(fd - g[idx]) <= 1e-5 * max(abs(fd), abs(g[idx])) + 1e-8


def test_identical_policies_give_unit_ratio_statistics():
    ps = small_policy(2, seed=21)
    critic = nn.init_mlp([4, 8, 1], np.random.default_rng(22))
    mb = make_minibatch(ps, 8, np.random.default_rng(23), ratio_spread=0.0)
    _, _, aux = ppo.ppo_loss(ps, critic, mb, ppo.PpoConfig())
    assert aux["clip_fraction"] == 0.0
    assert aux["approx_kl"] == pytest.approx(0.0, abs=1e-12)
    # with ratio 1 the surrogate reduces to -mean(advantages)
    assert aux["policy_loss"] == pytest.approx(-mb["advantages"].mean(),
                                               rel=1e-12)


def test_clipped_samples_contribute_no_actor_gradient():
    ps = small_policy(1, seed=31)
    critic = nn.init_mlp([2, 8, 1], np.random.default_rng(32))
    for adv, shift in ((1.0, -0.5), (-1.0, 0.5)):
        # ratio = exp(new - old) = exp(-shift): far outside the clip band,
        # on the side where the clipped branch is the active minimum
        mb = make_minibatch(ps, 1, np.random.default_rng(33), ratio_spread=0.0)
        mb["old_log_probs"] = mb["old_log_probs"] + shift
        mb["advantages"] = np.array([adv])
        _, grads, aux = ppo.ppo_loss(ps, critic, mb, ppo.PpoConfig())
        assert aux["clip_fraction"] == 1.0
        for g in grads.actors[0]:
            np.testing.assert_array_equal(g, 0.0)
        assert any(np.any(g != 0.0) for g in grads.critic)


# -- updates -----------------------------------------------------------------------


def on_policy_buffer(ps, episodes, horizon, seed):
    rng = np.random.default_rng(seed)
    buf = ppo.ExperienceBuffer()
    n = ps.n_buses
    for _ in range(episodes):
        for t in range(horizon):
            obs = rng.uniform(-1.0, 1.0, size=2 * n)
            _, lp, raw = ps.act(obs, stochastic=True, rng=rng)
            buf.append(obs, raw, lp, rng.normal(), t == horizon - 1)
    return buf


def test_update_steps_optimizers_and_clears_buffer():
    ps = small_policy(2, seed=41)
    critic = ppo.make_critic(2, np.random.default_rng(42))
    config = ppo.PpoConfig(steps_per_update=96, minibatch_size=16, epochs=3)
    actor_opts, critic_opt = ppo.make_optimizers(ps, critic, config.learning_rate)
    buf = on_policy_buffer(ps, episodes=2, horizon=48, seed=43)
    before = [p.copy() for p in all_parameters(ps, critic)]
    stats = ppo.update(ps, critic, buf, config, actor_opts, critic_opt,
                       np.random.default_rng(44))
    assert len(buf) == 0
    assert critic_opt.t == 3 * (96 // 16)
    assert all(opt.t == critic_opt.t for opt in actor_opts)
    after = all_parameters(ps, critic)
    assert any(not np.array_equal(a, b) for a, b in zip(before, after))
    for key in ("mean_episode_reward", "policy_loss", "value_loss",
                "clip_fraction", "mean_kl"):
        assert np.isfinite(stats[key])


def test_update_requires_enough_data():
    ps = small_policy(1, seed=51)
    critic = ppo.make_critic(1, np.random.default_rng(52))
    config = ppo.PpoConfig(steps_per_update=64)
    actor_opts, critic_opt = ppo.make_optimizers(ps, critic, config.learning_rate)
    buf = on_policy_buffer(ps, episodes=1, horizon=10, seed=53)
    with pytest.raises(ValueError, match="insufficient"):
        ppo.update(ps, critic, buf, config, actor_opts, critic_opt,
                   np.random.default_rng(54))


def test_trailing_partial_minibatch_dropped():
    ps = small_policy(1, seed=61)
    critic = ppo.make_critic(1, np.random.default_rng(62))
    # 50 transitions, minibatch 16: three full minibatches per epoch
    config = ppo.PpoConfig(steps_per_update=50, minibatch_size=16, epochs=2)
    actor_opts, critic_opt = ppo.make_optimizers(ps, critic, config.learning_rate)
    buf = on_policy_buffer(ps, episodes=1, horizon=50, seed=63)
    ppo.update(ps, critic, buf, config, actor_opts, critic_opt,
               np.random.default_rng(64))
    assert critic_opt.t == 2 * 3


# -- rollout collection ---------------------------------------------------------------


def rollout_fingerprint(buf):
    obs, actions, logps, rewards, dones = buf.stacked()
    h = hashlib.sha256()
    for a in (obs, actions, logps, rewards, dones):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def test_collect_rollouts_deterministic():
    from pvgridrl.env import FeederEnv
    model = two_bus()
    ps = ppo.PolicySet.create(model, "decentralized", np.random.default_rng(0))
    prints = []
    for _ in range(2):
        buf = ppo.ExperienceBuffer()
        ppo.collect_rollouts(FeederEnv(model, seed=0), ps, buf, seed=9,
                             first_episode=0, n_episodes=3)
        prints.append(rollout_fingerprint(buf))
    assert prints[0] == prints[1]


def test_pooled_rollouts_match_serial():
    from pvgridrl.env import EpisodeConfig, FeederEnv, RewardConfig
    model = two_bus()
    ps = ppo.PolicySet.create(model, "decentralized", np.random.default_rng(0))
    serial = ppo.ExperienceBuffer()
    ppo.collect_rollouts(FeederEnv(model, seed=0), ps, serial, seed=9,
                         first_episode=4, n_episodes=4)
    pooled = ppo.ExperienceBuffer()
    with ProcessPoolExecutor(
            max_workers=2, initializer=ppo._worker_init,
            initargs=(grid.to_dict(model), RewardConfig(),
                      EpisodeConfig())) as pool:
        ppo.collect_rollouts(FeederEnv(model, seed=0), ps, pooled, seed=9,
                             first_episode=4, n_episodes=4, pool=pool)
    assert rollout_fingerprint(serial) == rollout_fingerprint(pooled)


# -- training driver --------------------------------------------------------------------


def quick_config(iterations=2, **kw):
    return ppo.TrainConfig(
        iterations=iterations,
        ppo=ppo.PpoConfig(steps_per_update=200, minibatch_size=16, epochs=2),
        **kw)


def test_train_is_deterministic():
    model = two_bus()
    a = ppo.train(model, quick_config(), seed=5)
    b = ppo.train(model, quick_config(), seed=5)
    assert fingerprint(a) == fingerprint(b)
    c = ppo.train(model, quick_config(), seed=6)
    assert fingerprint(c) != fingerprint(a)


def test_train_is_invariant_to_worker_count():
    model = two_bus()
    a = ppo.train(model, quick_config(iterations=1), seed=5)
    b = ppo.train(model, quick_config(iterations=1, workers=2), seed=5)
    assert fingerprint(a) == fingerprint(b)


def test_train_metrics_shape_and_counters():
    model = two_bus()
    seen = []
    result = ppo.train(model, quick_config(), seed=1, progress=seen.append)
    assert [m["iteration"] for m in result.metrics] == [1, 2]
    # 200 steps requested, horizon 100: two episodes per iteration
    assert result.env_steps == 400
    assert result.metrics[-1]["env_steps"] == 400
    assert seen == result.metrics
    assert result.feasibility_checks == 4 * 101
    assert result.feasibility_violations == 0
    for row in result.metrics:
        assert set(row) == set(ppo.METRICS_COLUMNS)


def test_train_zero_iterations_returns_initial_state():
    model = two_bus()
    result = ppo.train(model, quick_config(iterations=0), seed=1)
    assert result.metrics == []
    assert result.env_steps == 0
    assert result.policy_set.actor_parameter_count() == 42


def test_train_centralized_mode():
    model = deep8()
    cfg = quick_config(iterations=1, mode="centralized")
    result = ppo.train(model, cfg, seed=2)
    assert result.policy_set.mode == "centralized"
    assert result.policy_set.actors[0].sizes == [16, 64, 64, 16]
    assert np.isfinite(result.metrics[0]["mean_episode_reward"])


def test_train_can_self_check_decentralization():
    model = two_bus()
    cfg = quick_config(iterations=1, check_decentralization=True)
    ppo.train(model, cfg, seed=3)


# -- evaluation and persistence ------------------------------------------------------------


def test_evaluate_deterministic_and_consistent():
    model = two_bus()
    result = ppo.train(model, quick_config(iterations=1), seed=7)
    rows1, agg1, traces = ppo.evaluate(model, result.policy_set, 4, seed=2)
    rows2, agg2, _ = ppo.evaluate(model, result.policy_set, 4, seed=2)
    assert rows1 == rows2 and agg1 == agg2
    assert traces == [None] * 4
    assert agg1["scenarios"] == 4
    assert agg1["max_voltage_deviation"] == \
        max(r["max_voltage_deviation"] for r in rows1)
    rows3, _, _ = ppo.evaluate(model, result.policy_set, 4, seed=3)
    assert rows3 != rows1


def test_checkpoint_round_trip_is_exact(tmp_path):
    model = deep8()
    cfg = quick_config(iterations=1)
    result = ppo.train(model, cfg, seed=8)
    path = tmp_path / "ck.pvck"
    ppo.save_checkpoint(path, result.policy_set, result.critic,
                        result.actor_opts, result.critic_opt, result.rng,
                        reward_cfg=cfg.reward, episode_cfg=cfg.episode,
                        extra={"seed": 8})
    bundle = ppo.load_checkpoint(path)

    assert bundle.policy_set.mode == "decentralized"
    assert bundle.policy_set.bus_ids == result.policy_set.bus_ids
    for k in range(result.policy_set.n_agents):
        for a, b in zip(result.policy_set.agent_parameters(k),
                        bundle.policy_set.agent_parameters(k)):
            np.testing.assert_array_equal(a, b)
    for a, b in zip(nn.parameters(result.critic), nn.parameters(bundle.critic)):
        np.testing.assert_array_equal(a, b)
    for opt_a, opt_b in zip(result.actor_opts, bundle.actor_opts):
        assert opt_a.t == opt_b.t
        for m_a, m_b in zip(opt_a.m, opt_b.m):
            np.testing.assert_array_equal(m_a, m_b)
        for v_a, v_b in zip(opt_a.v, opt_b.v):
            np.testing.assert_array_equal(v_a, v_b)
    assert bundle.critic_opt.t == result.critic_opt.t
    assert bundle.rng.bit_generator.state == result.rng.bit_generator.state
    assert bundle.reward_cfg == cfg.reward
    assert bundle.episode_cfg == cfg.episode
    assert bundle.meta["extra"] == {"seed": 8}

    # the restored policy evaluates bit for bit like the live one
    rows_a, agg_a, _ = ppo.evaluate(model, result.policy_set, 3, seed=0)
    rows_b, agg_b, _ = ppo.evaluate(model, bundle.policy_set, 3, seed=0)
    assert json.dumps(rows_a) == json.dumps(rows_b)
    assert json.dumps(agg_a) == json.dumps(agg_b)


def test_checkpoint_bytes_deterministic(tmp_path):
    model = two_bus()
    result = ppo.train(model, quick_config(iterations=1), seed=4)
    a, b = tmp_path / "a.pvck", tmp_path / "b.pvck"
    for path in (a, b):
        ppo.save_checkpoint(path, result.policy_set, result.critic,
                            result.actor_opts, result.critic_opt, result.rng)
    assert a.read_bytes() == b.read_bytes()


def test_metrics_file_round_trip(tmp_path):
    rows = [{"iteration": 1, "env_steps": 200, "mean_episode_reward": 1 / 3,
             "policy_loss": -0.0123, "value_loss": 7.5, "clip_fraction": 0.25,
             "mean_kl": 1e-4, "max_voltage_deviation": 0.0712},
            {"iteration": 2, "env_steps": 400, "mean_episode_reward": -2.5,
             "policy_loss": 0.0, "value_loss": 3.25, "clip_fraction": 0.0,
             "mean_kl": 2e-4, "max_voltage_deviation": 0.0501}]
    path = tmp_path / "metrics.csv"
    ppo.write_metrics(path, rows)
    assert ppo.read_metrics(path) == rows
