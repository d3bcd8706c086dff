"""
Training decentralized inverter policies
========================================

A shortened training run on the bundled 8-inverter deep-solar feeder: each
bus gets its own 2-4-4-2 tanh policy (42 weights) acting only on its local
(s_P, s_V) observation, trained with a clipped-surrogate policy gradient
against a shared centralized critic. Takes about half a minute; the full-size
run lives in the acceptance tests.
"""

import pathlib

from pvgridrl import grid, ppo

model = grid.load_bundled("feeder_deeppv8.json")

config = ppo.TrainConfig(
    iterations=40,
    ppo=ppo.PpoConfig(steps_per_update=1000),   # 10 episodes per iteration
)
print(f"{model.n_agents} agents, "
      f"{42 * model.n_agents} actor parameters total, "
      f"critic sizes [{2 * model.n_agents}, 64, 64, 1]")

# mean_episode_reward is the undiscounted return of a 100-step episode,
# averaged over the iteration's episodes; it starts negative because the MPPT
# start over-volts the feeder tail, and crosses zero once the agents learn to
# absorb reactive power and trim active power at the tail
print("iter  mean episode reward")
result = ppo.train(
    model, config, seed=0,
    progress=lambda row: print(f"{row['iteration']:>4}  "
                               f"{row['mean_episode_reward']:+8.3f}"))

out = pathlib.Path(__file__).parent / "output"
out.mkdir(exist_ok=True)
path = out / "deeppv8_policy.pvck"
cfg_defaults = ppo.TrainConfig()
ppo.save_checkpoint(path, result.policy_set, result.critic, result.actor_opts,
                    result.critic_opt, result.rng,
                    reward_cfg=cfg_defaults.reward,
                    episode_cfg=cfg_defaults.episode)
print(f"\nsaved {path.name} "
      f"({result.feasibility_violations} constraint violations in "
      f"{result.feasibility_checks} audited steps)")
