"""
Trained policy versus MPPT on the deep-solar scenario
=====================================================

Loads the checkpoint written by 03_train_decentralized.py (training a fresh
one if missing) and compares it with the conventional always-max controller
on the worst-case scenario: every inverter offered twice its bus load.
"""

import pathlib

import numpy as np

from pvgridrl import env, grid, ppo

model = grid.load_bundled("feeder_deeppv8.json")
path = pathlib.Path(__file__).parent / "output" / "deeppv8_policy.pvck"
if path.exists():
    policy = ppo.load_checkpoint(path).policy_set
    print(f"loaded {path.name}")
else:
    print("no checkpoint found, training a short run first")
    cfg = ppo.TrainConfig(iterations=15, ppo=ppo.PpoConfig(steps_per_update=600))
    policy = ppo.train(model, cfg, seed=0).policy_set

scenario = grid.deep_pv_scenario(model)
base = env.mppt_baseline(model, scenario)
e = env.FeederEnv(model, seed=0)
stats = env.run_episode(e, policy, in_training=False, scenario=scenario)

# end-of-episode voltage profile, bus by bus down the feeder
print("\nbus   V mppt   V policy")
for k, bus in enumerate(model.buses):
    flag = " <-- over band" if base.final_voltage_profile[k] > 1.05 else ""
    print(f"{bus.id:>3}   {base.final_voltage_profile[k]:.4f}   "
          f"{stats.final_voltage_profile[k]:.4f}{flag}")

print(f"\nmax |1 - V| over the episode: mppt {base.max_voltage_deviation:.4f}, "
      f"policy {stats.max_voltage_deviation:.4f} (band 0.05)")
print(f"final P_c/p_env per bus: {np.round(stats.final_power_ratio, 3)}")
print(f"median {np.median(stats.final_power_ratio):.3f} "
      f"(MPPT is 1.0 by construction but violates the band)")

# the learned behavior on this feeder: deliver full active power and absorb
# reactive power down the feeder tail where voltage sensitivity is highest
# (curtailment only shows up under harsher conditions than this scenario)
p_c, q_c = e.state.p_c, e.state.q_c
print("\nfinal setpoints (kW, kvar):")
for k, bus_id in enumerate(model.controllable):
    print(f"{bus_id:>3}   P = {p_c[k]:>6.2f}   Q = {q_c[k]:>6.2f}")
