"""
Episode mechanics: observations, integral actions, projection, reward
=====================================================================

Walks one episode of the inverter-control environment by hand on the bundled
8-inverter deep-solar feeder: the MPPT reset, what the agents see, how box
actions turn into setpoint increments, the exact feasibility projection, and
the reward split.
"""

import numpy as np

from pvgridrl import env, grid

model = grid.load_bundled("feeder_deeppv8.json")
scenario = grid.deep_pv_scenario(model)   # p_env = min(2x load, 0.9 S), worst case
print(f"deep-solar scenario: p_env = {scenario.p_env[0]:.1f} kW per bus, "
      f"load = {model.bus(1).load_kw[0]:.1f} kW")

# 1. reset puts every inverter at the conventional MPPT point:
#    P = min(p_env, 0.9 S), Q = 0
e = env.FeederEnv(model, seed=0)
obs = e.reset(scenario)
print(f"\nMPPT start: P_c = {e.state.p_c[0]:.1f} kW, Q_c = {e.state.q_c[0]:.1f} "
      f"kvar at every bus")

# observations are (s_P, s_V) pairs: s_P = P_c/(0.9 S) - 1 is 0 at full use,
# s_V = (1 - V)/0.05 is -1 at the top of the 5% band
print("bus  s_P     s_V")
for k, bus_id in enumerate(model.controllable):
    print(f"{bus_id:>3}  {obs[k, 0]:+.3f}  {obs[k, 1]:+.3f}")
print("tail buses sit past s_V = -1: the band is already violated at MPPT")

# 2. actions are per-bus pairs in [-1, 1]^2 driving setpoint increments
#    dP = 0.09 S * a_P, dQ = 0.2 S * a_Q, then exact projection onto
#    0 <= P <= min(p_env, 0.9 S), P^2 + Q^2 <= S^2
actions = np.tile([-0.5, -1.0], (model.n_agents, 1))  # back off P, absorb Q
result = e.step(actions)
s = model.bus(1).inverter.s_kva
print(f"\nafter one joint action (a_P = -0.5, a_Q = -1):")
print(f"  requested dP = {0.09 * s * -0.5:+.2f} kW, dQ = {0.2 * s * -1.0:+.2f} kvar")
print(f"  applied P_c = {e.state.p_c[0]:.2f} kW, Q_c = {e.state.q_c[0]:.2f} kvar")
print(f"  system reward = {result.system_reward:+.4f}")

# 3. the projection is exact in float64: drive Q far past the circle bound
p_proj, q_proj = env.project_setpoints(
    p_req=np.full(8, 12.0), q_req=np.full(8, -100.0),
    capacity=e.capacity, p_env=scenario.p_env)
assert np.all(p_proj ** 2 + q_proj ** 2 <= e.capacity ** 2)  # no epsilon
print(f"\nprojection demo: requesting Q = -100 kvar at P = 12 kW lands on the "
      f"circle:\n  Q = {q_proj[0]:.6f} kvar, sqrt check "
      f"{np.sqrt(e.capacity[0] ** 2 - 12.0 ** 2):.6f}")

# 4. the reward trades band violations against curtailment: R_V is 0 inside
#    the +-delta band and negative outside, R_P pays for active power
cfg = env.RewardConfig(delta=0.05, mu=0.1)
per_bus, system = env.reward(v_ctrl=[1.02, 1.06, 0.94], p_c=[12.6, 6.3, 0.0],
                             capacity=[14.0, 14.0, 14.0], config=cfg)
print(f"\nreward anatomy at V = [1.02, 1.06, 0.94], P_c = [12.6, 6.3, 0]:")
for v, p, r in zip([1.02, 1.06, 0.94], [12.6, 6.3, 0.0], per_bus):
    print(f"  V = {v:.2f}, P_c = {p:>4.1f} kW -> r = {r:+.3f}")
print(f"  system reward (mean) = {system:+.4f}")

# 5. restart and run a full episode under the do-nothing policy: holding the
#    MPPT start reproduces the MPPT baseline summary
class Hold:
    def act(self, flat_obs, stochastic, rng=None):
        a = np.zeros_like(np.asarray(flat_obs, dtype=float))
        return a, None, a

stats = env.run_episode(e, Hold(), in_training=False, scenario=scenario)
base = env.mppt_baseline(model, scenario)
print(f"\nhold-setpoints episode: max |1 - V| = {stats.max_voltage_deviation:.4f}")
print(f"MPPT baseline:          max |1 - V| = {base.max_voltage_deviation:.4f}, "
      f"max tail V = {np.max(base.final_voltage_profile):.4f} (over the band)")
