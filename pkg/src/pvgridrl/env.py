"""MDP environment: observations, integral-controller actions, reward, episodes.

Each controllable bus hosts one agent that sees only local quantities: a
scaled real-power term s_P = P_c/(0.9 S) - 1 and a scaled voltage term
s_V = (1 - V)/0.05, V being the bus's positive-sequence voltage magnitude.
Actions are bounded increments: a step moves the setpoints by at most 0.09 S
in P and 0.2 S in Q (one tenth of the largest feasible jumps), plus the
measured local load change, and the result is projected onto the inverter's
feasible set. The projected setpoints take effect at the next power-flow
solve, so the applied P_c(t+1) equals the commanded value from step t.

Setpoints start each episode at the conventional operating point, maximum
power point tracking (P = min(p_env, 0.9 S), Q = 0); on feeders with deep
solar this over-volts, which is exactly what the agents must learn to undo.

All env arithmetic is in physical units (kW, kvar, kVA); conversion to p.u.
happens only when assembling solver injections.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import powerflow
from .grid import NetworkModel, P_CAP_FRACTION, Scenario, sample_scenario

LOG_2PI = np.log(2.0 * np.pi)


class EpisodeAborted(RuntimeError):
    """Power flow diverged mid-episode: infeasible operating point.

    Not a reward signal; carries a large negative diagnostic instead so
    callers can distinguish simulator infeasibility from policy quality.
    """

    def __init__(self, step, residual):
        super().__init__(
            f"episode aborted at step {step}: power flow diverged "
            f"(residual {residual:.3e})")
        self.step = step
        self.residual = residual
        self.diagnostic = -np.inf


@dataclass(frozen=True)
class RewardConfig:
    """delta: voltage half-band in p.u.; mu: per-bus weight(s) on drawn power."""
    delta: float = 0.05
    mu: float | np.ndarray = 0.1

    def mu_vector(self, n) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mu, dtype=float), (n,)).copy()


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 100
    step_ms: float = 10.0          # informational; the solver is quasi-steady-state
    dp_fraction: float = 0.09      # max |P setpoint move| per step, fraction of S
    dq_fraction: float = 0.2       # max |Q setpoint move| per step, fraction of S


@dataclass
class GridState:
    """Mutable per-episode state: scenario, last solution, applied setpoints."""
    scenario: Scenario
    solution: powerflow.VoltageSolution
    p_c: np.ndarray                # kW per controllable bus
    q_c: np.ndarray                # kvar per controllable bus
    step: int = 0


@dataclass
class StepResult:
    observations: np.ndarray       # (n, 2) rows of (s_P, s_V), bus-id order
    rewards: np.ndarray            # per-bus R_V + mu R_P
    system_reward: float
    done: bool
    diagnostics: dict = field(default_factory=dict)


def observe(p_c, v_ctrl, capacity) -> np.ndarray:
    """Per-agent observations from applied P setpoints and voltages.

    s_P lies in [-1, 0] for every feasible setpoint; s_V is in [-1, 1] exactly
    when the voltage is within 0.05 p.u. of nominal.
    """
    p_c = np.asarray(p_c, dtype=float)
    s_p = p_c / (P_CAP_FRACTION * np.asarray(capacity, dtype=float)) - 1.0
    s_v = (1.0 - np.asarray(v_ctrl, dtype=float)) / 0.05
    return np.stack([s_p, s_v], axis=-1)


def project_setpoints(p_req, q_req, capacity, p_env):
    """Project requested setpoints onto the inverter feasible set, exactly.

    P clamps to [0, min(p_env, 0.9 S)], then Q clamps to the remaining circle
    capacity +-sqrt(S^2 - P^2). sqrt can round up by an ulp, so q_max is walked
    down with nextafter until P^2 + Q^2 <= S^2 holds in float64 arithmetic:
    the feasibility invariant is exact, not approximate.
    """
    s = np.asarray(capacity, dtype=float)
    cap = np.minimum(np.asarray(p_env, dtype=float), P_CAP_FRACTION * s)
    p = np.clip(np.asarray(p_req, dtype=float), 0.0, cap)
    headroom = s * s - p * p
    q_max = np.sqrt(headroom)
    bad = (q_max * q_max > headroom) | (p * p + q_max * q_max > s * s)
    while np.any(bad):
        q_max = np.where(bad, np.nextafter(q_max, 0.0), q_max)
        bad = (q_max * q_max > headroom) | (p * p + q_max * q_max > s * s)
    q = np.clip(np.asarray(q_req, dtype=float), -q_max, q_max)
    return p, q


def project_setpoint(p_req, q_req, s_kva, p_env):
    """Scalar convenience wrapper around project_setpoints."""
    p, q = project_setpoints(p_req, q_req, s_kva, p_env)
    return float(p), float(q)


def apply_actions(setpoints, actions, capacity, p_env, load_delta=None,
                  episode: EpisodeConfig = EpisodeConfig()):
    """Integral-controller update (one step of the setpoint recursion).

    setpoints: (p_c, q_c) currently applied; actions: (n, 2) in [-1, 1];
    load_delta: (dP_l, dQ_l) measured local net-load change since the previous
    step, or None for zero. Returns projected (p_new, q_new).
    """
    p_c, q_c = setpoints
    a = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
    s = np.asarray(capacity, dtype=float)
    d_p = np.zeros_like(p_c) if load_delta is None else np.asarray(load_delta[0], float)
    d_q = np.zeros_like(q_c) if load_delta is None else np.asarray(load_delta[1], float)
    p_req = p_c + episode.dp_fraction * s * a[:, 0] + d_p
    q_req = q_c + episode.dq_fraction * s * a[:, 1] + d_q
    return project_setpoints(p_req, q_req, s, p_env)


def reward(v_ctrl, p_c, capacity, config: RewardConfig):
    """Per-bus rewards R_V + mu*R_P and their mean, the system reward R_t.

    R_V = min(delta - |1 - V|, 0)/0.05 penalizes band violations on the same
    1/0.05 scale regardless of delta; R_P = P_c/(0.9 S) rewards drawn power.
    """
    v = np.asarray(v_ctrl, dtype=float)
    p_c = np.asarray(p_c, dtype=float)
    s = np.asarray(capacity, dtype=float)
    r_v = np.minimum(config.delta - np.abs(1.0 - v), 0.0) / 0.05
    r_p = p_c / (P_CAP_FRACTION * s)
    per_bus = r_v + config.mu_vector(len(r_p)) * r_p
    return per_bus, float(per_bus.mean())


@dataclass
class EpisodeStats:
    """Aggregates run_episode/mppt_baseline report."""
    steps: int
    mean_reward: float
    max_voltage_deviation: float           # max over steps and buses of |1 - V|
    mean_power_ratio: float                # mean over steps of sum(P_c)/sum(p_env)
    final_voltage_profile: np.ndarray      # positive-sequence V per bus, last step
    final_power_ratio: np.ndarray          # P_c/p_env per controllable bus, last step
    trace: list | None = None              # rows for write_episode_trace


class FeederEnv:
    """Single-threaded stateful environment over an immutable NetworkModel.

    Separate instances (with independent RNG streams) may run concurrently on
    the same model. The env keeps a running count of feasibility checks and
    violations; the projection makes violations structurally impossible, and
    training asserts the counter stays zero.
    """

    def __init__(self, model: NetworkModel, reward_cfg: RewardConfig | None = None,
                 episode_cfg: EpisodeConfig | None = None, rng=None, seed=None,
                 solver_tol=powerflow.DEFAULT_TOL,
                 solver_max_iter=powerflow.DEFAULT_MAX_ITER):
        self.model = model
        self.reward_cfg = reward_cfg or RewardConfig()
        self.episode_cfg = episode_cfg or EpisodeConfig()
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.solver_tol = solver_tol
        self.solver_max_iter = solver_max_iter
        self.capacity = model.inverter_capacity()
        self.state: GridState | None = None
        self.feasibility_checks = 0
        self.feasibility_violations = 0

        st = powerflow.structure(model)
        n_nodes = len(st.nodes)
        # injection assembly constants: load scatter and inverter phase split
        self._node_of = st.index
        self._ctrl_pos = np.array([model.bus_index[i] for i in model.controllable])
        self._inv_split = np.zeros((n_nodes, model.n_agents))
        for k, bid in enumerate(model.controllable):
            bus = model.bus(bid)
            for ph in bus.phases:
                self._inv_split[st.index[(bid, ph)], k] = 1.0 / len(bus.phases)

    # -- episode mechanics ----------------------------------------------------

    def _load_injection(self, scenario: Scenario) -> np.ndarray:
        st = powerflow.structure(self.model)
        s = np.zeros(len(st.nodes), dtype=complex)
        for b, kw, kvar in zip(self.model.buses, scenario.load_kw, scenario.load_kvar):
            for ph, p, q in zip(b.phases, kw, kvar):
                s[st.index[(b.id, ph)]] = -(p + 1j * q)
        return s / self.model.base_kva

    def _solve(self, p_c, q_c, warm=None) -> powerflow.VoltageSolution:
        inj = self._load_pu + self._inv_split @ (p_c + 1j * q_c) / self.model.base_kva
        try:
            return powerflow.solve(self.model, inj, initial_guess=warm,
                                   tol=self.solver_tol, max_iter=self.solver_max_iter)
        except powerflow.PowerFlowDiverged as e:
            step = self.state.step if self.state is not None else 0
            raise EpisodeAborted(step, e.residual) from e

    def _check_feasible(self, p_c, q_c, p_env):
        s = self.capacity
        self.feasibility_checks += 1
        ok = (np.all(p_c * p_c + q_c * q_c <= s * s)
              and np.all(p_c >= 0.0)
              and np.all(p_c <= np.minimum(p_env, P_CAP_FRACTION * s)))
        if not ok:
            self.feasibility_violations += 1

    def _net_load(self, scenario: Scenario):
        kw = np.array([np.sum(scenario.load_kw[i]) for i in self._ctrl_pos])
        kvar = np.array([np.sum(scenario.load_kvar[i]) for i in self._ctrl_pos])
        return kw, kvar

    def reset(self, scenario: Scenario | None = None) -> np.ndarray:
        """Start an episode; returns the initial (n, 2) observations."""
        if scenario is None:
            scenario = sample_scenario(self.model, self.rng)
        self._load_pu = self._load_injection(scenario)
        self._p_env = np.asarray(scenario.p_env, dtype=float)
        p0, q0 = project_setpoints(self._p_env, np.zeros(self.model.n_agents),
                                   self.capacity, self._p_env)
        self._check_feasible(p0, q0, self._p_env)
        self.state = GridState(scenario, None, p0, q0)
        self.state.solution = self._solve(p0, q0)
        self._prev_net_load = self._net_load(scenario)
        return self._observations()

    def _v_ctrl(self):
        profile = powerflow.positive_sequence_profile(self.state.solution)
        return profile, profile[self._ctrl_pos]

    def _observations(self):
        _, v = self._v_ctrl()
        return observe(self.state.p_c, v, self.capacity)

    def step(self, actions) -> StepResult:
        """Apply one joint action; returns observations of the new state.

        Raises EpisodeAborted if the commanded operating point collapses the
        power flow.
        """
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        st = self.state
        net = self._net_load(st.scenario)
        load_delta = (net[0] - self._prev_net_load[0], net[1] - self._prev_net_load[1])
        self._prev_net_load = net
        p_new, q_new = apply_actions((st.p_c, st.q_c), actions, self.capacity,
                                     self._p_env, load_delta, self.episode_cfg)
        self._check_feasible(p_new, q_new, self._p_env)
        st.solution = self._solve(p_new, q_new, warm=st.solution)
        st.p_c, st.q_c = p_new, q_new
        st.step += 1
        profile, v = self._v_ctrl()
        per_bus, r_t = reward(v, p_new, self.capacity, self.reward_cfg)
        p_avail = self._p_env.sum()
        result = StepResult(
            observations=observe(p_new, v, self.capacity),
            rewards=per_bus,
            system_reward=r_t,
            done=st.step >= self.episode_cfg.horizon,
            diagnostics={
                "max_voltage_deviation": float(np.max(np.abs(1.0 - profile))),
                "power_ratio": float(st.p_c.sum() / p_avail) if p_avail > 0 else 1.0,
            })
        return result


def _ratio(p_c, p_env):
    return np.where(p_env > 0, p_c / np.where(p_env > 0, p_env, 1.0), 1.0)


def run_episode(env: FeederEnv, policy, in_training: bool, buffer=None,
                scenario: Scenario | None = None, collect_trace=False) -> EpisodeStats:
    """Run one full-horizon episode.

    in_training: sample actions stochastically and append every transition to
    buffer; otherwise act deterministically and leave the buffer untouched.
    The policy object must provide act(flat_observation, stochastic, rng) ->
    (clipped_action, per_agent_log_probs, raw_action); the raw pre-clip sample
    is what lands in the buffer so importance ratios stay well-defined.
    """
    obs = env.reset(scenario)
    cfg = env.episode_cfg
    stats_rewards = np.empty(cfg.horizon)
    max_dev = 0.0
    ratio_sum = 0.0
    trace = [] if collect_trace else None
    for t in range(cfg.horizon):
        flat = obs.reshape(-1)
        action, log_probs, raw = policy.act(flat, stochastic=in_training, rng=env.rng)
        result = env.step(action.reshape(env.model.n_agents, 2))
        if in_training and buffer is not None:
            buffer.append(flat, raw, log_probs, result.system_reward, result.done)
        stats_rewards[t] = result.system_reward
        max_dev = max(max_dev, result.diagnostics["max_voltage_deviation"])
        ratio_sum += result.diagnostics["power_ratio"]
        if collect_trace:
            _trace_rows(trace, env)
        obs = result.observations
    state = env.state
    profile = powerflow.positive_sequence_profile(state.solution)
    return EpisodeStats(
        steps=cfg.horizon,
        mean_reward=float(stats_rewards.mean()),
        max_voltage_deviation=max_dev,
        mean_power_ratio=ratio_sum / cfg.horizon,
        final_voltage_profile=profile,
        final_power_ratio=_ratio(state.p_c, np.asarray(state.scenario.p_env, dtype=float)),
        trace=trace)


def _trace_rows(trace, env: FeederEnv):
    state = env.state
    _, v = env._v_ctrl()
    cfg = env.reward_cfg
    r_v = np.minimum(cfg.delta - np.abs(1.0 - v), 0.0) / 0.05
    r_p = state.p_c / (P_CAP_FRACTION * env.capacity)
    for k, bid in enumerate(env.model.controllable):
        trace.append((state.step, bid, v[k], state.p_c[k], state.q_c[k],
                      state.scenario.p_env[k], r_v[k], r_p[k]))


class _MpptPolicy:
    """Holds setpoints at the MPPT start by commanding zero increments."""

    def __init__(self, n):
        self.n = n

    def act(self, flat_obs, stochastic, rng):
        a = np.zeros(2 * self.n)
        return a, np.zeros(self.n), a


def mppt_baseline(model: NetworkModel, scenario: Scenario,
                  reward_cfg: RewardConfig | None = None,
                  episode_cfg: EpisodeConfig | None = None,
                  collect_trace=False) -> EpisodeStats:
    """Episode statistics for the conventional controller: every step holds
    P_c = min(p_env, 0.9 S) and Q_c = 0."""
    env = FeederEnv(model, reward_cfg, episode_cfg, seed=0)
    return run_episode(env, _MpptPolicy(model.n_agents), in_training=False,
                       scenario=scenario, collect_trace=collect_trace)


TRACE_COLUMNS = ("step", "bus", "V_posseq", "P_c", "Q_c", "p_env", "R_V", "R_P")


def write_episode_trace(path, trace) -> None:
    """Write trace rows (from run_episode(collect_trace=True)) as CSV.

    Floats are emitted with repr so the file parses back losslessly.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row[0], row[1]] + [repr(float(x)) for x in row[2:]])
