"""Batch command-line front end: train, eval, compare, gen-feeder.

Every run writes its resolved configuration next to its outputs, so a run
directory is self-describing and re-running with the recorded settings
reproduces the metrics bit for bit. All emitted tables are header-first CSV.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime (solver or
training) error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, asdict

import numpy as np

from . import env, grid, nn, powerflow, ppo

CHECKPOINT_NAME = "checkpoint.pvck"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.json"
HISTOGRAM_BINS = 10


class ConfigError(ValueError):
    """Bad flag values or incompatible inputs; maps to exit code 1."""


@dataclass
class RunConfig:
    """Resolved settings for one training run, serialized for provenance."""

    grid: str
    seed: int
    mu: float
    delta: float
    horizon: int
    iterations: int
    steps_per_update: int
    minibatch_size: int
    epochs: int
    clip_eps: float
    gamma: float
    gae_lambda: float
    entropy_coef: float
    value_coef: float
    learning_rate: float
    normalize_advantages: bool
    log_std_init: float
    mode: str
    workers: int
    out: str

    def validate(self):
        if self.mu < 0:
            raise ConfigError("--mu must be >= 0")
        if not 0 < self.delta < 1:
            raise ConfigError("--delta must be in (0, 1)")
        if self.iterations < 0:
            raise ConfigError("--iters must be >= 0")
        if self.steps_per_update < 1:
            raise ConfigError("--steps-per-update must be >= 1")
        if self.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if self.mode not in ("decentralized", "centralized"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def train_config(self) -> ppo.TrainConfig:
        return ppo.TrainConfig(
            iterations=self.iterations,
            mode=self.mode,
            workers=self.workers,
            ppo=ppo.PpoConfig(
                steps_per_update=self.steps_per_update,
                minibatch_size=self.minibatch_size,
                epochs=self.epochs,
                clip_eps=self.clip_eps,
                gamma=self.gamma,
                gae_lambda=self.gae_lambda,
                entropy_coef=self.entropy_coef,
                value_coef=self.value_coef,
                learning_rate=self.learning_rate,
                normalize_advantages=self.normalize_advantages,
                log_std_init=self.log_std_init,
            ),
            reward=env.RewardConfig(delta=self.delta, mu=self.mu),
            episode=env.EpisodeConfig(horizon=self.horizon),
        )


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags by default; this artifact reserves 2 for
    runtime failures, so usage errors are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v)
                              for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_model(path) -> grid.NetworkModel:
    return grid.load_network(path)


def _load_compatible(checkpoint_path, grid_path):
    bundle = ppo.load_checkpoint(checkpoint_path)
    model = _load_model(grid_path)
    if list(bundle.policy_set.bus_ids) != list(model.controllable):
        raise ConfigError(
            f"checkpoint controls buses {bundle.policy_set.bus_ids} but grid "
            f"{grid_path} has controllable buses {model.controllable}")
    return bundle, model


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    config = RunConfig(
        grid=args.grid, seed=args.seed, mu=args.mu, delta=args.delta,
        horizon=args.horizon, iterations=args.iters,
        steps_per_update=args.steps_per_update, minibatch_size=16, epochs=10,
        clip_eps=0.2, gamma=0.99, gae_lambda=0.95, entropy_coef=0.0,
        value_coef=0.5, learning_rate=nn.ADAM_LR, normalize_advantages=True,
        log_std_init=ppo.LOG_STD_INIT, mode=args.mode, workers=args.workers,
        out=args.out)
    config.validate()
    model = _load_model(config.grid)
    os.makedirs(config.out, exist_ok=True)
    _write_json(os.path.join(config.out, CONFIG_NAME),
                {"command": "train", **asdict(config)})

    def progress(row):
        print(f"iter {row['iteration']}/{config.iterations} "
              f"reward={row['mean_episode_reward']:.4f} "
              f"kl={row['mean_kl']:.5f} "
              f"max_dev={row['max_voltage_deviation']:.4f}", flush=True)

    result = ppo.train(model, config.train_config(), config.seed,
                       progress=progress)
    ppo.write_metrics(os.path.join(config.out, METRICS_NAME), result.metrics)
    train_cfg = config.train_config()
    ppo.save_checkpoint(os.path.join(config.out, CHECKPOINT_NAME),
                        result.policy_set, result.critic, result.actor_opts,
                        result.critic_opt, result.rng,
                        reward_cfg=train_cfg.reward,
                        episode_cfg=train_cfg.episode,
                        extra={"seed": config.seed, "mode": config.mode})
    per_agent = (result.policy_set.actor_parameter_count()
                 // result.policy_set.n_agents)
    print(f"mode={config.mode}: {result.policy_set.actor_parameter_count()} "
          f"actor parameters ({per_agent} per actor), "
          f"{result.policy_set.log_std_parameter_count()} log-std parameters, "
          f"{nn.count_parameters(result.critic.sizes)} critic parameters")
    if result.feasibility_checks > 0:
        print(f"feasibility: {result.feasibility_violations} violations in "
              f"{result.feasibility_checks} checked steps")
    else:
        # worker processes audit their own episodes but counters stay local
        print("feasibility: audited in workers (train with --workers 1 for "
              "in-process counts)")
    print(f"wrote {config.out}/{METRICS_NAME} and {config.out}/{CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    bundle, model = _load_compatible(args.checkpoint, args.grid)
    reward_cfg = bundle.reward_cfg
    if args.delta is not None or args.mu is not None:
        reward_cfg = env.RewardConfig(
            delta=args.delta if args.delta is not None else reward_cfg.delta,
            mu=args.mu if args.mu is not None else reward_cfg.mu)
    os.makedirs(args.out, exist_ok=True)
    rows, aggregate, traces = ppo.evaluate(
        model, bundle.policy_set, args.scenarios, args.seed,
        reward_cfg=reward_cfg, episode_cfg=bundle.episode_cfg,
        collect_traces=True)
    for row, trace in zip(rows, traces):
        env.write_episode_trace(
            os.path.join(args.out, f"trace_{row['scenario']:03d}.csv"), trace)
    _write_csv(os.path.join(args.out, "summary.csv"),
               ("scenario", "mean_reward", "max_voltage_deviation",
                "mean_power_ratio", "median_power_ratio"),
               [(r["scenario"], r["mean_reward"], r["max_voltage_deviation"],
                 r["mean_power_ratio"], r["median_power_ratio"]) for r in rows])
    _write_json(os.path.join(args.out, "summary.json"), {
        "command": "eval", "grid": args.grid, "checkpoint": args.checkpoint,
        "seed": args.seed, "delta": reward_cfg.delta,
        "mu": reward_cfg.mu if np.isscalar(reward_cfg.mu) else list(reward_cfg.mu),
        **aggregate})
    print(f"evaluated {aggregate['scenarios']} scenarios: "
          f"max |1-V| = {aggregate['max_voltage_deviation']:.5f}, "
          f"mean P_c/p_env = {aggregate['mean_power_ratio']:.4f}")
    print(f"wrote {args.out}/summary.json")
    return 0


def _final_ratio_histogram(ratios):
    """Counts of final P_c/p_env per controllable bus over [0, 1] bins."""
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    counts, _ = np.histogram(np.clip(ratios, 0.0, 1.0), bins=edges)
    return edges, counts


def cmd_compare(args) -> int:
    bundle, model = _load_compatible(args.checkpoint, args.grid)
    reward_cfg = bundle.reward_cfg
    if args.delta is not None or args.mu is not None:
        reward_cfg = env.RewardConfig(
            delta=args.delta if args.delta is not None else reward_cfg.delta,
            mu=args.mu if args.mu is not None else reward_cfg.mu)
    episode_cfg = bundle.episode_cfg
    os.makedirs(args.out, exist_ok=True)

    scenarios = [("deep", grid.deep_pv_scenario(model))]
    for k in range(args.scenarios):
        scenarios.append(
            (f"s{k:03d}", grid.sample_scenario(
                model, rng=np.random.default_rng(
                    np.random.SeedSequence([args.seed, 5, k])))))

    runner = env.FeederEnv(model, reward_cfg=reward_cfg,
                           episode_cfg=episode_cfg, seed=0)
    summary = []
    for tag, scenario in scenarios:
        base = env.mppt_baseline(model, scenario, reward_cfg=reward_cfg,
                                 episode_cfg=episode_cfg)
        rl = env.run_episode(runner, bundle.policy_set, in_training=False,
                             scenario=scenario)
        bus_ids = [b.id for b in model.buses]
        _write_csv(os.path.join(args.out, f"profile_{tag}.csv"),
                   ("bus", "v_baseline", "v_policy"),
                   [(bus_ids[i], float(base.final_voltage_profile[i]),
                     float(rl.final_voltage_profile[i]))
                    for i in range(len(bus_ids))])
        _write_csv(os.path.join(args.out, f"ratio_{tag}.csv"),
                   ("bus", "ratio_baseline", "ratio_policy"),
                   [(bid, float(base.final_power_ratio[k]),
                     float(rl.final_power_ratio[k]))
                    for k, bid in enumerate(model.controllable)])
        summary.append({
            "scenario": tag,
            "baseline_max_voltage_deviation": base.max_voltage_deviation,
            "policy_max_voltage_deviation": rl.max_voltage_deviation,
            "baseline_mean_power_ratio": float(np.mean(base.final_power_ratio)),
            "policy_mean_power_ratio": float(np.mean(rl.final_power_ratio)),
            "policy_median_power_ratio": float(np.median(rl.final_power_ratio)),
        })
        if tag == "deep":
            edges, counts = _final_ratio_histogram(rl.final_power_ratio)
            _write_csv(os.path.join(args.out, "histogram.csv"),
                       ("bin_low", "bin_high", "count"),
                       [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
                        for i in range(len(counts))])
    _write_json(os.path.join(args.out, "summary.json"), {
        "command": "compare", "grid": args.grid, "checkpoint": args.checkpoint,
        "seed": args.seed, "delta": reward_cfg.delta, "scenarios": summary})
    deep = summary[0]
    print(f"deep-PV scenario: baseline max |1-V| = "
          f"{deep['baseline_max_voltage_deviation']:.5f}, policy max |1-V| = "
          f"{deep['policy_max_voltage_deviation']:.5f}, policy median "
          f"P_c/p_env = {deep['policy_median_power_ratio']:.4f}")
    print(f"wrote {args.out}/summary.json")
    return 0


def cmd_gen_feeder(args) -> int:
    if args.buses < 2:
        raise ConfigError("need at least 2 buses (substation plus one)")
    if not 1 <= args.inverters <= args.buses - 1:
        raise ConfigError("inverter count must be in [1, buses - 1]")
    model = grid.generate_synthetic_feeder(args.buses, args.inverters,
                                           seed=args.seed,
                                           phase_mode=args.phases)
    grid.save_network(model, args.out)
    print(f"wrote {args.out}: {len(model.buses)} buses, "
          f"{model.n_agents} inverters")
    return 0


# ---------------------------------------------------------------------------
# parser wiring

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvgridrl",
                     description="Decentralized PPO voltage control on radial "
                                 "feeders: train, evaluate, compare, generate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy set with PPO")
    p_train.add_argument("--grid", required=True, help="grid JSON file")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--mu", type=float, default=0.1,
                         help="curtailment reward weight (default 0.1)")
    p_train.add_argument("--delta", type=float, default=0.05,
                         help="voltage tolerance band (default 0.05)")
    p_train.add_argument("--iters", type=int, default=50,
                         help="PPO iterations (default 50)")
    p_train.add_argument("--steps-per-update", type=int, default=2048,
                         help="transitions per update, rounded up to whole "
                              "episodes (default 2048)")
    p_train.add_argument("--mode", choices=("decentralized", "centralized"),
                         default="decentralized")
    p_train.add_argument("--out", default="run", help="output directory")
    p_train.add_argument("--workers", type=int, default=1,
                         help="parallel rollout workers (default 1)")
    p_train.add_argument("--horizon", type=int, default=100,
                         help=argparse.SUPPRESS)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="deterministic policy evaluation")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--grid", required=True)
    p_eval.add_argument("--scenarios", type=int, default=5,
                        help="number of sampled scenarios (default 5)")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--mu", type=float, default=None)
    p_eval.add_argument("--delta", type=float, default=None)
    p_eval.add_argument("--out", default="eval", help="output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare",
                           help="policy vs MPPT baseline on shared scenarios")
    p_cmp.add_argument("--checkpoint", required=True)
    p_cmp.add_argument("--grid", required=True)
    p_cmp.add_argument("--scenarios", type=int, default=0,
                       help="sampled scenarios besides the deep-PV stress "
                            "scenario (default 0)")
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.add_argument("--mu", type=float, default=None)
    p_cmp.add_argument("--delta", type=float, default=None)
    p_cmp.add_argument("--out", default="compare", help="output directory")
    p_cmp.set_defaults(func=cmd_compare)

    p_gen = sub.add_parser("gen-feeder", help="generate a synthetic feeder")
    p_gen.add_argument("buses", type=int, help="total bus count incl. substation")
    p_gen.add_argument("inverters", type=int, help="controllable bus count")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--phases", choices=("single", "three"),
                       default="single")
    p_gen.add_argument("--out", default="feeder.json", help="output file")
    p_gen.set_defaults(func=cmd_gen_feeder)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, grid.GridFileError, grid.ValidationError,
            nn.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (powerflow.PowerFlowDiverged, env.EpisodeAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
