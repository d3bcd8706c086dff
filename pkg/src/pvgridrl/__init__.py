"""Decentralized PPO voltage control for PV-rich radial distribution feeders.

A desk-scale simulator and trainer: an unbalanced multi-phase power-flow
solver on radial networks, a per-inverter voltage-regulation MDP, and a
from-scratch PPO implementation where every controllable bus learns a tiny
local policy that acts on its own measurements only.
"""

from .grid import (Bus, GridFileError, InverterSpec, Line, NetworkModel,
                   Scenario, ValidationError, deep_pv_scenario,
                   generate_synthetic_feeder, load_bundled, load_network,
                   sample_scenario, save_network)
from .powerflow import (PowerFlowDiverged, VoltageSolution,
                        positive_sequence_magnitude,
                        positive_sequence_profile, solve,
                        total_power_balance)
from .env import (EpisodeAborted, EpisodeConfig, EpisodeStats, FeederEnv,
                  RewardConfig, StepResult, mppt_baseline, run_episode)
from .ppo import (ExperienceBuffer, PolicySet, PpoConfig, TrainConfig,
                  TrainResult, compute_gae, evaluate, load_checkpoint,
                  make_critic, ppo_loss, save_checkpoint, train, update)

__version__ = "0.1.0"

__all__ = [
    "Bus", "GridFileError", "InverterSpec", "Line", "NetworkModel",
    "Scenario", "ValidationError", "deep_pv_scenario",
    "generate_synthetic_feeder", "load_bundled", "load_network",
    "sample_scenario", "save_network",
    "PowerFlowDiverged", "VoltageSolution", "positive_sequence_magnitude",
    "positive_sequence_profile", "solve", "total_power_balance",
    "EpisodeAborted", "EpisodeConfig", "EpisodeStats", "FeederEnv",
    "RewardConfig", "StepResult", "mppt_baseline", "run_episode",
    "ExperienceBuffer", "PolicySet", "PpoConfig", "TrainConfig",
    "TrainResult", "compute_gae", "evaluate", "load_checkpoint",
    "make_critic", "ppo_loss", "save_checkpoint", "train", "update",
    "__version__",
]
