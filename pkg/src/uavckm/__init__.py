"""UAV aerial-base-station mission simulation with a learned channel map."""

__version__ = "0.1.0"

from .channel import LinkBudgetParams, expected_gain_los_model, los_probability, rate_bps, true_gain
from .ckm import ChannelDataset, CkmHyper, CkmModel, collect_dataset, predict, predict_interval, train, update_incremental
from .env import CommEnv, EnvConfig, PredictorMode
from .geometry import Building, GroundUser, Vec3, World, WorldConfig, generate_world, segment_blocked
from .noise import CepModel, perturb
from .ppo import GaussianPolicy, PpoConfig, compute_advantages, ppo_update, sample_action, train_loop
from .scheduler import SchedulerConfig, schedule_power

__all__ = [
    "Building", "CepModel", "ChannelDataset", "CkmHyper", "CkmModel", "CommEnv",
    "EnvConfig", "GaussianPolicy", "GroundUser", "LinkBudgetParams", "PpoConfig",
    "PredictorMode", "SchedulerConfig", "Vec3", "World", "WorldConfig",
    "collect_dataset", "compute_advantages", "expected_gain_los_model",
    "generate_world", "los_probability", "perturb", "ppo_update", "predict",
    "predict_interval", "rate_bps", "sample_action", "schedule_power",
    "segment_blocked", "train", "train_loop", "true_gain", "update_incremental",
]
