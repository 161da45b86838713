"""Split-learning NeRF training with gradient-matching attacks and a decaying-noise defense."""

from .attack import AttackConfig, PoseSearchSpec, SurrogateAttack, pose_grid_search, search_space_size
from .config import ExperimentConfig, load_config, train_preset
from .defense import DefenseConfig, NoiseSchedule, noise_std, perturb_gradients, perturb_labels
from .metrics import metric_report, psnr, ssim, to_grayscale
from .nerf import ClientModel, ModelConfig, NerfModel, ServerModel
from .scene import CameraPose, default_scene, generate_rays, oracle_render, pose_ring
from .training import TrainConfig, train_monolithic, train_split

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "CameraPose", "ClientModel", "DefenseConfig", "ExperimentConfig", "ModelConfig",
    "NerfModel", "NoiseSchedule", "PoseSearchSpec", "ServerModel", "SurrogateAttack", "TrainConfig",
    "default_scene", "generate_rays", "load_config", "metric_report", "noise_std", "oracle_render",
    "perturb_gradients", "perturb_labels", "pose_grid_search", "pose_ring", "psnr", "search_space_size",
    "ssim", "to_grayscale", "train_monolithic", "train_preset", "train_split",
]
