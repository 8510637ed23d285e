"""
Sprite Story Package

Character-consistent story generation on a synthetic sprite benchmark: a positional
perceiver resampler, decoupled cross-attention with LoRA, an attention-region loss
and pose-decoupled diffusion training, all small enough to train on a desk.
"""

# Package metadata
__version__ = "0.1.0"
__author__ = "JOCRIX"
__description__ = "Character-consistent sprite story generation with region-supervised image prompts"

# Import all main classes for easy access
from .config import EvalConfig, ModelConfig, PretrainConfig, TrainConfig
from .errors import CheckpointError, NumericFailure, SpriteStoryError, ValidationError
from .synthdata import Scene, SceneDataset, SceneSpec, generate_dataset, generate_scene
from .encoders import ToyEncoders
from .ppr import ConditioningBundle, PositionalPerceiverResampler
from .attention import DecoupledCrossAttention, LoRALinear
from .backbone import DDIMSampler, LatentDiffusion
from .trainer import StoryModel, TrainingManager
from .pretraining import BasePretrainer, EncoderPretrainer
from .evaluation import EvalReport, Evaluation
from .workspace import WorkspaceManager

# All exports
__all__ = [
    "EvalConfig",
    "ModelConfig",
    "PretrainConfig",
    "TrainConfig",
    "CheckpointError",
    "NumericFailure",
    "SpriteStoryError",
    "ValidationError",
    "Scene",
    "SceneDataset",
    "SceneSpec",
    "generate_dataset",
    "generate_scene",
    "ToyEncoders",
    "ConditioningBundle",
    "PositionalPerceiverResampler",
    "DecoupledCrossAttention",
    "LoRALinear",
    "DDIMSampler",
    "LatentDiffusion",
    "StoryModel",
    "TrainingManager",
    "BasePretrainer",
    "EncoderPretrainer",
    "EvalReport",
    "Evaluation",
    "WorkspaceManager",
]
