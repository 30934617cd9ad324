"""Relational recurrent action forecasting on numpy: autodiff core, models, synthetic world, metrics."""
from .diffcore import DegenerateAttentionError, DimensionError, ParamStore, Tensor, no_grad
from .model import MODEL_VARIANTS, Model, ModelConfig, Prediction, load_checkpoint, save_checkpoint
from .synthworld import Episode, WorldConfig, clip_world, generate, generate_many, high_distractor_world
from .traineval import (
    AblationSettings, DivergenceError, EvalReport, Schedule, TrainConfig, accuracy_at_k, evaluate, map_at_t,
    run_ablation, train,
)

__all__ = [
    "AblationSettings", "DegenerateAttentionError", "DimensionError", "DivergenceError", "Episode", "EvalReport",
    "MODEL_VARIANTS", "Model", "ModelConfig", "ParamStore", "Prediction", "Schedule", "Tensor", "TrainConfig",
    "WorldConfig", "accuracy_at_k", "clip_world", "evaluate", "generate", "generate_many", "high_distractor_world",
    "load_checkpoint", "map_at_t", "no_grad", "run_ablation", "save_checkpoint", "train",
]
__version__ = "0.1.0"
