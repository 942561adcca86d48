"""Deep self-attentive knowledge tracing in numpy."""

from .datastore import (
    EncodedWindow,
    SyntheticSkillModel,
    UserSequence,
    Vocabulary,
    encode_interaction,
    generate_synthetic,
    parse_interaction_log,
    split_dataset,
    window_user,
)
from .evaluation import EvalReport, auc, evaluate, export_attention
from .model import ModelConfig, forward, init_params, param_count
from .training import TrainConfig, fit

__version__ = "0.1.0"
