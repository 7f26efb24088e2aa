"""Composed image retrieval at desk scale: token-fusion queries over a
synthetic attribute-grid world, trained contrastively in two stages."""

from .diffcore import Tape, Var, fd_check
from .encoders import (
    ModelSpec,
    TokenSequence,
    encode_text,
    encode_visual,
    init_encoder_store,
    pooled_feature,
    sinusoidal_positions,
)
from .errors import TmcirError
from .estimator import ComposedRetriever
from .evaluation import EvalReport, evaluate, run_ablation
from .fusion import FusionConfig, MatchSet, compose_query, match_pairs, similarity_matrix
from .losses import LossConfig, infonce
from .params import ParameterStore
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_alignment,
    train_fusion,
)
from .world import (
    AttributeGrid,
    Dataset,
    Edit,
    TripletSample,
    Vocabulary,
    WorldConfig,
    apply_instruction,
    corrupt_target,
    generate_dataset,
    read_dataset,
    write_dataset,
)

__all__ = [
    "AttributeGrid", "Checkpoint", "ComposedRetriever", "Dataset", "Edit",
    "EvalReport", "FusionConfig", "LossConfig", "MatchSet", "ModelSpec",
    "ParameterStore", "Tape", "TmcirError", "TokenSequence", "TrainConfig",
    "TripletSample", "Var", "Vocabulary", "WorldConfig", "apply_instruction",
    "compose_query", "corrupt_target", "encode_text", "encode_visual",
    "evaluate", "fd_check", "generate_dataset", "infonce",
    "init_encoder_store", "load_checkpoint", "match_pairs", "pooled_feature",
    "read_dataset", "run_ablation", "save_checkpoint", "similarity_matrix",
    "sinusoidal_positions", "train_alignment", "train_fusion", "write_dataset",
]

__version__ = "0.1.0"
