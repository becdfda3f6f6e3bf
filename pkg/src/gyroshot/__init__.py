"""Adaptive point-to-set metric learning on the Poincare ball.

Few-shot episodic classification where each sample is a set of patch
embeddings living in a hyperbolic ball. Query-to-class distances are convex
combinations of learned set-to-set distances, with the mixing weights
produced by a signature/relation network pair.
"""

from .autodiff import Tape, Var, backward, finite_diff_check
from .episodes import (
    Dataset,
    Episode,
    EpisodeSpec,
    SyntheticConfig,
    generate_synthetic,
    load_features,
    sample_episode,
    save_dataset,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DomainError,
    GyroshotError,
    InsufficientDataError,
    ShapeError,
    TapeError,
    TrainingDivergedError,
)
from .geometry import (
    BallConfig,
    TangentVec,
    clip_to_ball,
    conformal_factor,
    einstein_midpoint,
    exp_map,
    flat_distance,
    geodesic_distance,
    klein_to_poincare,
    log_map,
    mobius_add,
    poincare_to_klein,
)
from .metrics import (
    FeatureMap,
    adaptive_combine,
    adaptive_p2s,
    hausdorff_bidirectional,
    hausdorff_one_sided,
    p2s_max,
    p2s_min,
    pairwise_matrix,
    s2s_flat_mean,
    s2s_learned,
)
from .netmods import (
    Encoder,
    ModelBundle,
    ModelConfig,
    RelationGenerator,
    S2SNetwork,
    SignatureGenerator,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    EvalReport,
    TrainConfig,
    TrainResult,
    VARIANTS,
    episode_loss,
    evaluate,
    run_robustness,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BallConfig",
    "ConfigError",
    "DataFormatError",
    "Dataset",
    "DomainError",
    "Encoder",
    "Episode",
    "EpisodeSpec",
    "EvalReport",
    "FeatureMap",
    "GyroshotError",
    "InsufficientDataError",
    "ModelBundle",
    "ModelConfig",
    "RelationGenerator",
    "S2SNetwork",
    "ShapeError",
    "SignatureGenerator",
    "SyntheticConfig",
    "TangentVec",
    "Tape",
    "TapeError",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "VARIANTS",
    "Var",
    "adaptive_combine",
    "adaptive_p2s",
    "backward",
    "clip_to_ball",
    "conformal_factor",
    "einstein_midpoint",
    "episode_loss",
    "evaluate",
    "exp_map",
    "finite_diff_check",
    "flat_distance",
    "generate_synthetic",
    "geodesic_distance",
    "hausdorff_bidirectional",
    "hausdorff_one_sided",
    "klein_to_poincare",
    "load_checkpoint",
    "load_features",
    "log_map",
    "mobius_add",
    "p2s_max",
    "p2s_min",
    "pairwise_matrix",
    "poincare_to_klein",
    "run_robustness",
    "s2s_flat_mean",
    "s2s_learned",
    "sample_episode",
    "save_checkpoint",
    "save_dataset",
    "train",
]
