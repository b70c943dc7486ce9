"""Hybrid implicit-feedback recommender matching patients to primary-care
doctors, with trust-weighted training and history-aware request routing."""

from .baseline import PopularityTable, heuristic_recommend
from .errors import (
    ConfigError,
    DocmatchError,
    NumericalError,
    SchemaError,
    ValidationError,
)
from .evaluation import (
    EvalReport,
    EvalRow,
    GridCell,
    GridResult,
    TemporalFold,
    grid_search,
    hit_rate_at_n,
    precision_at_n,
    run_comparison,
    temporal_folds,
)
from .ingest import (
    EpisodeRecord,
    FeatureAssignments,
    FeatureConfig,
    InteractionLog,
    Schema,
    build_features,
    clean,
    load_episodes,
)
from .model import (
    EpochStats,
    HybridModel,
    Hyperparams,
    ScoredDoctor,
    fit,
    stable_sigmoid,
)
from .router import USE_CASES, classify, recommend
from .synth import SynthConfig, synth_generate, write_affinity
from .trust import TrustWeights, trust_matrix, trust_oracle, trust_vector, yearly_shares

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DocmatchError",
    "EpisodeRecord",
    "EpochStats",
    "EvalReport",
    "EvalRow",
    "FeatureAssignments",
    "FeatureConfig",
    "GridCell",
    "GridResult",
    "HybridModel",
    "Hyperparams",
    "InteractionLog",
    "NumericalError",
    "PopularityTable",
    "Schema",
    "SchemaError",
    "ScoredDoctor",
    "SynthConfig",
    "TemporalFold",
    "TrustWeights",
    "USE_CASES",
    "ValidationError",
    "build_features",
    "classify",
    "clean",
    "fit",
    "grid_search",
    "heuristic_recommend",
    "hit_rate_at_n",
    "load_episodes",
    "precision_at_n",
    "recommend",
    "run_comparison",
    "stable_sigmoid",
    "synth_generate",
    "temporal_folds",
    "trust_matrix",
    "trust_oracle",
    "trust_vector",
    "write_affinity",
    "yearly_shares",
]
