"""Cascaded root-cause localization and failure-type identification for microservices."""

__version__ = "0.1.0"

from .cascade import (
    CCLHModel,
    CCLHNet,
    DiagnosisResult,
    ModelConfig,
    TrainConfig,
    TrainLog,
    classify_failure,
    diagnose,
    fti_loss,
    rank,
    rcl_loss,
    score_instances,
    total_loss,
    train,
)
from .drain import Drain, ParserConfig, TemplateSet, mine_log_templates
from .encoder import GRUEncoder, ModalityFusion, fuse_modalities, gru_encode
from .errors import *  # noqa: F401,F403
from .hypergraph import (
    EDGE_TYPES,
    Hyperedge,
    Hypergraph,
    HypergraphEncoder,
    UniGATHE,
    build_hypergraph,
    hyperedge_embed,
    unigat_he_layer,
)
from .metrics import EvalReport, avg_at_k, evaluate, hit_ratio, split_dataset, weighted_prf
from .preprocess import (
    MODALITIES,
    FeatureSchema,
    NormStats,
    Preprocessor,
    WindowConfig,
    fit_schema,
    normalize,
    segment_windows,
    serialize_case,
)
from .simgen import ScenarioConfig, generate_case, generate_dataset, generate_topology
from .telemetry import (
    FailureCase,
    InstanceInfo,
    TelemetryBundle,
    Topology,
    index_topology,
    load_bundle,
    load_cases,
    load_dataset,
)
