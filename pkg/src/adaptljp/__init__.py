"""Reasoning-chain pipeline engine for legal judgment prediction."""

from .chain import (
    AskSummary,
    CandidateAssessment,
    ChainConfig,
    ChainMode,
    ChainResult,
    ChainRunner,
    DiscriminationRecord,
    Prediction,
    TemplateSet,
)
from .corpus import (
    Case,
    DefendantJudgment,
    IntervalScheme,
    LabelPool,
    TermValue,
    bucket_term,
    dataset_stats,
    load_dataset,
    parse_term_statement,
    term_interval_label,
)
from .gateway import (
    ChatRequest,
    ChatResponse,
    Decoding,
    EmbeddingVector,
    LlmGateway,
    Message,
    ScriptedChatBackend,
    ScriptedEmbeddingBackend,
)
from .labelmap import ChargeMapper, MappingOutcome, map_article, normalize_label
from .metrics import (
    MetricsReport,
    PredictionRecord,
    QuartileReport,
    difficulty_quartiles,
    evaluate_predictions,
    macro_prf,
    subset_accuracy,
    term_metrics,
)
from .synthesis import (
    TrainingMixture,
    TrajectorySample,
    TrajectorySynthesizer,
    build_mixture,
    emit_jsonl,
    load_mixture,
)

__version__ = "0.1.0"
