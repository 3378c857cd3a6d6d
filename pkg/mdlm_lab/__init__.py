__version__ = "0.1.0"

# pylint: disable=wrong-import-position
from .charts import Chart, ChartType, CompositeChart, LineChart, parse_chart, render_svg
from .common.errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    EnumerationError,
    LabError,
    ParseError,
    VersionError,
)
from .core import NoiseSchedule, ScheduleKind, SequenceState, VocabSpec, forward_mask, schedule_alpha, to_window
from .corpus import (
    CorpusModel,
    Example,
    PriorTable,
    compute_prior,
    design_corpus_model,
    generate_corpus,
    load_corpus,
    oracle_ppl,
    oracle_score,
    save_corpus,
)
from .decoding import (
    BaseSampler,
    ConvSettings,
    DecodePolicy,
    Direction,
    RepPenaltySettings,
    SemiARSettings,
    TraceLog,
    decode,
    decode_batch,
)
from .denoiser import (
    DenoiserParams,
    LinearDenoiser,
    OracleDenoiser,
    PosteriorMethod,
    TrainConfig,
    load_params,
    nelbo_loss,
    save_params,
    train_sft,
)
from .hazard import HazardFamily, HazardKind, q_conv, q_default, q_semi_ar, verify_ordering
from .metrics import candidate_zone, inlier_rate, mean_log_prior, speed_report, validate_trace
from .protocols import Denoiser
from .r2ft import CorruptionConfig, R2FTConfig, build_pair, corrupt, r2ft_loss, train_r2ft

__all__ = [
    "__version__",
    "LabError",
    "DomainError",
    "EnumerationError",
    "ConfigError",
    "ParseError",
    "VersionError",
    "DivergenceError",
    "VocabSpec",
    "ScheduleKind",
    "NoiseSchedule",
    "SequenceState",
    "schedule_alpha",
    "forward_mask",
    "to_window",
    "Example",
    "CorpusModel",
    "PriorTable",
    "design_corpus_model",
    "generate_corpus",
    "compute_prior",
    "oracle_score",
    "oracle_ppl",
    "save_corpus",
    "load_corpus",
    "Denoiser",
    "DenoiserParams",
    "LinearDenoiser",
    "OracleDenoiser",
    "PosteriorMethod",
    "TrainConfig",
    "nelbo_loss",
    "train_sft",
    "save_params",
    "load_params",
    "BaseSampler",
    "Direction",
    "ConvSettings",
    "SemiARSettings",
    "RepPenaltySettings",
    "DecodePolicy",
    "TraceLog",
    "decode",
    "decode_batch",
    "CorruptionConfig",
    "R2FTConfig",
    "corrupt",
    "build_pair",
    "r2ft_loss",
    "train_r2ft",
    "candidate_zone",
    "inlier_rate",
    "mean_log_prior",
    "speed_report",
    "validate_trace",
    "HazardKind",
    "HazardFamily",
    "q_default",
    "q_semi_ar",
    "q_conv",
    "verify_ordering",
    "ChartType",
    "Chart",
    "LineChart",
    "CompositeChart",
    "parse_chart",
    "render_svg",
]
