"""Self-explaining LSTM next-activity prediction for business-process event logs."""

from .encoding import Dataset, EncodedInstance, EncodingSpec, encode_dataset, encode_prefix, fit_normalizers
from .eventlog import (
    Case,
    ColumnMap,
    Event,
    EventLog,
    PrefixRecord,
    SplitSpec,
    generate_prefixes,
    parse_csv,
    split_chronological,
)
from .evaluation import (
    EvalReport,
    Explanation,
    accuracy,
    explain_posthoc,
    explain_selfexplain,
    render_explanation,
    summarize,
    verify_explanations,
    verify_sufficiency,
)
from .model import ForwardOutputs, NapModelParams, forward, init_model, predict_class
from .posthoc import AnchorConfig, AnchorResult, estimate_precision, greedy_anchor_search
from .selfexplain import FeatureSampler, build_masked_input, dual_propagate, extract_subset, senn_losses
from .training import (
    Checkpoint,
    GridResult,
    TrainConfig,
    fit,
    grid_search,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
