"""Cell-wise multi-scale classification over feature embeddings.

Two experts read each cell: a tissue-conditioned local expert over the
cell's own embedding and a context-fused global expert that adds a
neighborhood view. A learned gate mixes their probabilities per cell,
a calibrated safe policy restricts deployment to single-expert outputs,
and cohort projections map predictions into per-study label spaces.
"""

# Cap internal parallelism before numpy loads its BLAS: NUCLASS_THREADS=N
# bounds every backend's thread pool. This must run before the first numpy
# import anywhere in the package; if numpy is already loaded (embedding
# application imported it first), the cap has no effect.
import os as _os

_threads = _os.environ.get("NUCLASS_THREADS")
if _threads is not None:
    try:
        _n = max(1, int(_threads))
    except ValueError:
        raise RuntimeError(
            f"NUCLASS_THREADS must be an integer, got {_threads!r}") from None
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ[_var] = str(_n)
del _os, _threads

from . import autodiff  # noqa: E402
from .core import (  # noqa: E402
    DimensionError,
    check_simplex,
    entropy,
    layer_norm,
    log_softmax,
    margin,
    normalized_entropy,
    sigmoid,
    softmax,
    top1,
)
from .data import (  # noqa: E402
    CohortSplit,
    ConfigError,
    FeatureDataset,
    FeatureRecord,
    FormatError,
    SynthConfig,
    Taxonomy,
    class_counts,
    complementary_benchmark_config,
    generate,
    hard_class_config,
    load_records,
    save_records,
    split_dataset,
)
from .experts import (  # noqa: E402
    FiLMAdaptor,
    GlobalExpert,
    LocalExpert,
    class_balanced_ce,
    effective_number_weights,
    global_loss,
    local_aware_weight,
    smoothed_targets,
)
from .gate import (  # noqa: E402
    DROP_ONE_VARIANTS,
    GATE_STAT_NAMES,
    GateLossConfig,
    GateNet,
    SafeGateCalibration,
    adaptive_pos_weight,
    conflict_weight,
    fuse,
    fuse_t,
    gate_losses,
    gate_stats,
    load_calibration,
    safe_calibrate,
    safe_decide,
    save_calibration,
    select_thresholds,
    soft_target,
)
from .metrics import (  # noqa: E402
    MetricReport,
    auroc_ovr_macro,
    bootstrap_ci,
    brier,
    build_report,
    cluster_geometry,
    confusion,
    ece,
    f1_scores,
    format_ci,
    report_from_json_dict,
    report_to_csv,
    report_to_json,
    report_to_markdown,
)
from .projection import (  # noqa: E402
    BUILTIN_COHORTS,
    DROPPED,
    ProjectionError,
    ProjectionMatrix,
    build_matrix,
    cohort_matrix,
    load_projection,
    project,
    project_labels,
    projection_from_dict,
    save_projection,
)
from .seeding import substream  # noqa: E402
from .training import (  # noqa: E402
    AdamW,
    Checkpoint,
    NumericalError,
    ParamGroup,
    Schedule,
    StagePlan,
    ablation_plan,
    alpha_at,
    desk_plan,
    gate_from_checkpoint,
    gate_values,
    global_from_checkpoint,
    load_checkpoint,
    local_from_checkpoint,
    paper_plan,
    params_snapshot,
    plan_from_dict,
    plan_to_dict,
    predict_global,
    predict_local,
    restore_params,
    save_checkpoint,
    train_gate,
    train_global,
    train_local,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BUILTIN_COHORTS", "Checkpoint", "CohortSplit", "ConfigError",
    "DROPPED", "DROP_ONE_VARIANTS", "DimensionError", "FeatureDataset",
    "FeatureRecord", "FiLMAdaptor", "FormatError", "GATE_STAT_NAMES",
    "GateLossConfig", "GateNet", "GlobalExpert", "LocalExpert",
    "MetricReport", "NumericalError", "ParamGroup", "ProjectionError",
    "ProjectionMatrix", "SafeGateCalibration", "Schedule", "StagePlan",
    "SynthConfig", "Taxonomy", "ablation_plan", "adaptive_pos_weight",
    "alpha_at", "auroc_ovr_macro", "autodiff", "bootstrap_ci", "brier",
    "build_matrix", "build_report", "check_simplex", "class_balanced_ce",
    "class_counts", "cluster_geometry", "cohort_matrix",
    "complementary_benchmark_config", "conflict_weight", "confusion",
    "desk_plan", "ece", "effective_number_weights", "entropy", "f1_scores",
    "format_ci", "fuse", "fuse_t", "gate_from_checkpoint", "gate_losses",
    "gate_stats", "gate_values", "generate", "global_from_checkpoint",
    "global_loss", "hard_class_config", "layer_norm", "load_calibration",
    "load_checkpoint", "load_projection", "load_records",
    "local_aware_weight", "local_from_checkpoint", "log_softmax", "margin",
    "normalized_entropy", "paper_plan", "params_snapshot", "plan_from_dict",
    "plan_to_dict", "predict_global", "predict_local", "project",
    "project_labels", "projection_from_dict", "report_from_json_dict",
    "report_to_csv", "report_to_json", "report_to_markdown", "restore_params",
    "safe_calibrate", "safe_decide", "save_calibration", "save_checkpoint",
    "save_projection", "save_records", "select_thresholds", "sigmoid",
    "smoothed_targets", "soft_target", "softmax", "split_dataset",
    "substream", "top1", "train_gate", "train_global", "train_local",
]
