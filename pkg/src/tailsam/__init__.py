"""Long-tail-aware sharpness-aware training on a small next-item model."""

from .data import (
    FrequencyTable,
    InteractionLog,
    SequenceDataset,
    ZipfConfig,
    build_sequences,
    frequency_table,
    generate_zipf_dataset,
    load_interactions,
    pareto_split,
    split_8_1_1,
)
from .diagnostics import (
    BoundInputs,
    BoundReport,
    LandscapeGrid,
    TraceReport,
    bound_rhs,
    bw_constant,
    empirical_item_sharpness,
    hutchinson_trace,
    hvp_fd,
    landscape_slice,
)
from .evaluation import (
    ExperimentPlan,
    MetricReport,
    evaluate,
    hr_at_k,
    ndcg_at_k,
    run_experiment,
)
from .model import (
    Batch,
    EmbeddingModel,
    ModelParams,
    finite_diff_grad,
    forward_losses,
    grad,
    perturb,
    score_all,
)
from .optimizers import (
    OptimizerConfig,
    OptState,
    StepReport,
    eisam_step,
    epsilon_hat,
    group_sam_step,
    rw_step,
    sam_step,
    train,
    weighted_batch_loss_and_grad,
)
from .recommender import NextItemRecommender
from .weighting import WeightingScheme, weight, weights_for_table

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BoundInputs",
    "BoundReport",
    "EmbeddingModel",
    "ExperimentPlan",
    "FrequencyTable",
    "InteractionLog",
    "LandscapeGrid",
    "MetricReport",
    "ModelParams",
    "NextItemRecommender",
    "OptState",
    "OptimizerConfig",
    "SequenceDataset",
    "StepReport",
    "TraceReport",
    "WeightingScheme",
    "ZipfConfig",
    "bound_rhs",
    "build_sequences",
    "bw_constant",
    "eisam_step",
    "empirical_item_sharpness",
    "epsilon_hat",
    "evaluate",
    "finite_diff_grad",
    "forward_losses",
    "frequency_table",
    "generate_zipf_dataset",
    "grad",
    "group_sam_step",
    "hr_at_k",
    "hutchinson_trace",
    "hvp_fd",
    "landscape_slice",
    "load_interactions",
    "ndcg_at_k",
    "pareto_split",
    "perturb",
    "run_experiment",
    "rw_step",
    "sam_step",
    "score_all",
    "split_8_1_1",
    "train",
    "weight",
    "weighted_batch_loss_and_grad",
    "weights_for_table",
]
