"""varicurate: embedding-space curation for synthetic face datasets.

Pure-numpy toolkit operating on precomputed embedding files: zero-shot
demographic labeling, neighborhood label refinement, vendi-score
diversity guidance in a closed-form diffusion sandbox, divergence
scoring, threshold filtering, balanced plan generation, and dataset
audits. See the README for the CLI and file formats.
"""

from .audit import (
    AuditReport,
    LeakageReport,
    audit_dataset,
    leakage_check,
    save_histogram_csv,
)
from .curation import (
    CurationPlan,
    DivergenceConfig,
    FilterReport,
    apply_filter,
    divergence_scores,
    ds_noise_detect,
    load_plan_records,
    make_plan,
    save_plan,
    stage1_quality_filter,
    stage2_identity_filter,
)
from .data import (
    EmbeddingSet,
    LabelTable,
    MeanEmbeddingTable,
    load_embeddings,
    load_labels,
    matrix_to_embedding_set,
    mean_by_identity,
    normalize,
    save_embeddings,
    save_labels,
)
from .errors import (
    AlignmentError,
    DataError,
    DegenerateEmbeddingError,
    DegenerateMeanError,
    FormatError,
    NumericError,
    ParameterError,
    PreconditionError,
    ShapeError,
    VaricurateError,
)
from .estimators import (
    DivergenceScorer,
    GuidedMixtureSampler,
    NeighborLabelRefiner,
    ZeroShotLabeler,
)
from .guidance import (
    DiversityReport,
    EmbedMap,
    GuidanceConfig,
    MixtureModel,
    NoiseSchedule,
    SandboxTrajectory,
    analytic_eps,
    diversity_report,
    guidance_gradient,
    guided_sample,
    unguided_sample,
)
from .labeling import (
    PromptBank,
    SoftLabel,
    age_score,
    classify,
    label_dataset,
    prompt_strings,
)
from .refinement import (
    FrcConfig,
    RefinementReport,
    demographic_consistency_filter,
    refine,
)
from .similarity import (
    cosine,
    cosine_rows,
    cross_kernel,
    max_cross_similarity,
    pairwise_kernel,
    top_k_neighbors,
)
from .vendi import VendiResult, vendi_diagnostics, vendi_loss, vendi_loss_grad, vendi_score

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "AuditReport",
    "CurationPlan",
    "DataError",
    "DegenerateEmbeddingError",
    "DegenerateMeanError",
    "DiversityReport",
    "DivergenceConfig",
    "DivergenceScorer",
    "EmbedMap",
    "EmbeddingSet",
    "FilterReport",
    "FormatError",
    "FrcConfig",
    "GuidanceConfig",
    "GuidedMixtureSampler",
    "LabelTable",
    "LeakageReport",
    "MeanEmbeddingTable",
    "MixtureModel",
    "NeighborLabelRefiner",
    "NoiseSchedule",
    "NumericError",
    "ParameterError",
    "PreconditionError",
    "PromptBank",
    "RefinementReport",
    "SandboxTrajectory",
    "ShapeError",
    "SoftLabel",
    "VaricurateError",
    "VendiResult",
    "ZeroShotLabeler",
    "age_score",
    "analytic_eps",
    "apply_filter",
    "audit_dataset",
    "classify",
    "cosine",
    "cosine_rows",
    "cross_kernel",
    "demographic_consistency_filter",
    "divergence_scores",
    "diversity_report",
    "ds_noise_detect",
    "guidance_gradient",
    "guided_sample",
    "label_dataset",
    "leakage_check",
    "load_embeddings",
    "load_labels",
    "load_plan_records",
    "make_plan",
    "matrix_to_embedding_set",
    "max_cross_similarity",
    "mean_by_identity",
    "normalize",
    "pairwise_kernel",
    "prompt_strings",
    "refine",
    "save_embeddings",
    "save_histogram_csv",
    "save_labels",
    "save_plan",
    "stage1_quality_filter",
    "stage2_identity_filter",
    "top_k_neighbors",
    "unguided_sample",
    "vendi_diagnostics",
    "vendi_loss",
    "vendi_loss_grad",
    "vendi_score",
]
