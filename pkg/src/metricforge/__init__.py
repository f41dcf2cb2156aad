"""metricforge: multi-metric assessment toolkit for AI-generated images.

Scores perceptual quality, text-image alignment, and authenticity in one
forward pass through a cross-metric attention head, with content-isolated
dataset splits, prompt-template concept scoring, dynamic multi-task loss
weighting, and PLCC/SRCC evaluation.
"""

from .dataset import (
    Manifest,
    SampleRecord,
    SplitSpec,
    content_isolated_split,
    load_manifest,
    manifest_fingerprint,
    normalize_scores,
    split_report,
    write_manifest,
)
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    FeatureSequence,
    FusionInput,
    embed_text,
    encode,
    ingest_features,
    init_encoder,
)
from .evaluation import (
    CHILD_METRICS,
    EvalReport,
    PromptTemplate,
    SubmetricReport,
    TEMPLATES,
    evaluate_split,
    plcc,
    predict_manifest,
    prompt_metric_score,
    srcc,
    submetric_ratios,
)
from .metric_head import (
    MetricProjectionSet,
    MetricScores,
    cross_metric_scores,
    head_gradients,
    init_metric_head,
    project,
    row_softmax,
)
from .pipeline import Model, build_model
from .training import (
    Checkpoint,
    HYPERPARAM_PRESETS,
    HyperParams,
    LossWeights,
    TaskSelector,
    dynamic_weight_update,
    fit,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    second_training,
    weighted_total_loss,
)

__version__ = "0.1.0"
