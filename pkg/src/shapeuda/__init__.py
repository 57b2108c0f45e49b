"""Structure-aware unsupervised domain adaptation for segmentation.

The pipeline modulates encoder features across domains (global statistics
restyling plus class-aware token mixing), validates teacher pseudo-labels
through hypergraph plausibility scores, prunes cross-view-unstable classes,
and self-trains a decoder on what survives.
"""

from .config import ConfigError, RunConfig, load_run_config
from .losses import DecoderParams, decode, dice_loss, focal_loss, seg_loss
from .metrics import MetricReport, asd, dice_score, metric_report
from .modulation import (
    ChannelStats,
    HfmConfig,
    HfmOutputs,
    LayerNormParams,
    TokenGrid,
    adain,
    channel_stats,
    fold,
    hfm_forward,
    layer_norm,
    modulate_impure,
    modulate_pure,
    partition_tokens,
    patch_purity,
    unfold,
    upsample_bilinear,
)
from .plausibility import (
    BatchShapeStats,
    GateConfig,
    PlausibilityReport,
    ScoreAccumulator,
    StructuralHypergraph,
    batch_stats,
    build_hypergraph,
    centroid,
    direction_cosine,
    final_score,
    inter_score,
    intra_score,
    isoperimetric,
    penalized_aggregate,
    pixel_certainty,
    pixel_consistency,
    plausibility_report,
    select_samples,
    vertex_score,
    zscore_plausibility,
)
from .pruning import (
    ClassSignature,
    InstabilityReport,
    SapConfig,
    anomaly_threshold,
    anomalous_set,
    class_signature,
    prune,
)
from .rng import SeededRng
from .synthdata import SynthConfig, gen_dataset, gen_sample, load_dataset
from .tensors import (
    IGNORE,
    FeatureMap,
    LabelMap,
    PredictionEnsemble,
    ProbMap,
    ShapeError,
    TensorError,
    ValidationError,
    argmax_map,
    read_tensor,
    write_tensor,
)
from .training import (
    AdaptSettings,
    EpochReport,
    FeatureSet,
    Sample,
    TrainConfig,
    adapt,
    adapt_epoch,
    ema_update,
    evaluate,
    ramp_weight,
    sup_loss,
    teacher_ensemble,
    train_supervised,
    unsup_loss,
)

__version__ = "0.1.0"
