"""Joint myocardial motion estimation, anatomy propagation and scar/edema
segmentation for cine sequences, with a synthetic phantom oracle, a metric
suite and chord-based transmurality quantification."""

from .errors import (
    CinesegError,
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionMismatchError,
    DivergenceError,
    TopologyError,
)
from .grid import (
    CineSequence,
    DisplacementField,
    Image2D,
    LabelMap,
    bilinear_sample,
    field_gradient,
    warp_image,
    warp_labelmap,
)
from .motion import (
    MotionConfig,
    MotionResult,
    estimate_ddf,
    estimate_sequence,
    motion_gradient,
    motion_objective,
    mse_loss,
    smoothness_penalty,
)
from .anatomy import (
    AnatomyParams,
    AnatomyTrainConfig,
    ce_loss,
    cosine_consistency,
    dice_loss,
    extract_features,
    predict_anatomy,
    train_anatomy,
)
from .pathology import (
    CaseData,
    FeatureSelection,
    JointModel,
    JointTrainConfig,
    PathologyParams,
    aggregate_frames,
    assemble_features,
    pathology_loss,
    predict_frame_pathology,
    segment_case,
    select_frames,
    total_loss,
    train_joint,
)
from .metrics import (
    confusion_counts,
    dice_score,
    evaluate_masks,
    harden,
    hausdorff_mm,
    npv,
    pearson,
    precision,
    sensitivity,
    specificity,
)
from .chords import (
    ChordReport,
    build_chords,
    categorize,
    chord_transmurality,
    segment_table,
    transmurality_report,
)
from .phantom import PhantomConfig, SyntheticCase, case_manifest, generate, load_case

__version__ = "0.1.0"
