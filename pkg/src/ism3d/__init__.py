"""Multi-class, depth-aware object detection and figure-ground segmentation
with implicit shape models."""

from .codebook import (
    Activation,
    Codebook,
    PruneResult,
    Word,
    WordStatistics,
    cluster_rnn,
    compute_gains,
    information_gain,
    match,
    match_all,
    prune_by_gain,
    prune_small_clusters,
    word_statistics,
)
from .detector import ConfigurationError, Detection, DetectorConfig, classify_image, detect, detect_features
from .evaluation import ConfusionMatrix, PRCurve, SweepPoint, codebook_sweep, confusion, pr_curve
from .features import (
    ExtractionParams,
    Feature,
    FeatureFileError,
    FeatureSet,
    ImageRGBD,
    attach_depth,
    extract_features,
    read_depth,
    read_features,
    write_depth,
    write_features,
)
from .model import (
    Model,
    ModelFormatError,
    Occurrence,
    TrainingParams,
    TrainingSample,
    load_model,
    prune_model,
    save_model,
    train,
)
from .segmentation import ProbabilityMap, SegmentationResult, backproject, probability_maps, segment
from .synthgen import (
    ObjectTemplate,
    Placement,
    Scene,
    SceneSpec,
    hallucination_scene,
    make_aliasing_template,
    make_templates,
    render_scene,
)
from .voting import (
    Bandwidths,
    Hypothesis,
    NoVotesError,
    Vote,
    VotingSpace,
    cast_votes,
    mean_shift,
    voting_confidence,
)

__version__ = "0.1.0"
