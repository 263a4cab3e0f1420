"""End-to-end detection: features -> matching -> voting -> modes -> filter ->
segmentation, plus single-label image classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codebook import match_all
from .features import ExtractionParams, FeatureSet, ImageRGBD, attach_depth, extract_features
from .model import Model
from .segmentation import SegmentationResult, majority_class, segment_hypothesis
from .voting import Bandwidths, Hypothesis, Vote, VotingSpace, cast_votes, mean_shift, needs_depth


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    variant: VotingSpace = VotingSpace.JISM
    bandwidths: Bandwidths = field(default_factory=Bandwidths)
    t_match: float = 0.8
    score_ratio: float = 0.55
    max_detections: int | None = None
    support_factor: float = 16.0
    extraction: ExtractionParams = field(default_factory=ExtractionParams)

    def __post_init__(self):
        if not 0.0 < self.score_ratio <= 1.0:
            raise ConfigurationError("score_ratio must lie in (0, 1]")


@dataclass
class Detection:
    """A retained hypothesis with its class, normalized score (window weight
    over the image's total cast weight), image location, the scale or depth
    coordinate the voting space provides, and the figure-ground result."""

    class_id: int | None
    class_name: str
    score: float
    x: float
    y: float
    scale: float | None
    depth: float | None
    hypothesis: Hypothesis
    segmentation: SegmentationResult | None


def detect_features(features: FeatureSet, shape: tuple[int, int], model: Model,
                    config: DetectorConfig, with_segmentation: bool = True,
                    ) -> list[Detection]:
    """Run the pipeline on pre-extracted features.

    Hypotheses scoring at least score_ratio times the image's strongest are
    kept (so the strongest always survives), strongest first."""
    if len(features) == 0:
        return []
    activations = match_all(model.codebook, features.descriptors, config.t_match)
    votes = cast_votes(features, activations, model, config.variant)
    if not votes:
        return []
    hypotheses = mean_shift(votes, config.bandwidths, config.variant)
    if not hypotheses:
        return []
    total_weight = sum(v.weight for v in votes)
    top = hypotheses[0].score
    kept = [h for h in hypotheses if h.score >= config.score_ratio * top]
    if config.max_detections is not None:
        kept = kept[: config.max_detections]

    detections = []
    for h in kept:
        cls = h.class_id if h.class_id is not None else majority_class(
            votes, h.supporting, model)
        name = model.class_names[cls] if cls is not None else ""
        seg = None
        if with_segmentation:
            seg = segment_hypothesis(h, votes, model, features, shape,
                                     config.support_factor)
        detections.append(Detection(
            class_id=cls,
            class_name=name,
            score=h.score / total_weight,
            x=h.coords[0],
            y=h.coords[1],
            scale=_scale_coordinate(h, config.variant),
            depth=_depth_estimate(h, votes, features, config.variant),
            hypothesis=h,
            segmentation=seg,
        ))
    return detections


def detect(image: ImageRGBD, model: Model, config: DetectorConfig,
           with_segmentation: bool = True) -> list[Detection]:
    """Extract features from the image (attaching depth when available) and
    run `detect_features`. Depth-bearing voting spaces require a depth map."""
    if needs_depth(config.variant) and image.depth is None:
        raise ConfigurationError(
            f"voting space {config.variant.value} needs a depth map")
    features = extract_features(image, config.extraction)
    if image.depth is not None:
        features = attach_depth(features, image.depth, config.extraction.depth_window)
    return detect_features(features, image.intensity.shape, model, config,
                           with_segmentation)


def _scale_coordinate(h: Hypothesis, variant: VotingSpace) -> float | None:
    if variant in (VotingSpace.ISM, VotingSpace.JISM, VotingSpace.JI3SM1):
        return float(h.coords[2])
    return None


def _depth_estimate(h: Hypothesis, votes: list[Vote], features: FeatureSet,
                    variant: VotingSpace) -> float | None:
    """Object depth as the weight-averaged depth of the supporting features.

    The ji3sm2 space carries depth directly; ji3sm1 carries it as its fourth
    coordinate; ji3sm3 carries depth scaled by r, so averaging the raw
    feature depths is used uniformly instead of unmixing the product."""
    if not needs_depth(variant):
        return None
    total = 0.0
    acc = 0.0
    for i in h.supporting:
        v = votes[i]
        d = features.depths[v.feature_id]
        if np.isnan(d):
            continue
        acc += v.weight * float(d)
        total += v.weight
    return acc / total if total > 0 else None


def classify_features(features: FeatureSet, shape: tuple[int, int],
                      model: Model, config: DetectorConfig) -> str | None:
    dets = detect_features(features, shape, model, config, with_segmentation=False)
    if not dets:
        return None
    return dets[0].class_name


def classify_image(image: ImageRGBD, model: Model,
                   config: DetectorConfig) -> str | None:
    """Class of the strongest hypothesis across all classes; None (abstain)
    when the image casts no votes."""
    dets = detect(image, model, config, with_segmentation=False)
    if not dets:
        return None
    return dets[0].class_name
