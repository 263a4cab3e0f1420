"""Hough voting spaces and mean-shift mode seeking.

Five voting spaces are supported. All share the projected object-center
coordinates (x_f - dx * r, y_f - dy * r) with r = s_f / s_i; they differ in
the remaining continuous coordinate(s) and in whether votes carry a class:

  ism     (x, y, r)            no class
  jism    (x, y, r)            + class
  ji3sm1  (x, y, r, d)         + class
  ji3sm2  (x, y, d)            + class
  ji3sm3  (x, y, d * r)        + class

where d is the absolute feature depth in meters. Class is categorical: mean
shift runs independently per class partition. The kernel is flat with an
axis-aligned window of per-dimension bandwidths.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import Model
from .features import FeatureSet
from .codebook import Activation


class VotingSpace(str, Enum):
    ISM = "ism"
    JISM = "jism"
    JI3SM1 = "ji3sm1"
    JI3SM2 = "ji3sm2"
    JI3SM3 = "ji3sm3"


CONTINUOUS_DIMS = {
    VotingSpace.ISM: 3,
    VotingSpace.JISM: 3,
    VotingSpace.JI3SM1: 4,
    VotingSpace.JI3SM2: 3,
    VotingSpace.JI3SM3: 3,
}


def needs_depth(variant: VotingSpace) -> bool:
    return variant in (VotingSpace.JI3SM1, VotingSpace.JI3SM2, VotingSpace.JI3SM3)


def has_class(variant: VotingSpace) -> bool:
    return variant is not VotingSpace.ISM


class NoVotesError(ValueError):
    """Raised where a quantity is undefined because no votes were cast."""


@dataclass(frozen=True)
class Vote:
    coords: tuple[float, ...]
    class_id: int | None
    weight: float
    feature_id: int
    word_id: int
    occurrence_id: int


@dataclass(frozen=True)
class Bandwidths:
    """Per-dimension window half-widths. xy applies to the projected center,
    scale to the r coordinate, depth to d, scaled_depth to d * r."""

    xy: float = 10.0
    scale: float = 0.01
    depth: float = 0.15
    scaled_depth: float = 0.15

    def __post_init__(self):
        if min(self.xy, self.scale, self.depth, self.scaled_depth) <= 0:
            raise ValueError("bandwidths must be > 0")

    def for_variant(self, variant: VotingSpace) -> np.ndarray:
        if variant in (VotingSpace.ISM, VotingSpace.JISM):
            return np.array([self.xy, self.xy, self.scale])
        if variant is VotingSpace.JI3SM1:
            return np.array([self.xy, self.xy, self.scale, self.depth])
        if variant is VotingSpace.JI3SM2:
            return np.array([self.xy, self.xy, self.depth])
        return np.array([self.xy, self.xy, self.scaled_depth])


@dataclass(frozen=True)
class Hypothesis:
    """A vote-density mode: coordinates in the voting space, class (None in
    the class-free space), the summed weight of the votes inside its window,
    and the indices of those votes in the caller's vote list."""

    coords: tuple[float, ...]
    class_id: int | None
    score: float
    supporting: tuple[int, ...]

    @property
    def x(self) -> float:
        return self.coords[0]

    @property
    def y(self) -> float:
        return self.coords[1]


def cast_votes(features: FeatureSet, activations: list[list[Activation]],
               model: Model, variant: VotingSpace) -> list[Vote]:
    """Cast one vote per (feature, activated word, occurrence).

    Weight is 1 / (number of words the feature activated) x
    1 / (number of occurrences of that word with the occurrence's class).
    Depth-bearing spaces skip features without a depth measurement; those
    features still vote in the ism/jism spaces.
    """
    if len(activations) != len(features):
        raise ValueError("activations must be per feature")
    depth_required = needs_depth(variant)
    votes: list[Vote] = []
    for fid, acts in enumerate(activations):
        if not acts:
            continue
        d_f = features.depths[fid]
        if depth_required and np.isnan(d_f):
            continue
        x_f = float(features.positions[fid, 0])
        y_f = float(features.positions[fid, 1])
        s_f = float(features.scales[fid])
        n_words = len(acts)
        for act in acts:
            for occ_id in model.occurrences_for(act.word_id):
                occ = model.occurrences[occ_id]
                r = s_f / occ.scale
                cx = x_f - occ.dx * r
                cy = y_f - occ.dy * r
                if variant in (VotingSpace.ISM, VotingSpace.JISM):
                    coords = (cx, cy, r)
                elif variant is VotingSpace.JI3SM1:
                    coords = (cx, cy, r, float(d_f))
                elif variant is VotingSpace.JI3SM2:
                    coords = (cx, cy, float(d_f))
                else:
                    coords = (cx, cy, float(d_f) * r)
                weight = 1.0 / (n_words * model.occurrence_count(act.word_id,
                                                                 occ.class_id))
                votes.append(Vote(
                    coords=coords,
                    class_id=occ.class_id if has_class(variant) else None,
                    weight=weight,
                    feature_id=fid,
                    word_id=act.word_id,
                    occurrence_id=occ_id,
                ))
    return votes


def _window_members(coords: np.ndarray, center: np.ndarray,
                    bw: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.all(np.abs(coords - center) <= bw, axis=1))


def _seek_modes(coords: np.ndarray, weights: np.ndarray, bw: np.ndarray,
                tol: float = 1e-3, max_iter: int = 100) -> np.ndarray:
    """Flat-kernel mean shift seeded at every point; the window is the
    axis-aligned box of per-dimension bandwidths, and convergence is a shift
    below tol in bandwidth-normalized units. Returns one mode per seed."""
    modes = coords.copy()
    n = len(coords)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        # chunk the seed axis to bound the S x N membership matrix
        for start in range(0, idx.size, 256):
            block = idx[start:start + 256]
            inside = np.all(
                np.abs(coords[None, :, :] - modes[block, None, :]) <= bw, axis=2)
            mass = inside @ weights
            occupied = mass > 0
            new = modes[block].copy()
            if occupied.any():
                new[occupied] = ((inside[occupied] * weights) @ coords
                                 / mass[occupied, None])
            shift = np.linalg.norm((new - modes[block]) / bw, axis=1)
            modes[block] = new
            done = block[(shift < tol) | ~occupied]
            active[done] = False
    return modes


def mean_shift(votes: list[Vote], bandwidths: Bandwidths,
               variant: VotingSpace) -> list[Hypothesis]:
    """Find vote-density modes per class partition.

    Every vote seeds a flat-kernel mean-shift iteration; converged modes
    closer than 0.5 normalized distance are merged, keeping the one with the
    larger window weight. A hypothesis scores the summed weight of votes in
    its final window. Results are sorted by score descending, ties by (x, y).
    The output does not depend on the order of the input votes.
    """
    if not votes:
        return []
    dims = CONTINUOUS_DIMS[variant]
    for v in votes:
        if len(v.coords) != dims:
            raise ValueError(
                f"vote has {len(v.coords)} coordinates, expected {dims}")
    bw = bandwidths.for_variant(variant)

    partitions: dict[int | None, list[int]] = {}
    for i, v in enumerate(votes):
        partitions.setdefault(v.class_id, []).append(i)

    hypotheses: list[Hypothesis] = []
    for class_id in sorted(partitions, key=lambda c: (c is not None, c)):
        ids = partitions[class_id]
        # canonical processing order makes float summation order, and hence
        # the result, independent of the caller's vote order
        ids.sort(key=lambda i: (votes[i].coords, votes[i].weight,
                                votes[i].feature_id, votes[i].word_id,
                                votes[i].occurrence_id))
        coords = np.array([votes[i].coords for i in ids])
        weights = np.array([votes[i].weight for i in ids])

        modes = _seek_modes(coords, weights, bw)
        scores = np.array([weights[_window_members(coords, m, bw)].sum()
                           for m in modes])
        order = sorted(range(len(modes)),
                       key=lambda i: (-scores[i], tuple(modes[i])))
        kept: list[int] = []
        for i in order:
            if all(np.linalg.norm((modes[i] - modes[j]) / bw) >= 0.5
                   for j in kept):
                kept.append(i)
        for i in kept:
            inside = _window_members(coords, modes[i], bw)
            supporting = tuple(sorted(ids[k] for k in inside))
            hypotheses.append(Hypothesis(
                coords=tuple(float(c) for c in modes[i]),
                class_id=class_id,
                score=float(weights[inside].sum()),
                supporting=supporting,
            ))
    hypotheses.sort(key=lambda h: (-h.score, h.x, h.y))
    return hypotheses


def voting_confidence(votes: list[Vote], hypotheses: list[Hypothesis],
                      bandwidths: Bandwidths, variant: VotingSpace) -> float:
    """Fraction of the total cast vote weight that lies within one bandwidth
    window of the strongest hypothesis (same class where the space carries
    class). Undefined without votes."""
    if not votes:
        raise NoVotesError("voting confidence is undefined without votes")
    if not hypotheses:
        return 0.0
    top = max(hypotheses, key=lambda h: h.score)
    bw = bandwidths.for_variant(variant)
    center = np.asarray(top.coords)
    total = 0.0
    inside = 0.0
    for v in votes:
        total += v.weight
        if v.class_id != top.class_id:
            continue
        if np.all(np.abs(np.asarray(v.coords) - center) <= bw):
            inside += v.weight
    return inside / total


def write_votes_csv(votes: list[Vote], variant: VotingSpace, path) -> None:
    """Debug export, one vote per row."""
    dims = CONTINUOUS_DIMS[variant]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + [f"c{i}" for i in range(dims)]
                        + ["class", "weight", "feature_id", "word_id",
                           "occurrence_id"])
        for v in votes:
            cls = "" if v.class_id is None else v.class_id
            writer.writerow([variant.value] + [repr(c) for c in v.coords]
                            + [cls, repr(v.weight), v.feature_id, v.word_id,
                               v.occurrence_id])


def write_hypotheses_csv(hypotheses: list[Hypothesis], variant: VotingSpace,
                         path) -> None:
    dims = CONTINUOUS_DIMS[variant]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + [f"c{i}" for i in range(dims)]
                        + ["class", "score", "n_votes"])
        for h in hypotheses:
            cls = "" if h.class_id is None else h.class_id
            writer.writerow([variant.value] + [repr(c) for c in h.coords]
                            + [cls, repr(h.score), len(h.supporting)])
