"""Visual codebook: agglomerative clustering, pruning, and feature matching.

Clustering is average-linkage agglomeration driven by reciprocal-nearest-
neighbor chains. Cluster similarity is the average pairwise cosine similarity
between members, which for unit descriptors reduces to the dot product of the
(unnormalized) member means, so it can be maintained incrementally from
per-cluster sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(eq=False)
class Word:
    """A codebook entry.

    activations_by_class holds training activation counts per class (filled
    by the training pipeline); gain is the word's class-discriminativeness in
    bits (filled by `prune_by_gain` or `compute_gains`)."""

    id: int
    centroid: np.ndarray
    member_count: int
    member_indices: tuple[int, ...] = ()
    activations_by_class: np.ndarray | None = None
    gain: float = 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, Word):
            return NotImplemented
        acts_equal = (
            (self.activations_by_class is None) == (other.activations_by_class is None)
            and (self.activations_by_class is None
                 or np.array_equal(self.activations_by_class, other.activations_by_class))
        )
        return (
            self.id == other.id
            and np.array_equal(self.centroid, other.centroid)
            and self.member_count == other.member_count
            and self.member_indices == other.member_indices
            and acts_equal
            and self.gain == other.gain
        )


@dataclass(eq=False)
class Codebook:
    words: list[Word]
    descriptor_dim: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [w.id for w in self.words]
        if len(set(ids)) != len(ids):
            raise ValueError("word ids must be unique")
        for w in self.words:
            if w.centroid.shape != (self.descriptor_dim,):
                raise ValueError(
                    f"word {w.id} centroid has dimension {w.centroid.shape},"
                    f" expected ({self.descriptor_dim},)")
        self._matrix = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.descriptor_dim == other.descriptor_dim
            and self.class_names == other.class_names
            and self.words == other.words
        )

    def __len__(self) -> int:
        return len(self.words)

    def centroid_matrix(self) -> np.ndarray:
        """(W, D) matrix of centroids in word order, cached."""
        if self._matrix is None or len(self._matrix) != len(self.words):
            if self.words:
                self._matrix = np.stack([w.centroid for w in self.words])
            else:
                self._matrix = np.zeros((0, self.descriptor_dim))
        return self._matrix

    def word_row(self) -> dict[int, int]:
        return {w.id: i for i, w in enumerate(self.words)}


def cluster_rnn(descriptors, t_cluster: float,
                class_names: list[str] | None = None) -> Codebook:
    """Cluster unit descriptors into a codebook.

    Reciprocal-nearest-neighbor chains with average linkage: a chain follows
    nearest neighbors until it finds a mutual pair; the pair is merged when
    its average similarity is >= t_cluster, otherwise the whole chain can
    never reach the threshold again and is retired as final clusters. Chains
    are seeded from the cluster containing the lowest-index unclustered
    descriptor, and nearest-neighbor ties break toward that same ordering,
    which makes the result deterministic for a given input order.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.size == 0:
        dim = descriptors.shape[1] if descriptors.ndim == 2 else 0
        return Codebook([], dim, list(class_names or []))
    n, dim = descriptors.shape

    # per-cluster state; similarity(a, b) = (sum_a . sum_b) / (count_a count_b)
    cap = 2 * n
    sums = np.zeros((cap, dim))
    sums[:n] = descriptors
    counts = np.ones(cap)
    order_key = np.full(cap, n, dtype=np.intp)  # min original member index
    order_key[:n] = np.arange(n)
    members: list[list[int]] = [[i] for i in range(n)] + [[] for _ in range(n)]
    next_id = n
    final: list[int] = []

    def nearest(c: int, candidates: np.ndarray) -> tuple[int, float]:
        sims = (sums[candidates] @ sums[c]) / (counts[candidates] * counts[c])
        best = sims.max()
        tied = candidates[sims == best]
        pick = tied[np.argmin(order_key[tied])]
        return int(pick), float(best)

    active = set(range(n))
    chain: list[int] = []
    while len(active) > 1:
        if not chain:
            seed = min(active, key=lambda j: order_key[j])
            chain.append(seed)
        top = chain[-1]
        candidates = np.fromiter((j for j in active if j != top),
                                 dtype=np.intp, count=len(active) - 1)
        nn, sim = nearest(top, candidates)
        if len(chain) >= 2 and nn == chain[-2]:
            prev = chain[-2]
            chain = chain[:-2]
            if sim >= t_cluster:
                idx = next_id
                next_id += 1
                sums[idx] = sums[top] + sums[prev]
                counts[idx] = counts[top] + counts[prev]
                members[idx] = members[top] + members[prev]
                order_key[idx] = min(order_key[top], order_key[prev])
                active.discard(top)
                active.discard(prev)
                active.add(idx)
            else:
                # chain similarities are non-decreasing, so every cluster on
                # it is below threshold against everything it can still meet
                for j in chain + [prev, top]:
                    active.discard(j)
                    final.append(j)
                chain = []
        else:
            chain.append(nn)
    final.extend(active)

    final.sort(key=lambda j: order_key[j])
    words = []
    for wid, j in enumerate(final):
        centroid = sums[j] / counts[j]
        norm = np.linalg.norm(centroid)
        centroid = centroid / max(norm, 1e-12)
        words.append(Word(id=wid, centroid=centroid, member_count=int(counts[j]),
                          member_indices=tuple(sorted(members[j]))))
    return Codebook(words, dim, list(class_names or []))


def prune_small_clusters(codebook: Codebook, t_q: int) -> Codebook:
    """Drop words whose training cluster has t_q or fewer members."""
    kept = [w for w in codebook.words if w.member_count > t_q]
    return Codebook(kept, codebook.descriptor_dim, list(codebook.class_names))


@dataclass(frozen=True)
class WordStatistics:
    """Joint and marginal activation probabilities over words x classes."""

    joint: np.ndarray          # (W, C)
    marginal_word: np.ndarray  # (W,)
    marginal_class: np.ndarray  # (C,)
    word_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "_rows",
                           {wid: i for i, wid in enumerate(self.word_ids)})

    def row(self, word_id: int) -> int:
        try:
            return self._rows[word_id]
        except KeyError:
            raise KeyError(f"unknown word id {word_id}") from None


def word_statistics(codebook: Codebook, counts) -> WordStatistics:
    """Estimate P(word, class) as raw activation frequencies.

    counts is a (W, C) array of training activation counts aligned with
    codebook.words. No smoothing is applied; downstream code treats
    0 * log(0 / q) as 0."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape[0] != len(codebook.words):
        raise ValueError("counts rows must match codebook words")
    if np.any(counts < 0):
        raise ValueError("activation counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("at least one training activation is required")
    joint = counts / total
    return WordStatistics(
        joint=joint,
        marginal_word=joint.sum(axis=1),
        marginal_class=joint.sum(axis=0),
        word_ids=tuple(w.id for w in codebook.words),
    )


def information_gain(stats: WordStatistics, word_id: int) -> float:
    """Average pointwise mutual information between a word and the class
    labels, in bits. Zero joint cells contribute nothing; the result is
    clamped at 0 against floating-point dust (it is a scaled KL divergence,
    hence non-negative)."""
    i = stats.row(word_id)
    n = stats.joint.shape[1]
    p_w = stats.marginal_word[i]
    total = 0.0
    for c in range(n):
        p_wc = stats.joint[i, c]
        p_c = stats.marginal_class[c]
        if p_wc > 0.0 and p_w > 0.0 and p_c > 0.0:
            total += p_wc * np.log2(p_wc / (p_w * p_c))
    return max(total / n, 0.0)


def compute_gains(codebook: Codebook, stats: WordStatistics) -> Codebook:
    """Return a codebook whose words carry their information gain."""
    words = [replace(w, gain=information_gain(stats, w.id)) for w in codebook.words]
    return Codebook(words, codebook.descriptor_dim, list(codebook.class_names))


@dataclass(frozen=True)
class PruneResult:
    codebook: Codebook
    size_before: int
    size_after: int


def prune_by_gain(codebook: Codebook, stats: WordStatistics,
                  t_ig: float) -> PruneResult:
    """Keep words with information gain >= t_ig; t_ig = 0 is the identity."""
    scored = compute_gains(codebook, stats)
    kept = [w for w in scored.words if w.gain >= t_ig]
    pruned = Codebook(kept, codebook.descriptor_dim, list(codebook.class_names))
    return PruneResult(pruned, size_before=len(codebook.words), size_after=len(kept))


@dataclass(frozen=True)
class Activation:
    word_id: int
    similarity: float


def match(codebook: Codebook, descriptor, t_match: float) -> list[Activation]:
    """All words whose centroid has cosine similarity >= t_match with the
    descriptor, strongest first (ties by word id). A feature may activate
    several words."""
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.shape != (codebook.descriptor_dim,):
        raise ValueError(
            f"descriptor dimension {descriptor.shape} does not match"
            f" codebook dimension ({codebook.descriptor_dim},)")
    if not codebook.words:
        return []
    sims = codebook.centroid_matrix() @ descriptor
    hits = np.flatnonzero(sims >= t_match)
    acts = [Activation(codebook.words[i].id, float(sims[i])) for i in hits]
    acts.sort(key=lambda a: (-a.similarity, a.word_id))
    return acts


def match_all(codebook: Codebook, descriptors, t_match: float) -> list[list[Activation]]:
    """Vectorized `match` over the rows of a (N, D) descriptor array."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2 or descriptors.shape[1] != codebook.descriptor_dim:
        raise ValueError("descriptor matrix does not match codebook dimension")
    if not codebook.words or not len(descriptors):
        return [[] for _ in range(len(descriptors))]
    sims = descriptors @ codebook.centroid_matrix().T
    out = []
    for row in sims:
        hits = np.flatnonzero(row >= t_match)
        acts = [Activation(codebook.words[i].id, float(row[i])) for i in hits]
        acts.sort(key=lambda a: (-a.similarity, a.word_id))
        out.append(acts)
    return out
