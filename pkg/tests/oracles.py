"""Independent reference implementations used to check the library.

Everything here is deliberately written the slow, obvious way and shares no
code with src/: exhaustive agglomeration, direct probability sums, dense
grid scans, nested-loop counting.
"""

import numpy as np
from scipy import ndimage

from ism3d.voting import Vote


def oracle_average_linkage(descriptors, t_cluster):
    """O(n^3) agglomeration: repeatedly merge the globally most similar pair
    of clusters while the average pairwise cosine similarity is >= threshold.
    Similarity is computed bluntly over all member pairs."""
    descriptors = np.asarray(descriptors)
    clusters = [[i] for i in range(len(descriptors))]

    def avg_sim(a, b):
        total = 0.0
        for i in a:
            for j in b:
                total += float(descriptors[i] @ descriptors[j])
        return total / (len(a) * len(b))

    while len(clusters) > 1:
        best = -np.inf
        pair = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                s = avg_sim(clusters[i], clusters[j])
                if s > best:
                    best = s
                    pair = (i, j)
        if best < t_cluster:
            break
        i, j = pair
        merged = clusters[i] + clusters[j]
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)]
        clusters.append(merged)
    return {frozenset(c) for c in clusters}


def oracle_gain(counts, row):
    """Average pointwise mutual information of one word, direct summation
    over the full probability table."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    n = counts.shape[1]
    g = 0.0
    for c in range(n):
        p_wc = counts[row, c] / total
        p_w = counts[row, :].sum() / total
        p_c = counts[:, c].sum() / total
        if p_wc > 0:
            g += p_wc * np.log2(p_wc / (p_w * p_c))
    return g / n


def make_votes(points, weights=None, class_ids=None):
    votes = []
    for i, p in enumerate(points):
        votes.append(Vote(
            coords=tuple(float(v) for v in p),
            class_id=None if class_ids is None else class_ids[i],
            weight=1.0 if weights is None else float(weights[i]),
            feature_id=i, word_id=0, occurrence_id=0))
    return votes


def clustered_vote_set(rng, bandwidths, variant, box=(100.0, 100.0),
                       s_range=(0.5, 2.0), max_votes=100):
    """Random clusters and isolated votes, all sites separated by >= 2.5
    normalized bandwidths so flat-window density peaks are unambiguous."""
    bw = bandwidths.for_variant(variant)
    lo = np.array([0.0, 0.0, s_range[0]])
    hi = np.array([box[0], box[1], s_range[1]])
    sites = []
    for _ in range(200):
        cand = rng.uniform(lo, hi)
        if all(normalized_dist(cand, s, bw) >= 2.5 for s in sites):
            sites.append(cand)
        if len(sites) >= rng.integers(2, 6):
            break
    points, weights = [], []
    for k, site in enumerate(sites):
        n = int(rng.integers(8, 16)) if k < 2 else int(rng.integers(1, 10))
        n = min(n, max_votes - len(points))
        for _ in range(n):
            offset = rng.uniform(-0.25, 0.25, 3) * bw
            points.append(site + offset)
            weights.append(rng.uniform(0.5, 1.0))
    return make_votes(points, weights)


def grid_search_modes(votes, bandwidths, variant):
    """Dense flat-kernel density scan at bandwidth/10 resolution.

    Returns (axes, density, mode_mask): modes are grid points whose density
    is maximal within a +-1 bandwidth box around them."""
    bw = bandwidths.for_variant(variant)
    coords = np.array([v.coords for v in votes])
    weights = np.array([v.weight for v in votes])
    axes = []
    for d in range(coords.shape[1]):
        lo = coords[:, d].min() - 1.05 * bw[d]
        hi = coords[:, d].max() + 1.05 * bw[d]
        axes.append(np.arange(lo, hi + bw[d] / 10, bw[d] / 10))
    density = np.zeros([len(a) for a in axes])
    for c, w in zip(coords, weights):
        slices = []
        for d, axis in enumerate(axes):
            lo = np.searchsorted(axis, c[d] - bw[d], side="left")
            hi = np.searchsorted(axis, c[d] + bw[d], side="right")
            slices.append(slice(lo, hi))
        density[tuple(slices)] += w
    peak = ndimage.maximum_filter(density, size=21, mode="constant", cval=0.0)
    mode_mask = (density == peak) & (density > 0)
    return axes, density, mode_mask


def grid_points(axes, mask):
    idx = np.argwhere(mask)
    return np.stack([axes[d][idx[:, d]] for d in range(len(axes))], axis=1)


def normalized_dist(a, b, bw):
    return float(np.linalg.norm((np.asarray(a) - np.asarray(b)) / bw))


def oracle_pr_points(detections_per_image, truths_per_image, thresholds):
    """Independent precision/recall recount with nested loops."""
    out = []
    total_truths = sum(len(t) for t in truths_per_image)
    for t in thresholds:
        tp = 0
        n_kept = 0
        for dets, truths in zip(detections_per_image, truths_per_image):
            if not dets:
                continue
            best = max(d.score for d in dets)
            kept = [d for d in dets if d.score >= t * best]
            n_kept += len(kept)
            used = set()
            for d in sorted(kept, key=lambda d: -d.score):
                for j, g in enumerate(truths):
                    if j in used or g.class_id != d.class_id:
                        continue
                    if g.box[0] <= d.x <= g.box[2] and g.box[1] <= d.y <= g.box[3]:
                        used.add(j)
                        tp += 1
                        break
        precision = tp / n_kept if n_kept else 1.0
        out.append((precision, tp / total_truths))
    return out
