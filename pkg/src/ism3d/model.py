"""Implicit shape model: nonparametric occurrence tables and model files.

Training records, for every codebook activation inside an object mask, where
on the object the feature sat (offset from the object center), at what scale,
for which class, and a binary mask patch cropped from the ground-truth
segmentation at the feature's support. Occurrence offsets are stored as
feature position minus object center, so a detection-time vote at
(x_f - dx * s_f / s_i, y_f - dy * s_f / s_i) lands on the object center.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .codebook import Codebook, Word, compute_gains, match_all, word_statistics
from .features import ExtractionParams, FeatureSet, ImageRGBD, extract_features

MAGIC = b"ISM3D"
VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(eq=False)
class Occurrence:
    """One recorded activation: word, class, offset from the object center
    (feature minus center, pixels), feature scale at training time, and the
    mask patch over the feature's support area."""

    word_id: int
    class_id: int
    dx: float
    dy: float
    scale: float
    mask_patch: np.ndarray  # (h, w) uint8 in {0, 1}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Occurrence):
            return NotImplemented
        return (
            self.word_id == other.word_id
            and self.class_id == other.class_id
            and self.dx == other.dx
            and self.dy == other.dy
            and self.scale == other.scale
            and self.mask_patch.shape == other.mask_patch.shape
            and np.array_equal(self.mask_patch, other.mask_patch)
        )

    def sort_key(self):
        return (self.word_id, self.class_id, self.dy, self.dx, self.scale,
                self.mask_patch.shape, self.mask_patch.tobytes())


@dataclass
class TrainingSample:
    """One labeled training image. `features` may carry pre-extracted
    features, in which case the image is optional and extraction is skipped
    (the path used by the synthetic generator)."""

    class_id: int
    mask: np.ndarray
    image: ImageRGBD | None = None
    features: FeatureSet | None = None

    def __post_init__(self):
        self.mask = (np.asarray(self.mask) != 0).astype(np.uint8)
        if self.image is None and self.features is None:
            raise ValueError("sample needs an image or pre-extracted features")
        if self.image is not None and self.mask.shape != self.image.intensity.shape:
            raise ValueError("mask dimensions must equal image dimensions")


@dataclass(frozen=True)
class TrainingParams:
    t_match: float = 0.8
    support_factor: float = 16.0
    extraction: ExtractionParams = field(default_factory=ExtractionParams)


@dataclass(eq=False)
class Model:
    codebook: Codebook
    occurrences: list[Occurrence]
    class_names: list[str]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = self.codebook.word_row()
        by_word: dict[int, list[int]] = {w.id: [] for w in self.codebook.words}
        counts: dict[tuple[int, int], int] = {}
        for i, occ in enumerate(self.occurrences):
            if occ.word_id not in rows:
                raise ValueError(f"occurrence references unknown word {occ.word_id}")
            if not 0 <= occ.class_id < len(self.class_names):
                raise ValueError(f"occurrence class {occ.class_id} out of range")
            by_word[occ.word_id].append(i)
            key = (occ.word_id, occ.class_id)
            counts[key] = counts.get(key, 0) + 1
        self._occ_by_word = by_word
        self._occ_class_counts = counts

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def occurrences_for(self, word_id: int) -> list[int]:
        return self._occ_by_word.get(word_id, [])

    def occurrence_count(self, word_id: int, class_id: int) -> int:
        return self._occ_class_counts.get((word_id, class_id), 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.codebook == other.codebook
            and self.occurrences == other.occurrences
            and self.class_names == other.class_names
            and self.config == other.config
        )


def mask_center(mask: np.ndarray) -> tuple[float, float]:
    """Object center: centroid of the mask's bounding box, (cx, cy)."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty")
    return (float(xs.min() + xs.max()) / 2.0, float(ys.min() + ys.max()) / 2.0)


def crop_mask_patch(mask: np.ndarray, x: float, y: float, side: int) -> np.ndarray:
    """Crop a side x side patch centered at (x, y); outside-image area is
    background (0). Values are copied from the mask, never interpolated."""
    h, w = mask.shape
    x0 = int(np.rint(x)) - side // 2
    y0 = int(np.rint(y)) - side // 2
    patch = np.zeros((side, side), dtype=np.uint8)
    sy0, sy1 = max(0, y0), min(h, y0 + side)
    sx0, sx1 = max(0, x0), min(w, x0 + side)
    if sy1 > sy0 and sx1 > sx0:
        patch[sy0 - y0: sy1 - y0, sx0 - x0: sx1 - x0] = mask[sy0:sy1, sx0:sx1]
    return patch


def _sample_features(sample: TrainingSample, params: TrainingParams) -> FeatureSet:
    if sample.features is not None:
        return sample.features
    return extract_features(sample.image, params.extraction)


def activation_counts(samples: list[TrainingSample], codebook: Codebook,
                      params: TrainingParams) -> np.ndarray:
    """(W, C) activation counts over all training features, foreground and
    background alike; this is what the word/class statistics are built on."""
    counts = np.zeros((len(codebook.words), len(codebook.class_names)))
    rows = codebook.word_row()
    for sample in samples:
        fs = _sample_features(sample, params)
        for acts in match_all(codebook, fs.descriptors, params.t_match):
            for act in acts:
                counts[rows[act.word_id], sample.class_id] += 1
    return counts


def train(samples: list[TrainingSample], codebook: Codebook,
          params: TrainingParams | None = None) -> Model:
    """Learn occurrence tables from masked training samples.

    Only activations whose feature lies inside the ground-truth mask produce
    occurrences; background activations contribute to the word statistics but
    not to the shape model. The occurrence list is sorted canonically so the
    result does not depend on sample order.
    """
    params = params or TrainingParams()
    if not codebook.class_names:
        raise ValueError("codebook must carry class names before training")
    n = len(codebook.class_names)
    per_class = {s.class_id for s in samples}
    if not per_class.issuperset(range(n)):
        missing = sorted(set(range(n)) - per_class)
        raise ValueError(f"no training sample for classes {missing}")

    occurrences: list[Occurrence] = []
    counts = np.zeros((len(codebook.words), n))
    rows = codebook.word_row()
    for index, sample in enumerate(samples):
        if not np.any(sample.mask):
            raise ValueError(f"sample {index}: mask is empty")
        fs = _sample_features(sample, params)
        cx, cy = mask_center(sample.mask)
        h, w = sample.mask.shape
        activations = match_all(codebook, fs.descriptors, params.t_match)
        for i, acts in enumerate(activations):
            x, y, s = (float(fs.positions[i, 0]), float(fs.positions[i, 1]),
                       float(fs.scales[i]))
            xi, yi = int(np.rint(x)), int(np.rint(y))
            inside = 0 <= xi < w and 0 <= yi < h and sample.mask[yi, xi] != 0
            for act in acts:
                counts[rows[act.word_id], sample.class_id] += 1
                if inside:
                    side = max(1, int(np.rint(params.support_factor * s)))
                    occurrences.append(Occurrence(
                        word_id=act.word_id,
                        class_id=sample.class_id,
                        dx=x - cx,
                        dy=y - cy,
                        scale=s,
                        mask_patch=crop_mask_patch(sample.mask, x, y, side),
                    ))
    occurrences.sort(key=Occurrence.sort_key)

    words = [replace(w, activations_by_class=counts[rows[w.id]].copy())
             for w in codebook.words]
    book = Codebook(words, codebook.descriptor_dim, list(codebook.class_names))
    if counts.sum() > 0:
        book = compute_gains(book, word_statistics(book, counts))
    config = {
        "t_match": params.t_match,
        "support_factor": params.support_factor,
        "descriptor_dim": codebook.descriptor_dim,
    }
    return Model(book, occurrences, list(codebook.class_names), config)


def prune_model(model: Model, t_q: int = 0, t_ig: float = 0.0) -> Model:
    """Apply cluster-size and information-gain thresholds to a trained model,
    dropping the occurrences of removed words. Both thresholds at their
    defaults leave the model unchanged."""
    kept = [w for w in model.codebook.words if w.member_count > t_q and w.gain >= t_ig]
    kept_ids = {w.id for w in kept}
    book = Codebook(kept, model.codebook.descriptor_dim, list(model.class_names))
    occs = [o for o in model.occurrences if o.word_id in kept_ids]
    return Model(book, occs, list(model.class_names), dict(model.config))


# ---------------------------------------------------------------------------
# model files
#
# Binary, little-endian. Layout: magic "ISM3D", u16 version, then tagged
# sections (4-byte tag, u64 payload length, payload). Unknown tags are
# skipped so older readers survive added sections.

_TAG_CODEBOOK = b"CBOK"
_TAG_OCCURRENCES = b"OCCR"
_TAG_CONFIG = b"CONF"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ModelFormatError(f"truncated file while reading {what}")
    return raw


def _codebook_payload(model: Model) -> bytes:
    buf = io.BytesIO()
    cb = model.codebook
    buf.write(struct.pack("<II", cb.descriptor_dim, len(model.class_names)))
    for name in model.class_names:
        buf.write(_pack_str(name))
    buf.write(struct.pack("<I", len(cb.words)))
    for w in cb.words:
        buf.write(struct.pack("<IId", w.id, w.member_count, w.gain))
        buf.write(struct.pack("<I", len(w.member_indices)))
        buf.write(np.asarray(w.member_indices, dtype="<u4").tobytes())
        if w.activations_by_class is None:
            buf.write(struct.pack("<B", 0))
        else:
            buf.write(struct.pack("<B", 1))
            buf.write(np.asarray(w.activations_by_class, dtype="<f8").tobytes())
        buf.write(w.centroid.astype("<f8").tobytes())
    return buf.getvalue()


def _occurrence_payload(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(model.occurrences)))
    for o in model.occurrences:
        h, w = o.mask_patch.shape
        buf.write(struct.pack("<IHdddHH", o.word_id, o.class_id,
                              o.dx, o.dy, o.scale, h, w))
        buf.write(o.mask_patch.astype(np.uint8).tobytes())
    return buf.getvalue()


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        for tag, payload in (
            (_TAG_CODEBOOK, _codebook_payload(model)),
            (_TAG_OCCURRENCES, _occurrence_payload(model)),
            (_TAG_CONFIG, json.dumps(model.config, sort_keys=True).encode("utf-8")),
        ):
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _parse_codebook(payload: bytes) -> tuple[Codebook, list[str]]:
    fh = io.BytesIO(payload)
    dim, n_classes = struct.unpack("<II", _read_exact(fh, 8, "codebook header"))
    class_names = []
    for _ in range(n_classes):
        (ln,) = struct.unpack("<H", _read_exact(fh, 2, "class name"))
        class_names.append(_read_exact(fh, ln, "class name").decode("utf-8"))
    (n_words,) = struct.unpack("<I", _read_exact(fh, 4, "word count"))
    words = []
    for _ in range(n_words):
        wid, member_count, gain = struct.unpack(
            "<IId", _read_exact(fh, 16, "word header"))
        (n_members,) = struct.unpack("<I", _read_exact(fh, 4, "member count"))
        members = np.frombuffer(
            _read_exact(fh, 4 * n_members, "member indices"), dtype="<u4")
        (has_acts,) = struct.unpack("<B", _read_exact(fh, 1, "activation flag"))
        acts = None
        if has_acts:
            acts = np.frombuffer(
                _read_exact(fh, 8 * n_classes, "activations"), dtype="<f8").copy()
        centroid = np.frombuffer(
            _read_exact(fh, 8 * dim, "centroid"), dtype="<f8").copy()
        words.append(Word(id=wid, centroid=centroid, member_count=member_count,
                          member_indices=tuple(int(m) for m in members),
                          activations_by_class=acts, gain=gain))
    return Codebook(words, dim, list(class_names)), class_names


def _parse_occurrences(payload: bytes) -> list[Occurrence]:
    fh = io.BytesIO(payload)
    (n,) = struct.unpack("<I", _read_exact(fh, 4, "occurrence count"))
    out = []
    header = struct.Struct("<IHdddHH")
    for _ in range(n):
        wid, cls, dx, dy, scale, h, w = header.unpack(
            _read_exact(fh, header.size, "occurrence"))
        patch = np.frombuffer(
            _read_exact(fh, h * w, "mask patch"), dtype=np.uint8)
        out.append(Occurrence(word_id=wid, class_id=cls, dx=dx, dy=dy,
                              scale=scale, mask_patch=patch.reshape(h, w).copy()))
    return out


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version > VERSION:
            raise ModelFormatError(
                f"file version {version} is newer than supported {VERSION}")
        codebook = None
        class_names: list[str] = []
        occurrences: list[Occurrence] = []
        config: dict = {}
        while True:
            tag = fh.read(4)
            if not tag:
                break
            if len(tag) != 4:
                raise ModelFormatError("truncated section tag")
            (length,) = struct.unpack("<Q", _read_exact(fh, 8, "section length"))
            payload = _read_exact(fh, length, f"section {tag!r}")
            if tag == _TAG_CODEBOOK:
                codebook, class_names = _parse_codebook(payload)
            elif tag == _TAG_OCCURRENCES:
                occurrences = _parse_occurrences(payload)
            elif tag == _TAG_CONFIG:
                config = json.loads(payload.decode("utf-8"))
            # unknown sections are ignored for forward compatibility
    if codebook is None:
        raise ModelFormatError("file has no codebook section")
    return Model(codebook, occurrences, class_names, config)
