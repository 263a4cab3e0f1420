import numpy as np
import pytest

from ism3d.codebook import Codebook, Word
from ism3d.features import FeatureSet
from ism3d.model import (
    ModelFormatError,
    TrainingParams,
    TrainingSample,
    load_model,
    mask_center,
    prune_model,
    save_model,
    train,
)


def basis(i, dim=6):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def simple_codebook(n_words=3, dim=6, class_names=("a", "b")):
    words = [Word(id=i, centroid=basis(i, dim), member_count=2)
             for i in range(n_words)]
    return Codebook(words, dim, list(class_names))


def feature_set(entries, dim=6):
    """entries: list of (x, y, scale, word_index)."""
    pos = [(e[0], e[1]) for e in entries]
    scales = [e[2] for e in entries]
    desc = np.stack([basis(e[3], dim) for e in entries])
    return FeatureSet(pos, scales, [np.nan] * len(entries), desc)


def box_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=np.uint8)
    m[y0:y1, x0:x1] = 1
    return m


class TestTrain:
    def test_feature_at_center_has_zero_offset(self):
        mask = box_mask(100, 100, 20, 81, 30, 91)  # bbox center (60, 50)
        fs = feature_set([(60.0, 50.0, 2.0, 0), (200.0, 200.0, 2.0, 1)])
        samples = [
            TrainingSample(class_id=0, mask=mask, features=fs),
            TrainingSample(class_id=1, mask=box_mask(100, 100, 0, 10, 0, 10),
                           features=feature_set([(5.0, 5.0, 1.0, 1)])),
        ]
        model = train(samples, simple_codebook())
        occ = [o for o in model.occurrences if o.class_id == 0]
        assert len(occ) == 1
        assert (occ[0].dx, occ[0].dy) == (0.0, 0.0)
        assert occ[0].scale == 2.0

    def test_offset_is_feature_minus_center(self):
        # feature (30, 40), bbox center (50, 50) -> offsets (-20, -10); a
        # vote x_f - dx * s_f/s_i then lands back on the center
        mask = box_mask(101, 101, 0, 101, 0, 101)
        fs = feature_set([(30.0, 40.0, 1.0, 0)])
        samples = [
            TrainingSample(class_id=0, mask=mask, features=fs),
            TrainingSample(class_id=1, mask=mask,
                           features=feature_set([(1.0, 1.0, 1.0, 1)])),
        ]
        model = train(samples, simple_codebook())
        occ = [o for o in model.occurrences if o.class_id == 0][0]
        assert (occ.dx, occ.dy) == (-20.0, -10.0)
        assert 30.0 - occ.dx * 1.0 == 50.0
        assert 40.0 - occ.dy * 1.0 == 50.0

    def test_occurrence_count_is_total_in_mask_activations(self):
        mask = box_mask(50, 50, 0, 50, 0, 25)  # left half
        fs = feature_set([
            (5.0, 5.0, 1.0, 0),    # inside
            (10.0, 10.0, 1.0, 1),  # inside
            (40.0, 10.0, 1.0, 2),  # outside
        ])
        samples = [
            TrainingSample(class_id=0, mask=mask, features=fs),
            TrainingSample(class_id=1, mask=mask,
                           features=feature_set([(3.0, 3.0, 1.0, 0)])),
        ]
        model = train(samples, simple_codebook())
        assert len(model.occurrences) == 3

    def test_empty_mask_rejected_with_sample_index(self):
        good = TrainingSample(class_id=0, mask=box_mask(10, 10, 0, 5, 0, 5),
                              features=feature_set([(2.0, 2.0, 1.0, 0)]))
        bad = TrainingSample(class_id=1, mask=np.zeros((10, 10)),
                             features=feature_set([(2.0, 2.0, 1.0, 1)]))
        with pytest.raises(ValueError, match="sample 1"):
            train([good, bad], simple_codebook())

    def test_missing_class_rejected(self):
        s = TrainingSample(class_id=0, mask=box_mask(10, 10, 0, 5, 0, 5),
                           features=feature_set([(2.0, 2.0, 1.0, 0)]))
        with pytest.raises(ValueError, match="classes \\[1\\]"):
            train([s], simple_codebook())

    def test_order_insensitive(self):
        rng = np.random.default_rng(0)
        samples = []
        for cls in range(2):
            for _ in range(3):
                entries = [(float(rng.uniform(5, 45)), float(rng.uniform(5, 45)),
                            float(rng.uniform(1, 3)), int(rng.integers(0, 3)))
                           for _ in range(4)]
                samples.append(TrainingSample(
                    class_id=cls, mask=box_mask(50, 50, 5, 45, 5, 45),
                    features=feature_set(entries)))
        m1 = train(samples, simple_codebook())
        m2 = train(samples[::-1], simple_codebook())
        assert m1.occurrences == m2.occurrences

    def test_mask_patch_values_come_from_mask(self):
        mask = box_mask(60, 60, 10, 50, 10, 30)
        fs = feature_set([(29.0, 30.0, 1.0, 0)])  # support straddles the edge
        samples = [
            TrainingSample(class_id=0, mask=mask, features=fs),
            TrainingSample(class_id=1, mask=mask,
                           features=feature_set([(15.0, 15.0, 1.0, 1)])),
        ]
        model = train(samples, simple_codebook())
        for occ in model.occurrences:
            assert set(np.unique(occ.mask_patch)) <= {0, 1}

    def test_words_carry_activation_counts_and_gain(self):
        mask = box_mask(20, 20, 0, 20, 0, 20)
        samples = [
            TrainingSample(class_id=0, mask=mask,
                           features=feature_set([(5.0, 5.0, 1.0, 0)])),
            TrainingSample(class_id=1, mask=mask,
                           features=feature_set([(5.0, 5.0, 1.0, 1)])),
        ]
        model = train(samples, simple_codebook())
        w0 = model.codebook.words[0]
        assert w0.activations_by_class.tolist() == [1.0, 0.0]
        assert w0.gain > 0.0


class TestMaskCenter:
    def test_bbox_centroid(self):
        assert mask_center(box_mask(100, 100, 20, 81, 30, 91)) == (60.0, 50.0)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            mask_center(np.zeros((5, 5)))


def trained_model():
    rng = np.random.default_rng(1)
    samples = []
    for cls in range(2):
        entries = [(float(rng.uniform(5, 45)), float(rng.uniform(5, 45)),
                    float(rng.uniform(1, 3)), int(rng.integers(0, 3)))
                   for _ in range(5)]
        samples.append(TrainingSample(
            class_id=cls, mask=box_mask(50, 50, 5, 45, 5, 45),
            features=feature_set(entries)))
    return train(samples, simple_codebook(), TrainingParams(t_match=0.9))


class TestModelFiles:
    def test_round_trip(self, tmp_path):
        model = trained_model()
        path = tmp_path / "m.ism"
        save_model(model, path)
        assert load_model(path) == model

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ism"
        path.write_bytes(b"NOTISM" + b"\x00" * 20)
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_truncated_file(self, tmp_path):
        model = trained_model()
        path = tmp_path / "m.ism"
        save_model(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 10])
        with pytest.raises(ModelFormatError, match="truncated"):
            load_model(path)

    def test_newer_version_rejected(self, tmp_path):
        model = trained_model()
        path = tmp_path / "m.ism"
        save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[5:7] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_unknown_section_skipped(self, tmp_path):
        # forward compatibility: files may grow optional sections
        model = trained_model()
        path = tmp_path / "m.ism"
        save_model(model, path)
        extra = b"XTRA" + (4).to_bytes(8, "little") + b"abcd"
        path.write_bytes(path.read_bytes() + extra)
        assert load_model(path) == model


class TestPruneModel:
    def test_identity_prune(self):
        model = trained_model()
        out = prune_model(model, t_q=0, t_ig=0.0)
        assert out == model

    def test_gain_prune_drops_occurrences(self):
        model = trained_model()
        gains = sorted(w.gain for w in model.codebook.words)
        cut = gains[-1]
        out = prune_model(model, t_ig=cut)
        kept = {w.id for w in out.codebook.words}
        assert all(o.word_id in kept for o in out.occurrences)
        assert len(out.codebook) < len(model.codebook)

    def test_size_prune(self):
        model = trained_model()
        out = prune_model(model, t_q=2)
        assert all(w.member_count > 2 for w in out.codebook.words)
