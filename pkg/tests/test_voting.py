import numpy as np
import pytest

from oracles import (
    clustered_vote_set,
    grid_points,
    grid_search_modes,
    make_votes,
    normalized_dist,
)
from ism3d.codebook import Activation, Codebook, Word
from ism3d.features import FeatureSet
from ism3d.model import Model, Occurrence
from ism3d.voting import (
    Bandwidths,
    NoVotesError,
    VotingSpace,
    cast_votes,
    mean_shift,
    voting_confidence,
    write_votes_csv,
)


def basis(i, dim=4):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def build_model(occ_specs, n_words=2, class_names=("a", "b")):
    """occ_specs: list of (word_id, class_id, dx, dy, scale)."""
    words = [Word(id=i, centroid=basis(i), member_count=2) for i in range(n_words)]
    book = Codebook(words, 4, list(class_names))
    occs = [Occurrence(word_id=w, class_id=c, dx=dx, dy=dy, scale=s,
                       mask_patch=np.ones((4, 4), dtype=np.uint8))
            for (w, c, dx, dy, s) in occ_specs]
    return Model(book, occs, list(class_names))


def one_feature(x, y, scale, depth=None, word=0):
    return FeatureSet([(x, y)], [scale],
                      [np.nan if depth is None else depth],
                      basis(word).reshape(1, -1))


class TestCastVotes:
    def test_center_projection(self):
        # feature (80, 60, s=2), occurrence (dx=10, dy=-4, s_i=1)
        model = build_model([(0, 0, 10.0, -4.0, 1.0)])
        fs = one_feature(80.0, 60.0, 2.0, depth=1.5)
        votes = cast_votes(fs, [[Activation(0, 1.0)]], model, VotingSpace.ISM)
        assert votes[0].coords == (60.0, 68.0, 2.0)
        assert votes[0].class_id is None

    def test_depth_variant_coordinates(self):
        model = build_model([(0, 0, 10.0, -4.0, 1.0)])
        fs = one_feature(80.0, 60.0, 2.0, depth=1.5)
        acts = [[Activation(0, 1.0)]]
        v1 = cast_votes(fs, acts, model, VotingSpace.JI3SM1)[0]
        assert v1.coords == (60.0, 68.0, 2.0, 1.5)
        v2 = cast_votes(fs, acts, model, VotingSpace.JI3SM2)[0]
        assert v2.coords == (60.0, 68.0, 1.5)
        assert v2.class_id == 0
        v3 = cast_votes(fs, acts, model, VotingSpace.JI3SM3)[0]
        assert v3.coords[2] == 3.0  # d_f * s_f / s_i = 1.5 * 2

    def test_jism_adds_class_to_ism_coords(self):
        model = build_model([(0, 1, 10.0, -4.0, 1.0)])
        fs = one_feature(80.0, 60.0, 2.0)
        v = cast_votes(fs, [[Activation(0, 1.0)]], model, VotingSpace.JISM)[0]
        assert v.coords == (60.0, 68.0, 2.0)
        assert v.class_id == 1

    def test_weight_two_words_five_occurrences(self):
        # feature activates 2 words; the voting word has 5 occurrences of one
        # class -> every one of its votes weighs 1/2 * 1/5
        occ_specs = [(0, 0, float(i), 0.0, 1.0) for i in range(5)]
        occ_specs.append((1, 0, 0.0, 0.0, 1.0))
        model = build_model(occ_specs)
        fs = one_feature(10.0, 10.0, 1.0)
        acts = [[Activation(0, 1.0), Activation(1, 0.9)]]
        votes = cast_votes(fs, acts, model, VotingSpace.ISM)
        word0 = [v for v in votes if v.word_id == 0]
        assert len(word0) == 5
        assert all(v.weight == pytest.approx(0.1) for v in word0)

    def test_total_weight_per_feature_is_one_for_single_class_words(self):
        rng = np.random.default_rng(0)
        occ_specs = []
        for w, cls in ((0, 0), (1, 1)):
            for _ in range(int(rng.integers(1, 6))):
                occ_specs.append((w, cls, float(rng.uniform(-5, 5)),
                                  float(rng.uniform(-5, 5)), 1.0))
        model = build_model(occ_specs)
        fs = one_feature(0.0, 0.0, 1.0)
        acts = [[Activation(0, 1.0), Activation(1, 0.9)]]
        votes = cast_votes(fs, acts, model, VotingSpace.JISM)
        assert sum(v.weight for v in votes) == pytest.approx(1.0)

    def test_depthless_feature_skipped_only_in_depth_spaces(self):
        model = build_model([(0, 0, 0.0, 0.0, 1.0)])
        fs = one_feature(10.0, 10.0, 1.0, depth=None)
        acts = [[Activation(0, 1.0)]]
        assert cast_votes(fs, acts, model, VotingSpace.ISM)
        assert cast_votes(fs, acts, model, VotingSpace.JISM)
        for variant in (VotingSpace.JI3SM1, VotingSpace.JI3SM2, VotingSpace.JI3SM3):
            assert cast_votes(fs, acts, model, variant) == []

    def test_round_trip_recovers_feature(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            dx, dy = rng.uniform(-50, 50, 2)
            s_i = rng.uniform(0.5, 4.0)
            x_f, y_f = rng.uniform(0, 300, 2)
            s_f = rng.uniform(0.5, 4.0)
            model = build_model([(0, 0, dx, dy, s_i)])
            fs = one_feature(float(x_f), float(y_f), float(s_f))
            v = cast_votes(fs, [[Activation(0, 1.0)]], model, VotingSpace.ISM)[0]
            cx, cy, r = v.coords
            assert cx + dx * r == pytest.approx(x_f, rel=1e-12)
            assert cy + dy * r == pytest.approx(y_f, rel=1e-12)
            assert r * s_i == pytest.approx(s_f, rel=1e-12)


BW = Bandwidths(xy=10.0, scale=0.15, depth=0.15, scaled_depth=0.15)


def vote_set(rng, **kwargs):
    return clustered_vote_set(rng, BW, VotingSpace.ISM, **kwargs)


class TestMeanShift:
    def test_identical_votes_single_mode(self):
        votes = make_votes([(50.0, 50.0, 1.0)] * 5, weights=[0.2] * 5)
        hyps = mean_shift(votes, BW, VotingSpace.ISM)
        assert len(hyps) == 1
        assert hyps[0].coords == (50.0, 50.0, 1.0)
        assert hyps[0].score == pytest.approx(1.0)
        assert hyps[0].supporting == (0, 1, 2, 3, 4)

    def test_two_far_clusters_two_equal_modes(self):
        votes = make_votes([(0.0, 0.0, 1.0)] * 5 + [(100.0, 100.0, 1.0)] * 5)
        hyps = mean_shift(votes, BW, VotingSpace.ISM)
        assert len(hyps) == 2
        assert hyps[0].score == hyps[1].score == pytest.approx(5.0)
        # tie broken by (x, y)
        assert hyps[0].coords[:2] == (0.0, 0.0)

    def test_empty_votes(self):
        assert mean_shift([], BW, VotingSpace.ISM) == []

    def test_order_independent(self):
        rng = np.random.default_rng(8)
        votes = vote_set(rng)
        perm = list(rng.permutation(len(votes)))
        shuffled = [votes[i] for i in perm]
        h1 = mean_shift(votes, BW, VotingSpace.ISM)
        h2 = mean_shift(shuffled, BW, VotingSpace.ISM)
        assert [(h.coords, h.score) for h in h1] == [(h.coords, h.score) for h in h2]
        # supporting votes are the same votes, modulo the permutation
        for a, b in zip(h1, h2):
            assert {votes[i] for i in a.supporting} == \
                   {shuffled[i] for i in b.supporting}

    def test_classes_are_separate_partitions(self):
        votes = make_votes([(0.0, 0.0, 1.0)] * 4, class_ids=[0, 0, 1, 1])
        hyps = mean_shift(votes, BW, VotingSpace.JISM)
        assert len(hyps) == 2
        assert {h.class_id for h in hyps} == {0, 1}

    def test_supporting_votes_within_one_bandwidth(self):
        rng = np.random.default_rng(3)
        votes = vote_set(rng)
        bwv = BW.for_variant(VotingSpace.ISM)
        for h in mean_shift(votes, BW, VotingSpace.ISM):
            for i in h.supporting:
                delta = np.abs(np.asarray(votes[i].coords) - h.coords) / bwv
                assert np.all(delta <= 1.0 + 1e-9)

    def test_depth_separation_never_cosupported(self):
        # votes whose depth coordinates differ by more than 2 b_d cannot
        # support one hypothesis
        rng = np.random.default_rng(9)
        points = [(50.0, 50.0, 1.0), (50.0, 50.0, 1.5)]
        votes = make_votes(points, class_ids=[0, 0])
        hyps = mean_shift(votes, BW, VotingSpace.JI3SM2)
        for h in hyps:
            depths = [votes[i].coords[2] for i in h.supporting]
            assert max(depths) - min(depths) <= 2 * BW.depth + 1e-12

    def test_matches_grid_search_oracle_module_example(self):
        # 50 votes in a 200 x 200 x [0.5, 2] box
        rng = np.random.default_rng(12)
        votes = vote_set(rng, box=(200.0, 200.0), max_votes=50)
        hyps = mean_shift(votes, BW, VotingSpace.ISM)
        bwv = BW.for_variant(VotingSpace.ISM)
        axes, density, mode_mask = grid_search_modes(votes, BW, VotingSpace.ISM)
        modes = grid_points(axes, mode_mask)
        # same top-1: the strongest hypothesis sits within 0.5 normalized
        # bandwidth of a grid point achieving the global density maximum
        peak_pts = grid_points(axes, density >= density.max() - 1e-9)
        assert min(normalized_dist(hyps[0].coords, p, bwv)
                   for p in peak_pts) < 0.5
        # every reported mode is near a grid mode
        for h in hyps:
            assert min(normalized_dist(h.coords, p, bwv) for p in modes) < 0.5


class TestVotingConfidence:
    def test_all_votes_inside_strongest_window(self):
        votes = make_votes([(10.0, 10.0, 1.0)] * 4)
        hyps = mean_shift(votes, BW, VotingSpace.ISM)
        assert voting_confidence(votes, hyps, BW, VotingSpace.ISM) == 1.0

    def test_half_weight_outside(self):
        votes = make_votes([(0.0, 0.0, 1.0)] * 2 + [(500.0, 500.0, 1.0)],
                           weights=[0.25, 0.25, 0.5])
        hyps = mean_shift(votes, BW, VotingSpace.ISM)
        assert voting_confidence(votes, hyps, BW, VotingSpace.ISM) == \
            pytest.approx(0.5)

    def test_no_votes_is_signaled(self):
        with pytest.raises(NoVotesError):
            voting_confidence([], [], BW, VotingSpace.ISM)

    def test_other_class_votes_not_counted_inside(self):
        votes = make_votes([(0.0, 0.0, 1.0)] * 3 + [(0.0, 0.0, 1.0)],
                           class_ids=[0, 0, 0, 1])
        hyps = mean_shift(votes, BW, VotingSpace.JISM)
        assert voting_confidence(votes, hyps, BW, VotingSpace.JISM) == \
            pytest.approx(0.75)


class TestJismReducesToIsm:
    def test_single_class_votes_and_modes_match(self):
        rng = np.random.default_rng(5)
        occ_specs = [(0, 0, float(rng.uniform(-10, 10)),
                      float(rng.uniform(-10, 10)), float(rng.uniform(0.5, 2)))
                     for _ in range(4)]
        model = build_model(occ_specs, class_names=("only",))
        pos = rng.uniform(10, 90, (6, 2))
        fs = FeatureSet(pos, rng.uniform(0.5, 2, 6), [np.nan] * 6,
                        np.tile(basis(0), (6, 1)))
        acts = [[Activation(0, 1.0)] for _ in range(6)]
        v_ism = cast_votes(fs, acts, model, VotingSpace.ISM)
        v_jism = cast_votes(fs, acts, model, VotingSpace.JISM)
        assert [(v.coords, v.weight) for v in v_ism] == \
               [(v.coords, v.weight) for v in v_jism]
        h_ism = mean_shift(v_ism, BW, VotingSpace.ISM)
        h_jism = mean_shift(v_jism, BW, VotingSpace.JISM)
        assert [(h.coords, h.score, h.supporting) for h in h_ism] == \
               [(h.coords, h.score, h.supporting) for h in h_jism]


def test_votes_csv_export(tmp_path):
    votes = make_votes([(1.0, 2.0, 3.0)], weights=[0.5])
    path = tmp_path / "votes.csv"
    write_votes_csv(votes, VotingSpace.ISM, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("variant,c0,c1,c2")
    assert lines[1].split(",")[:4] == ["ism", "1.0", "2.0", "3.0"]
