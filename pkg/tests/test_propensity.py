import logging

import numpy as np
import pytest

from ipsmf.data import RatingDataset
from ipsmf.propensity import (
    PropensityError,
    PropensityModel,
    SmoothingConfig,
    clip,
    estimate_mf_propensity,
    estimate_multifactorial,
    estimate_popularity,
    estimate_positivity,
    load_propensity,
    normalize,
    prepare,
    save_propensity,
    score,
    score_dataset,
    score_many,
    smoothed_item_given_rating,
    smoothed_joint_conditional,
    uniform_propensities,
)

from oracles import multifactorial_oracle, popularity_oracle, positivity_oracle


def make_dataset(n_users, n_items, triples, scale=(1, 5)):
    u, i, r = (np.array(x) for x in zip(*triples))
    return RatingDataset(n_users, n_items, u, i, r, scale)


class TestPositivity:
    def test_hand_counted_example(self):
        train = make_dataset(2, 2, [(0, 0, 5), (0, 1, 1), (1, 0, 5)])
        mcar = make_dataset(2, 2, [(0, 0, 5), (1, 1, 1)])
        model = estimate_positivity(train, mcar, 2, 2)
        # p(r) = |M| * count_D(r) / (|U| |I| * count_M(r))
        assert model.per_rating[4] == pytest.approx(1.0, abs=1e-12)   # (2*2)/(4*1)
        assert model.per_rating[0] == pytest.approx(0.5, abs=1e-12)   # (2*1)/(4*1)

    def test_no_bias_gives_all_ones(self):
        # full 2x2 observation, identical rating distributions in train and mcar
        train = make_dataset(2, 2, [(0, 0, 1), (0, 1, 2), (1, 0, 1), (1, 1, 2)],
                             scale=(1, 2))
        mcar = make_dataset(2, 2, [(0, 0, 1), (0, 1, 2)], scale=(1, 2))
        model = estimate_positivity(train, mcar, 2, 2)
        np.testing.assert_allclose(model.per_rating, 1.0, atol=1e-12)

    def test_all_fives_with_uniform_mcar(self, caplog):
        train = make_dataset(2, 3, [(0, 0, 5), (0, 1, 5), (1, 2, 5)])
        mcar = make_dataset(2, 3, [(0, 0, 1), (0, 1, 2), (0, 2, 3), (1, 0, 4), (1, 1, 5)])
        model = estimate_positivity(train, mcar, 2, 3)
        # raw value for rating 5 is (5*3)/(6*1) = 2.5, capped at 1
        assert model.per_rating[4] == 1.0
        assert model.per_rating[4] == model.per_rating.max()
        np.testing.assert_array_equal(model.per_rating[:4], 0.0)
        # unseen-in-train ratings rely on the clip floor
        clipped = clip(model, 0.01)
        assert score(clipped, 0, 0, 1) == 0.01

    def test_missing_mcar_rating_falls_back(self, caplog):
        train = make_dataset(2, 2, [(0, 0, 5), (0, 1, 1), (1, 0, 3)])
        mcar = make_dataset(2, 2, [(0, 0, 5), (1, 1, 1)])  # rating 3 unseen
        with caplog.at_level(logging.WARNING):
            model = estimate_positivity(train, mcar, 2, 2)
        assert "unseen" in caplog.text
        # fallback prior equals the smallest nonzero mcar prior (1/2)
        assert model.per_rating[2] == pytest.approx((2 * 1) / (4 * 1), abs=1e-12)

    def test_empty_mcar_rejected(self):
        train = make_dataset(2, 2, [(0, 0, 5), (0, 1, 1)])
        empty = RatingDataset(2, 2, np.array([], int), np.array([], int), np.array([], int))
        with pytest.raises(PropensityError):
            estimate_positivity(train, empty, 2, 2)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        train = make_dataset(4, 5, [(u, i, int(rng.integers(1, 6)))
                                    for u in range(4) for i in range(5)])
        mcar = make_dataset(4, 5, [(u, i, int(rng.integers(1, 6)))
                                   for u in range(4) for i in range(3)])
        model = estimate_positivity(train, mcar, 4, 5)
        oracle = positivity_oracle(train.triples(), mcar.triples(), 4, 5, range(1, 6))
        for r in range(1, 6):
            expected = min(oracle[r], 1.0)
            assert model.per_rating[r - 1] == pytest.approx(expected, abs=1e-12)


class TestPopularity:
    def test_raw_frequencies_and_rescale(self):
        train = make_dataset(2, 2, [(0, 0, 3), (1, 0, 4), (0, 1, 5)])
        model = estimate_popularity(train, 2, 2)
        raw = model.per_item * 2 / len(train)  # undo the |D|/num_users rescale
        np.testing.assert_allclose(raw, [2 / 3, 1 / 3], atol=1e-12)
        np.testing.assert_allclose(model.per_item, [1.0, 0.5], atol=1e-12)

    def test_equal_counts_give_uniform(self):
        train = make_dataset(3, 3, [(u, i, 3) for u in range(3) for i in range(3)])
        model = estimate_popularity(train, 3, 3)
        np.testing.assert_allclose(model.per_item, model.per_item[0])

    def test_unobserved_item_gets_clip_floor(self):
        train = make_dataset(2, 3, [(0, 0, 3), (1, 1, 4)])
        model = clip(estimate_popularity(train, 2, 3), 0.05)
        assert score(model, 0, 2, 3) == 0.05

    def test_item_relabeling_equivariance(self):
        rng = np.random.default_rng(3)
        triples = [(u, i, int(rng.integers(1, 6)))
                   for u in range(5) for i in range(4) if rng.random() < 0.6]
        train = make_dataset(5, 4, triples)
        perm = np.array([2, 0, 3, 1])  # new index of each old item
        relabeled = make_dataset(5, 4, [(u, int(perm[i]), r) for u, i, r in triples])
        base = estimate_popularity(train, 5, 4).per_item
        moved = estimate_popularity(relabeled, 5, 4).per_item
        np.testing.assert_allclose(moved[perm], base, atol=1e-15)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        triples = [(u, i, int(rng.integers(1, 6)))
                   for u in range(4) for i in range(6) if rng.random() < 0.7]
        train = make_dataset(4, 6, triples)
        model = estimate_popularity(train, 4, 6)
        oracle = popularity_oracle(train.triples(), 4, 6)
        for i in range(6):
            assert model.per_item[i] == pytest.approx(oracle[i], abs=1e-12)


class TestMultifactorial:
    def small_fixture(self):
        train = make_dataset(2, 2, [(0, 0, 1), (0, 1, 2), (1, 0, 1)], scale=(1, 2))
        mcar = make_dataset(2, 2, [(0, 0, 1), (1, 1, 2)], scale=(1, 2))
        return train, mcar

    def test_hand_counted_cells(self):
        # exact fractions, computed independently from the three formulas
        train, mcar = self.small_fixture()
        model = estimate_multifactorial(train, mcar, 2, 2, SmoothingConfig(1, 1))
        np.testing.assert_allclose(
            model.per_item_rating,
            [[27 / 28, 9 / 14], [9 / 14, 9 / 14]],
            atol=1e-12,
        )

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        train = make_dataset(5, 3, [(u, i, int(rng.integers(1, 6)))
                                    for u in range(5) for i in range(3)])
        # every rating value appears in the unbiased sample
        mcar = make_dataset(5, 3, [(u, u % 3, u + 1) for u in range(5)]
                            + [(0, 1, 3), (1, 2, 5)])
        model = estimate_multifactorial(train, mcar, 5, 3, SmoothingConfig(2.0, 3.0))
        oracle = multifactorial_oracle(
            train.triples(), mcar.triples(), 5, 3, range(1, 6), 2.0, 3.0
        )
        for i in range(3):
            for r in range(1, 6):
                expected = min(oracle[(i, r)], 1.0)
                assert model.per_item_rating[i, r - 1] == pytest.approx(
                    expected, abs=1e-12
                )

    def test_smoothed_tables_normalize(self):
        train, mcar = self.small_fixture()
        rng = np.random.default_rng(7)
        for _ in range(5):
            a1, a2 = rng.uniform(0.1, 10, size=2)
            joint = smoothed_joint_conditional(train, 2, a1)
            assert joint.sum() == pytest.approx(1.0, abs=1e-9)
            cond = smoothed_item_given_rating(mcar, 2, a2)
            np.testing.assert_allclose(cond.sum(axis=0), 1.0, atol=1e-9)

    def test_large_alpha_flattens(self):
        train, mcar = self.small_fixture()
        spread = lambda t: float(t.max() - t.min())
        weak = smoothed_joint_conditional(train, 2, 1.0)
        strong = smoothed_joint_conditional(train, 2, 100.0)
        assert spread(strong) < spread(weak)
        weak_c = smoothed_item_given_rating(mcar, 2, 1.0)
        strong_c = smoothed_item_given_rating(mcar, 2, 100.0)
        assert spread(strong_c) < spread(weak_c)

    def test_alpha2_zero_with_zero_counts_rejected(self):
        train, mcar = self.small_fixture()
        with pytest.raises(PropensityError, match="alpha2"):
            estimate_multifactorial(train, mcar, 2, 2, SmoothingConfig(1.0, 0.0))

    def test_mcar_rating_gap_falls_back(self, caplog):
        train = make_dataset(2, 2, [(0, 0, 1), (0, 1, 2), (1, 0, 1)], scale=(1, 2))
        mcar = make_dataset(2, 2, [(0, 0, 1), (1, 0, 1)], scale=(1, 2))  # no rating 2
        with caplog.at_level(logging.WARNING):
            model = estimate_multifactorial(train, mcar, 2, 2, SmoothingConfig(1, 1))
        assert "unseen" in caplog.text
        assert np.all(model.per_item_rating > 0)


class TestMFLearned:
    def test_fully_observed_matrix_fits_near_one(self):
        triples = [(u, i, 3) for u in range(10) for i in range(10)]
        train = make_dataset(10, 10, triples)
        model = estimate_mf_propensity(train, 10, 10, dim=2, max_steps=400, seed=0)
        scores = score_dataset(model, train)
        assert np.all(scores > 0.95)

    def test_recovers_known_logistic_structure(self):
        # strong rank-1 signal plus item intercepts: a single observation draw
        # carries enough information to pin the propensity ordering
        rng = np.random.default_rng(11)
        n = 50
        true_logits = (
            3.0 * rng.normal(0, 1, size=(n, 1)) @ rng.normal(0, 1, size=(1, n))
            + rng.normal(-0.5, 1.0, size=(1, n))
        )
        true_p = 1.0 / (1.0 + np.exp(-true_logits))
        obs = rng.random((n, n)) < true_p
        users, items = np.nonzero(obs)
        train = RatingDataset(n, n, users, items, np.full(len(users), 3))
        model = estimate_mf_propensity(
            train, n, n, dim=2, learning_rate=0.1, max_steps=4000, seed=1
        )
        uu, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        fitted = score_many(model, uu.ravel(), ii.ravel(), np.full(n * n, 3))

        def ranks(x):
            r = np.empty(len(x))
            r[np.argsort(x)] = np.arange(len(x))
            return r

        rho = np.corrcoef(ranks(fitted), ranks(true_p.ravel()))[0, 1]
        assert rho > 0.9

    def test_empty_row_user_scores_near_base_rate(self):
        # an empty row over only 6 items is weak evidence, so shrinkage keeps
        # the cold user near the overall observation rate
        rng = np.random.default_rng(2)
        obs = rng.random((40, 6)) < 0.3
        obs[0, :] = False
        users, items = np.nonzero(obs)
        train = RatingDataset(40, 6, users, items, np.full(len(users), 3))
        model = estimate_mf_propensity(
            train, 40, 6, dim=2, l2_weight=1e-2, max_steps=800, seed=3
        )
        cold = score_many(model, np.zeros(6, int), np.arange(6), np.full(6, 3))
        assert abs(cold.mean() - obs.mean()) < 0.15


class TestClipNormalizeScore:
    def test_clip_floors_scores(self):
        model = PropensityModel(family="positivity",
                                per_rating=np.array([0.001, 0.5, 0.5, 0.5, 0.5]))
        clipped = clip(model, 0.01)
        assert score(clipped, 0, 0, 1) == 0.01
        assert score(clipped, 0, 0, 2) == 0.5

    def test_clip_one_recovers_unweighted(self):
        model = PropensityModel(family="positivity",
                                per_rating=np.array([0.1, 0.2, 0.3, 0.4, 0.5]))
        clipped = clip(model, 1.0)
        data = make_dataset(1, 5, [(0, i, i + 1) for i in range(5)])
        np.testing.assert_array_equal(score_dataset(clipped, data), 1.0)

    def test_clip_below_min_is_identity(self):
        model = PropensityModel(family="positivity",
                                per_rating=np.array([0.2, 0.3, 0.4, 0.5, 0.6]))
        data = make_dataset(1, 5, [(0, i, i + 1) for i in range(5)])
        np.testing.assert_array_equal(
            score_dataset(clip(model, 0.1), data), score_dataset(model, data)
        )

    def test_clip_rejects_bad_tau(self):
        model = uniform_propensities(make_dataset(1, 2, [(0, 0, 3), (0, 1, 4)]), 1, 2)
        for tau in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                clip(model, tau)

    def test_normalize_fixed_point(self):
        # full coverage popularity: mean inverse already equals |U||I|/|D|
        train = make_dataset(3, 3, [(u, i, 3) for u in range(3) for i in range(3)])
        model = estimate_popularity(train, 3, 3)
        normalized = normalize(model, train)
        assert normalized.scale == pytest.approx(1.0, abs=1e-9)

    def test_normalize_undoes_uniform_rescale(self):
        train = make_dataset(2, 3, [(0, 0, 2), (0, 1, 4), (1, 0, 5), (1, 2, 1)])
        base = estimate_popularity(train, 2, 3)
        halved = PropensityModel(
            family="popularity", per_item=base.per_item * 0.5,
            rating_scale=base.rating_scale,
        )
        renormalized = normalize(halved, train)
        np.testing.assert_allclose(
            score_dataset(renormalized, train),
            score_dataset(normalize(base, train), train),
            atol=1e-12,
        )

    def test_normalize_postcondition_on_random_table(self):
        # sparse data and a narrow score range keep the rescaled values below
        # the cap at 1, so the mean-inverse identity is exact
        rng = np.random.default_rng(13)
        triples = [(u, i, int(rng.integers(1, 6)))
                   for u in range(6) for i in range(7) if rng.random() < 0.12]
        train = make_dataset(6, 7, triples)
        model = PropensityModel(
            family="multifactorial",
            per_item_rating=rng.uniform(0.2, 0.4, size=(7, 5)),
        )
        normalized = normalize(model, train)
        scores = score_dataset(normalized, train)
        assert scores.max() < 1.0  # cap not binding
        assert (1.0 / scores).mean() == pytest.approx(6 * 7 / len(train), abs=1e-9)

    def test_prepare_orders_normalize_then_clip(self):
        train = make_dataset(2, 3, [(0, 0, 2), (0, 1, 4), (1, 0, 5), (1, 2, 1)])
        model = prepare(estimate_popularity(train, 2, 3), train, clip_floor=0.2)
        assert model.clip_floor == 0.2
        assert model.normalization == "mean-inverse"

    def test_uniform_family_value(self):
        train = make_dataset(2, 3, [(0, 0, 2), (1, 1, 4), (1, 2, 5)])
        model = uniform_propensities(train, 2, 3)
        assert score(model, 0, 0, 1) == pytest.approx(3 / 6)

    def test_popularity_ignores_rating(self):
        train = make_dataset(2, 2, [(0, 0, 1), (1, 0, 5), (0, 1, 3)])
        model = estimate_popularity(train, 2, 2)
        assert score(model, 0, 0, 1) == score(model, 0, 0, 5)

    def test_positivity_ignores_user_and_item(self):
        train = make_dataset(2, 2, [(0, 0, 5), (0, 1, 1), (1, 0, 5)])
        mcar = make_dataset(2, 2, [(0, 0, 5), (1, 1, 1)])
        model = estimate_positivity(train, mcar, 2, 2)
        assert score(model, 0, 0, 5) == score(model, 1, 1, 5)

    def test_ground_truth_returns_stored_value(self):
        table = np.array([[0.1, 0.2, 0.3, 0.4, 0.5], [0.05, 0.1, 0.15, 0.2, 0.25]])
        model = PropensityModel(family="ground_truth", per_item_rating=table)
        assert score(model, 7, 1, 3) == table[1, 2]

    def test_out_of_range_index_rejected(self):
        model = PropensityModel(family="popularity", per_item=np.array([0.5, 0.5]))
        with pytest.raises(IndexError):
            score(model, 0, 2, 3)

    def test_scores_in_unit_interval_after_clip(self):
        rng = np.random.default_rng(17)
        train = make_dataset(4, 4, [(u, i, int(rng.integers(1, 6)))
                                    for u in range(4) for i in range(4)])
        mcar = make_dataset(4, 4, [(u, i, int(rng.integers(1, 6)))
                                   for u in range(4) for i in range(2)])
        models = [
            uniform_propensities(train, 4, 4),
            estimate_popularity(train, 4, 4),
            estimate_positivity(train, mcar, 4, 4),
            estimate_multifactorial(train, mcar, 4, 4, SmoothingConfig(1, 1)),
            estimate_mf_propensity(train, 4, 4, dim=2, max_steps=50, seed=0),
        ]
        for model in models:
            scores = score_dataset(prepare(model, train, clip_floor=0.01), train)
            assert np.all(scores > 0) and np.all(scores <= 1)


class TestSerialization:
    def roundtrip(self, model, tmp_path):
        path = tmp_path / "prop.csv"
        save_propensity(model, path)
        return load_propensity(path)

    def test_table_families_roundtrip(self, tmp_path):
        rng = np.random.default_rng(23)
        train = make_dataset(3, 4, [(u, i, int(rng.integers(1, 6)))
                                    for u in range(3) for i in range(4)])
        mcar = make_dataset(3, 4, [(u, i, int(rng.integers(1, 6)))
                                   for u in range(3) for i in range(2)])
        models = [
            uniform_propensities(train, 3, 4),
            clip(estimate_popularity(train, 3, 4), 0.05),
            estimate_positivity(train, mcar, 3, 4),
            normalize(
                estimate_multifactorial(train, mcar, 3, 4, SmoothingConfig(2, 1)), train
            ),
        ]
        for model in models:
            back = self.roundtrip(model, tmp_path)
            assert back.family == model.family
            assert back.clip_floor == model.clip_floor
            assert back.scale == model.scale
            np.testing.assert_array_equal(
                score_dataset(back, train), score_dataset(model, train)
            )

    def test_ground_truth_roundtrip_exact(self, tmp_path):
        table = np.random.default_rng(29).uniform(0.01, 1.0, size=(5, 5))
        model = PropensityModel(family="ground_truth", per_item_rating=table)
        back = self.roundtrip(model, tmp_path)
        np.testing.assert_array_equal(back.per_item_rating, table)

    def test_mf_learned_roundtrip(self, tmp_path):
        train = make_dataset(3, 3, [(0, 0, 3), (1, 1, 2), (2, 2, 4), (0, 1, 5)])
        model = estimate_mf_propensity(train, 3, 3, dim=2, max_steps=30, seed=0)
        back = self.roundtrip(model, tmp_path)
        np.testing.assert_array_equal(
            score_dataset(back, train), score_dataset(model, train)
        )

    def test_header_records_family_and_smoothing(self, tmp_path):
        train = make_dataset(2, 2, [(0, 0, 1), (0, 1, 2), (1, 0, 1)], scale=(1, 2))
        mcar = make_dataset(2, 2, [(0, 0, 1), (1, 1, 2)], scale=(1, 2))
        model = clip(
            estimate_multifactorial(train, mcar, 2, 2, SmoothingConfig(10, 2)), 0.05
        )
        path = tmp_path / "prop.csv"
        save_propensity(model, path)
        header = path.read_text().splitlines()[0]
        for expected in ("family=multifactorial", "tau=0.05", "alpha1=10.0", "alpha2=2.0"):
            assert expected in header
