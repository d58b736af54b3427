import itertools

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from outfitforge import evalsim as ev, fom, pog
from outfitforge.pipeline import outfit_indices

import oracles


@pytest.fixture(scope="module")
def tiny_outfits(tiny_world):
    return outfit_indices(tiny_world.catalog, tiny_world.outfits)


@pytest.fixture(scope="module")
def untrained_fom():
    return fom.FomModel.init(fom.FomConfig(embed_dim=8, model_dim=8, num_layers=1, seed=5))


class TestFitb:
    def test_instances(self, tiny_outfits):
        inst = ev.build_fitb_instances(tiny_outfits[:20], seed=1)
        assert len(inst) == sum(len(o) for o in tiny_outfits[:20])
        for i in inst:
            assert len(i.choices) == 4 and i.choices[i.answer] == i.truth
            assert len(set(i.choices)) == 4
            assert not set(i.choices) - {i.truth} & set(i.outfit)
            assert len(i.context) == len(i.outfit) - 1

    def test_instances_seeded(self, tiny_outfits):
        assert ev.build_fitb_instances(tiny_outfits, 3) == ev.build_fitb_instances(tiny_outfits, 3)

    def test_oracle_and_adversary(self, tiny_outfits):
        inst = ev.build_fitb_instances(tiny_outfits, seed=0)
        assert ev.eval_fitb(ev.OracleScorer(), inst) == 1.0
        assert ev.eval_fitb(ev.OracleScorer(adversarial=True), inst) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            ev.eval_fitb(ev.OracleScorer(), [])

    def test_model_matches_fitb_choose(self, tiny_outfits, tiny_vecs, untrained_fom):
        inst = ev.build_fitb_instances(tiny_outfits[:15], seed=2)
        pred = ev.fitb_predictions(untrained_fom, inst, tiny_vecs)
        for p, i in zip(pred, inst):
            outfit = [tiny_vecs[k] if b != i.blank else None for b, k in enumerate(i.outfit)]
            assert p == fom.fitb_choose(outfit, tiny_vecs[list(i.choices)], untrained_fom)

    def test_distractor_order_invariance(self, tiny_outfits, tiny_vecs, untrained_fom):
        inst = ev.build_fitb_instances(tiny_outfits, seed=4)
        rng = np.random.default_rng(0)
        shuffled = []
        for i in inst:
            d = [c for c in i.choices if c != i.truth]
            d = [d[k] for k in rng.permutation(len(d))]
            ch = d[:i.answer] + [i.truth] + d[i.answer:]
            shuffled.append(ev.FitbInstance(i.outfit, i.blank, tuple(ch), i.answer))
        assert ev.eval_fitb(untrained_fom, inst, tiny_vecs) == ev.eval_fitb(untrained_fom, shuffled, tiny_vecs)

    def test_worker_count_irrelevant(self, tiny_outfits, tiny_vecs, untrained_fom):
        inst = ev.build_fitb_instances(tiny_outfits, seed=5)
        a = ev.fitb_predictions(untrained_fom, inst, tiny_vecs, workers=1)
        b = ev.fitb_predictions(untrained_fom, inst, tiny_vecs, workers=3)
        assert np.array_equal(a, b)


class TestAuc:
    def test_perfect(self):
        assert ev.auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert ev.auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    @pytest.mark.parametrize("scores,want", [([0.9, 0.8, 0.3], 1.0), ([0.3, 0.8, 0.9], 0.0)])
    def test_three_point(self, scores, want):
        assert ev.auc(scores, [1, 0, 0]) == want == oracles.auc_pairs(scores, [1, 0, 0])

    def test_single_class(self):
        with pytest.raises(ValueError):
            ev.auc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("n", range(2, 6))
    def test_exhaustive_small(self, n):
        for labels in itertools.product((0, 1), repeat=n):
            if 0 < sum(labels) < n:
                for scores in itertools.product(range(n), repeat=n):
                    assert ev.auc(scores, labels) == oracles.auc_pairs(scores, labels)

    @pytest.mark.parametrize("n", range(6, 9))
    def test_exhaustive_labels_sampled_scores(self, n):
        rng = np.random.default_rng(n)
        for labels in itertools.product((0, 1), repeat=n):
            if 0 < sum(labels) < n:
                for _ in range(20):
                    scores = rng.integers(0, int(rng.integers(1, n + 1)), size=n).tolist()
                    assert ev.auc(scores, labels) == oracles.auc_pairs(scores, labels)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.booleans()), min_size=2, max_size=8))
    def test_property(self, rows):
        labels = [l for _, l in rows]
        if all(labels) or not any(labels):
            return
        scores = [s for s, _ in rows]
        assert ev.auc(scores, labels) == oracles.auc_pairs(scores, labels)


class TestCp:
    def test_balanced_same_sizes(self, tiny_outfits):
        inst = ev.build_cp_instances(tiny_outfits, seed=0)
        pos = [i for i in inst if i.label == 1]
        neg = [i for i in inst if i.label == 0]
        assert len(pos) == len(neg) == len(tiny_outfits)
        assert sorted(len(i.outfit) for i in pos) == sorted(len(i.outfit) for i in neg)
        assert all(len(set(i.outfit)) == len(i.outfit) for i in neg)

    def test_oracle(self, tiny_outfits):
        assert ev.eval_cp(ev.OracleScorer(), ev.build_cp_instances(tiny_outfits)) == 1.0

    def test_single_class(self, tiny_outfits):
        with pytest.raises(ValueError):
            ev.eval_cp(ev.OracleScorer(), [ev.CpInstance((1, 2), 1)])

    def test_model_auc_matches_manual(self, tiny_outfits, tiny_vecs, untrained_fom):
        inst = ev.build_cp_instances(tiny_outfits[:30], seed=1)
        scores = [fom.cp_score(i.outfit, tiny_vecs, untrained_fom, seed=2) for i in inst]
        want = oracles.auc_pairs(scores, [i.label for i in inst])
        assert ev.eval_cp(untrained_fom, inst, tiny_vecs, seed=2) == pytest.approx(want, abs=1e-12)


class TestCf:
    def test_single_coclicked_item_is_top(self):
        histories = [[0, 3], [1], [2]]
        sim = ev.item_similarity(ev.coclick_matrix(histories, 4))
        scores = ev.cf_item_scores([0], [1, 2, 3], sim)
        assert np.argmax(scores) == 2 and scores[0] == scores[1] == 0.0
        assert ev.cf_recommend([0], [[1], [2], [3]], similarity=sim)[0] == 2

    def test_orthogonal_falls_back_to_pool_order(self):
        coclick = np.eye(5)
        assert ev.cf_recommend([0], [[3], [1, 2], [4]], coclick) == [0, 1, 2]

    def test_brute_force_three_users(self):
        histories = [[0, 1, 2], [1, 2, 3, 3], [0, 4]]
        M = ev.coclick_matrix(histories, 5)
        cols = M.T.tolist()
        pool = [[1, 3], [4], [2, 3], [3]]
        hist = [0]

        def best(o):
            return max(sum(oracles.cosine(cols[i], cols[h]) for h in hist) for i in o if i not in hist)
        want = sorted(range(len(pool)), key=lambda k: (-best(pool[k]), k))
        assert ev.cf_recommend(hist, pool, M) == want

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 1000))
    @example(seed=1828, c=1.5)      # exact ties that rounding used to split
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        M = rng.integers(0, 3, size=(6, 12)).astype(float)
        pool = [rng.choice(12, size=3, replace=False).tolist() for _ in range(8)]
        hist = rng.choice(12, size=2, replace=False).tolist()
        assert ev.cf_recommend(hist, pool, M) == ev.cf_recommend(hist, pool, c * M)

    @pytest.mark.parametrize("scores,want", [
        ([1.0, 2.0, 2.0 + 1e-15, 0.5], [1, 2, 0, 3]),
        ([2.0 + 1e-15, 2.0, 1.0], [0, 1, 2]),
        ([0.3, 0.3 - 1e-6, -np.inf, -np.inf], [0, 1, 2, 3]),
        ([-np.inf, 1e-300, 0.0], [1, 2, 0]),
    ])
    def test_rounding_level_ties_keep_pool_order(self, scores, want):
        assert ev._rank_with_ties(np.array(scores)) == want

    def test_cold_start(self):
        with pytest.raises(ev.ColdStartError):
            ev.cf_recommend([], [[1]], np.eye(3))

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            ev.cf_recommend([0], [], np.eye(3))


@pytest.fixture(scope="module")
def models(tiny_world, tiny_vecs, tiny_outfits):
    m = pog.PogModel.init(pog.PogConfig(embed_dim=8, model_dim=8, per_layers=1, gen_layers=1))
    return ev.SimModels(m, tiny_vecs, tiny_outfits)


class TestSimulation:
    @pytest.mark.parametrize("strategy", ev.STRATEGIES)
    def test_forced_click(self, strategy, tiny_world, models):
        assert ev.simulate_sessions(strategy, tiny_world, models, 200, click_prob=1.0).ctr == 1.0

    @pytest.mark.parametrize("strategy", ev.STRATEGIES)
    def test_deterministic(self, strategy, tiny_world, models):
        a = ev.simulate_sessions(strategy, tiny_world, models, 300, seed=4)
        b = ev.simulate_sessions(strategy, tiny_world, models, 300, seed=4)
        assert a.clicks == b.clicks and a.series == b.series

    def test_unknown_strategy(self, tiny_world, models):
        with pytest.raises(ValueError):
            ev.simulate_sessions("MOST_POPULAR", tiny_world, models, 10)

    def test_stderr_shrinks(self, tiny_world, models):
        small = ev.simulate_sessions("RR", tiny_world, models, 1000, seed=1)
        large = ev.simulate_sessions("RR", tiny_world, models, 16000, seed=1)
        assert large.stderr / small.stderr == pytest.approx(0.25, rel=0.15)

    def test_pog_outfits_follow_rule(self, tiny_world, models):
        rule = ev.category_rule_for(tiny_world)
        hist = tiny_world.catalog.indices(tiny_world.behaviors[0].clicks)
        out = pog.generate(hist, np.arange(len(tiny_world.catalog)), rule, models.item_vecs,
                           tiny_world.catalog.categories, models.pog)
        assert list(tiny_world.catalog.groups[out.items]) == list(range(len(out.items)))
