import hashlib
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outfitforge import data

from conftest import TINY


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir()) if p.is_file()}


def _beh(n, uid="u", oid="o0"):
    return data.BehaviorRecord(uid, oid, tuple(f"i{k}" for k in range(n)))


OUTFITS = [data.Outfit("o0", ("i0", "i1"))]


class TestFiles:
    def test_round_trip_bit_exact(self, tiny_world, tmp_path):
        data.save_dataset(tmp_path, *tiny_world)
        cat, outfits, beh = data.load_dataset(tmp_path)
        assert outfits == tiny_world.outfits and beh == tiny_world.behaviors
        for a, b in zip(cat.records, tiny_world.catalog.records):
            assert (a.item_id, a.category, a.group, a.attributes) == (b.item_id, b.category, b.group, b.attributes)
            for m in data.MODALITIES:
                assert np.array_equal(a.features[m], b.features[m])
        data.save_dataset(tmp_path / "again", cat, outfits, beh)
        assert _digest(tmp_path) == _digest(tmp_path / "again")

    def test_line_formats(self, tiny_world, tmp_path):
        data.save_dataset(tmp_path, *tiny_world)
        first = (tmp_path / "outfits.csv").read_bytes().split(b"\n")[0]
        o = tiny_world.outfits[0]
        assert first.decode() == f"{o.outfit_id},{';'.join(o.item_ids)}"
        assert b"\r" not in (tmp_path / "behaviors.csv").read_bytes()
        b = tiny_world.behaviors[0]
        assert (tmp_path / "behaviors.csv").read_text().splitlines()[0] == f"{b.user_id},{b.outfit_id},{';'.join(b.clicks)}"

    def test_empty_outfit_file(self, tiny_world, tmp_path):
        data.save_dataset(tmp_path, tiny_world.catalog, [], [])
        cat, outfits, beh = data.load_dataset(tmp_path)
        assert outfits == [] and beh == [] and len(cat) == len(tiny_world.catalog)

    def test_unknown_item_is_named(self, tiny_world, tmp_path):
        data.save_dataset(tmp_path, *tiny_world)
        with open(tmp_path / "outfits.csv", "a") as f:
            f.write("oX,i0;ghost\n")
        with pytest.raises(data.IntegrityError, match="ghost"):
            data.load_dataset(tmp_path)

    @pytest.mark.parametrize("line", ["no-commas-here\n", "o1,i1,extra\n", ",i1\n"])
    def test_malformed_outfit_line_is_located(self, tiny_world, tmp_path, line):
        data.save_dataset(tmp_path, tiny_world.catalog, tiny_world.outfits[:2], [])
        with open(tmp_path / "outfits.csv", "a") as f:
            f.write(line)
        with pytest.raises(data.DataError, match=r"outfits.csv:3"):
            data.load_dataset(tmp_path)

    def test_malformed_item_line_is_located(self, tiny_world, tmp_path):
        data.save_dataset(tmp_path, tiny_world.catalog, [], [])
        with open(tmp_path / "items.jsonl", "a") as f:
            f.write('{"item_id": "z", "category": "x"}\n')
        with pytest.raises(data.DataError, match=rf"items.jsonl:{len(tiny_world.catalog) + 1}"):
            data.load_dataset(tmp_path)

    def test_behavior_with_unknown_outfit(self, tiny_world, tmp_path):
        data.save_dataset(tmp_path, *tiny_world)
        with open(tmp_path / "behaviors.csv", "a") as f:
            f.write("u0,nope,i0\n")
        with pytest.raises(data.IntegrityError, match="nope"):
            data.load_dataset(tmp_path)

    def test_duplicate_item_in_outfit(self):
        with pytest.raises(ValueError):
            data.Outfit("o", ("a", "a"))


class TestSynthesis:
    @pytest.mark.parametrize("seed", range(5))
    def test_pure_function_of_config(self, seed, tmp_path):
        cfg = data.SyntheticWorldConfig(seed=seed, **TINY)
        data.save_dataset(tmp_path / "a", *data.synthesize_world(cfg))
        data.save_dataset(tmp_path / "b", *data.synthesize_world(cfg))
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_noise_free_outfits_share_cluster(self):
        w = data.synthesize_world(data.SyntheticWorldConfig(seed=1, noise=0.0, **TINY))
        for o, s in zip(w.outfits, w.outfit_clusters):
            assert set(w.item_clusters[w.catalog.indices(o.item_ids)]) == {s}

    def test_outfits_follow_group_template(self, tiny_world):
        for o in tiny_world.outfits:
            idx = tiny_world.catalog.indices(o.item_ids)
            assert sorted(tiny_world.catalog.groups[idx]) == [0, 1, 2, 3]

    def test_infeasible_template(self):
        with pytest.raises(ValueError):
            data.synthesize_world(data.SyntheticWorldConfig(num_items=5, num_categories=8))
        with pytest.raises(ValueError):
            data.synthesize_world(data.SyntheticWorldConfig(num_categories=3))

    def test_histories_overlap_outfit_categories(self):
        w = data.synthesize_world(data.SyntheticWorldConfig())
        stats = data.history_overlap_stats(w.behaviors, w.outfits, w.catalog)
        assert stats["category"] >= 0.70
        assert set(stats) == set(data.ATTRIBUTES)

    def test_full_feature_dims_by_default(self):
        assert data.SyntheticWorldConfig().dims == {"image": 1536, "text": 300, "cf": 160}


class TestTrainingPairs:
    def test_history_capped_to_most_recent(self):
        (h, o), = data.build_training_pairs([_beh(60)], OUTFITS)
        assert h.clicked_items == tuple(f"i{k}" for k in range(10, 60))
        assert o is OUTFITS[0]

    @pytest.mark.parametrize("n,kept", [(9, False), (10, False), (11, True)])
    def test_click_threshold(self, n, kept):
        assert bool(data.build_training_pairs([_beh(n)], OUTFITS)) == kept

    def test_empty(self):
        assert data.build_training_pairs([], OUTFITS) == []

    def test_zero_clicks_skipped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert data.build_training_pairs([_beh(0)], OUTFITS, click_threshold=0) == []
        assert "no prior item clicks" in caplog.text

    def test_order_preserved(self):
        clicks = ("i5", "i2", "i9", "i2", "i7") * 3
        (h, _), = data.build_training_pairs([data.BehaviorRecord("u", "o0", clicks)], OUTFITS, history_cap=4)
        assert h.clicked_items == ("i2", "i9", "i2", "i7")


class TestOverlapStats:
    @staticmethod
    def _catalog():
        recs = [data.ItemRecord(f"i{k}", category=k % 3, attributes={"brand": k, "style": 0, "pattern": k % 2})
                for k in range(6)]
        return data.Catalog(recs)

    def test_full_category_overlap(self):
        cat = self._catalog()
        beh = [data.BehaviorRecord("u", "o", ("i3", "i4", "i5"))]
        stats = data.history_overlap_stats(beh, [data.Outfit("o", ("i0", "i1"))], cat, ["category", "brand"])
        assert stats == {"category": 1.0, "brand": 0.0}

    def test_disjoint(self):
        cat = self._catalog()
        beh = [data.BehaviorRecord("u", "o", ("i1",))]
        assert data.history_overlap_stats(beh, [data.Outfit("o", ("i0", "i2"))], cat, ["brand", "pattern"]) == \
            {"brand": 0.0, "pattern": 0.0}

    def test_unknown_property(self):
        with pytest.raises(KeyError):
            data.history_overlap_stats([], [], self._catalog(), ["color"])


class TestSplit:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 1000))
    def test_partition(self, n, seed):
        tr, te = data.split_test(n, 0.1, seed)
        assert sorted(np.concatenate([tr, te])) == list(range(n))
        assert len(te) == max(1, round(n * 0.1))

    def test_canonical_order(self, tiny_world):
        cat = tiny_world.catalog
        idx = cat.indices(tiny_world.outfits[0].item_ids)[::-1]
        assert list(cat.groups[cat.canonical_order(idx)]) == [0, 1, 2, 3]
