"""Glue between dataset records and the index-based model APIs."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import BehaviorRecord, Catalog, Outfit, build_training_pairs, split_test


def outfit_indices(catalog: Catalog, outfits: Sequence[Outfit]) -> list[np.ndarray]:
    return [catalog.indices(o.item_ids) for o in outfits]


def split_outfits(catalog: Catalog, outfits: Sequence[Outfit], seed: int = 0, fraction: float = 0.1):
    """(train, test) lists of index arrays from a seeded hold-out split."""
    idx = outfit_indices(catalog, outfits)
    tr, te = split_test(len(idx), fraction, seed)
    return [idx[i] for i in tr], [idx[i] for i in te]


def index_pairs(catalog: Catalog, behaviors: Sequence[BehaviorRecord], outfits: Sequence[Outfit],
                history_cap: int = 50, click_threshold: int = 10) -> list[tuple[np.ndarray, np.ndarray]]:
    """(history indices, outfit indices in canonical order) per usable behavior."""
    pairs = build_training_pairs(behaviors, outfits, history_cap, click_threshold)
    return [(catalog.indices(h.clicked_items), catalog.canonical_order(catalog.indices(o.item_ids)))
            for h, o in pairs]
