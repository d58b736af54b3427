"""FITB / CP evaluation, the item-item CF baseline and the click simulator."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import fom as fom_mod
from . import pog as pog_mod
from .data import GROUP_NAMES, SyntheticWorld

STRATEGIES = ("RR", "CF", "POG")


# ---------------------------------------------------------------------------
# FITB
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitbInstance:
    outfit: tuple[int, ...]      # full outfit, catalog indices
    blank: int                   # position of the blanked item in ``outfit``
    choices: tuple[int, ...]     # truth + distractors, shuffled
    answer: int                  # index of the truth within ``choices``

    @property
    def truth(self) -> int:
        return self.outfit[self.blank]

    @property
    def context(self) -> tuple[int, ...]:
        return self.outfit[:self.blank] + self.outfit[self.blank + 1:]


def build_fitb_instances(outfits: Sequence[Sequence[int]], seed: int = 0,
                         num_distractors: int = 3) -> list[FitbInstance]:
    """Blank every slot of every outfit; distractors come from the other outfits' items."""
    pool = np.unique(np.concatenate([np.asarray(o) for o in outfits]))
    instances = []
    for oi, o in enumerate(outfits):
        o = tuple(int(i) for i in o)
        eligible = np.setdiff1d(pool, o)
        if eligible.size < num_distractors:
            raise ValueError("not enough items in other outfits to draw distractors")
        for b in range(len(o)):
            rng = np.random.default_rng([seed, oi, b])
            distract = rng.choice(eligible, size=num_distractors, replace=False)
            choices = np.concatenate([[o[b]], distract])[rng.permutation(num_distractors + 1)]
            answer = int(np.flatnonzero(choices == o[b])[0])
            instances.append(FitbInstance(o, b, tuple(int(c) for c in choices), answer))
    return instances


class OracleScorer:
    """Reference scorer that knows the answer; ``adversarial`` flips it."""

    def __init__(self, adversarial: bool = False) -> None:
        self.sign = -1.0 if adversarial else 1.0

    def fitb_logits(self, instances: Sequence[FitbInstance], item_vecs=None) -> np.ndarray:
        out = np.zeros((len(instances), max(len(i.choices) for i in instances)))
        for r, inst in enumerate(instances):
            out[r, inst.answer] = self.sign
        return out

    def cp_scores(self, outfits, labels) -> np.ndarray:
        return self.sign * np.asarray(labels, dtype=np.float64)


def _fom_fitb_logits(model: fom_mod.FomModel, instances: Sequence[FitbInstance],
                     item_vecs: np.ndarray) -> np.ndarray:
    out = np.empty((len(instances), len(instances[0].choices)))
    groups: dict[tuple[int, int], list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault((len(inst.outfit), len(inst.choices)), []).append(i)
    for ids in groups.values():
        outfits = np.array([instances[i].outfit for i in ids])
        blanks = np.array([instances[i].blank for i in ids])
        choices = np.array([instances[i].choices for i in ids])
        out[ids] = fom_mod.fitb_logits(model, item_vecs[outfits], blanks, item_vecs[choices])
    return out


def fitb_predictions(model, instances: Sequence[FitbInstance], item_vecs: np.ndarray | None = None,
                     workers: int = 1) -> np.ndarray:
    """Chosen choice index per instance (lowest index on ties)."""
    if not instances:
        raise ValueError("no FITB instances")
    if isinstance(model, fom_mod.FomModel):
        chunks = [instances[s:s + 256] for s in range(0, len(instances), 256)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                parts = list(ex.map(lambda c: _fom_fitb_logits(model, c, item_vecs), chunks))
        else:
            parts = [_fom_fitb_logits(model, c, item_vecs) for c in chunks]
        logits = np.vstack(parts)
    else:
        logits = model.fitb_logits(instances, item_vecs)
    return (logits == logits.max(axis=1, keepdims=True)).argmax(axis=1)


def eval_fitb(model, instances: Sequence[FitbInstance], item_vecs: np.ndarray | None = None,
              workers: int = 1) -> float:
    pred = fitb_predictions(model, instances, item_vecs, workers)
    return float(np.mean(pred == np.array([i.answer for i in instances])))


# ---------------------------------------------------------------------------
# CP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CpInstance:
    outfit: tuple[int, ...]
    label: int                   # 1 compatible, 0 incompatible


def build_cp_instances(outfits: Sequence[Sequence[int]], seed: int = 0) -> list[CpInstance]:
    """Each compatible outfit plus one same-size outfit of random items from the set."""
    pool = np.unique(np.concatenate([np.asarray(o) for o in outfits]))
    rng = np.random.default_rng([seed, 7])
    out = [CpInstance(tuple(int(i) for i in o), 1) for o in outfits]
    for o in outfits:
        fake = rng.choice(pool, size=len(o), replace=False)
        out.append(CpInstance(tuple(int(i) for i in fake), 0))
    return out


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC by the rank-sum statistic with mid-ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def eval_cp(model, instances: Sequence[CpInstance], item_vecs: np.ndarray | None = None,
            seed: int = 0) -> float:
    labels = [i.label for i in instances]
    if len(set(labels)) < 2:
        raise ValueError("CP set needs both compatible and incompatible outfits")
    outfits = [i.outfit for i in instances]
    if isinstance(model, fom_mod.FomModel):
        scores = fom_mod.cp_scores(outfits, item_vecs, model, seed)
    else:
        scores = model.cp_scores(outfits, labels)
    return auc(scores, labels)


# ---------------------------------------------------------------------------
# item-item collaborative filtering
# ---------------------------------------------------------------------------

class ColdStartError(ValueError):
    """The user has no history; the caller should fall back to another strategy."""


def coclick_matrix(histories: Sequence[Sequence[int]], num_items: int) -> np.ndarray:
    """(users, items) click-count matrix; one row per history."""
    m = np.zeros((len(histories), num_items))
    for u, h in enumerate(histories):
        np.add.at(m[u], np.asarray(h, dtype=np.int64), 1.0)
    return m


def item_similarity(coclick: np.ndarray) -> np.ndarray:
    """Cosine similarity between item columns; all-zero columns get similarity 0."""
    norms = np.linalg.norm(coclick, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    x = coclick / safe
    return x.T @ x


def cf_item_scores(history: Sequence[int], candidates: Sequence[int], similarity: np.ndarray) -> np.ndarray:
    """Summed similarity of each candidate item to the history items."""
    history = np.asarray(history, dtype=np.int64)
    if history.size == 0:
        raise ColdStartError("user has no click history")
    return similarity[np.asarray(candidates, dtype=np.int64)][:, history].sum(axis=1)


def cf_recommend(history: Sequence[int], pool: Sequence[Sequence[int]], coclick: np.ndarray | None = None,
                 similarity: np.ndarray | None = None) -> list[int]:
    """Pool positions ranked by the CF preference of their best unseen item.

    The outfits holding the single most preferred item therefore come first.
    Ties keep pool order.
    """
    if not pool:
        raise ValueError("empty outfit pool")
    if similarity is None:
        similarity = item_similarity(coclick)
    seen = set(int(i) for i in history)
    cand = list(dict.fromkeys(int(i) for o in pool for i in o if int(i) not in seen))
    scores = dict(zip(cand, cf_item_scores(history, cand, similarity))) if cand else {}
    best = np.array([max((scores.get(int(i), -np.inf) for i in o), default=-np.inf) for o in pool])
    return _rank_with_ties(best)


def _rank_with_ties(scores: np.ndarray, tol: float = 1e-9) -> list[int]:
    """Indices by descending score; scores equal up to rounding keep index order.

    Cosine sums that tie exactly in real arithmetic can differ in the last
    bits (e.g. after rescaling the co-click matrix), so neighbours closer than
    ``tol`` (relative, floored at 1) are merged into one tie group.
    """
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    group, groups = 0, {}
    for prev, k in zip([None] + order[:-1], order):
        if prev is not None:
            a, b = scores[prev], scores[k]
            if not (a == b or (np.isfinite(a) and a - b <= tol * max(1.0, abs(a)))):
                group += 1
        groups[k] = group
    return sorted(order, key=lambda k: (groups[k], k))


# ---------------------------------------------------------------------------
# click simulation
# ---------------------------------------------------------------------------

@dataclass
class SimUser:
    style: np.ndarray
    temperature: float = 1.0


@dataclass
class SimModels:
    """What the strategies need: a trained POG, item embeddings, the outfit pool."""
    pog: pog_mod.PogModel | None
    item_vecs: np.ndarray | None
    pool: list[np.ndarray]
    history_cap: int = 50


@dataclass
class SimResult:
    strategy: str
    clicks: int
    impressions: int
    series: list[float] = field(default_factory=list)

    @property
    def ctr(self) -> float:
        return self.clicks / self.impressions

    @property
    def stderr(self) -> float:
        p = self.ctr
        return float(np.sqrt(p * (1 - p) / self.impressions))


def category_rule_for(world: SyntheticWorld) -> pog_mod.CategoryRule:
    """One slot per group in canonical order (tops, bottoms, shoes, accessories)."""
    cats, groups = world.catalog.categories, world.catalog.groups
    return pog_mod.CategoryRule(tuple(frozenset(np.unique(cats[groups == g]).tolist())
                                      for g in range(len(GROUP_NAMES))))


def simulate_sessions(strategy: str, world: SyntheticWorld, models: SimModels, num_sessions: int,
                      seed: int = 0, click_prob: float | None = None,
                      users: Sequence[SimUser] | None = None) -> SimResult:
    """Show one outfit per session and sample a click from the user's style affinity.

    Click probability is ``sigmoid((sharpness * u.s + bias) / temperature)`` with
    ``s`` the mean latent style of the shown items; ``click_prob`` overrides it.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "POG" and models.pog is None:
        raise ValueError("POG strategy needs a trained model")
    cfg = world.config
    users = users or [SimUser(s) for s in world.user_styles]
    histories = _latest_histories(world, models.history_cap)
    cache: dict[int, np.ndarray] = {}
    similarity = None
    if strategy == "CF":
        similarity = item_similarity(coclick_matrix(list(histories.values()), len(world.catalog)))
    rule = category_rule_for(world) if strategy == "POG" else None
    all_items = np.arange(len(world.catalog))

    def shown(u: int, rng) -> np.ndarray:
        if strategy == "RR":
            return models.pool[int(rng.integers(len(models.pool)))]
        if u not in cache:
            if strategy == "CF":
                cache[u] = models.pool[cf_recommend(histories[u], models.pool, similarity=similarity)[0]]
            else:
                g = pog_mod.generate(histories[u], all_items, rule, models.item_vecs,
                                     world.catalog.categories, models.pog)
                cache[u] = np.array(g.items, dtype=np.int64)
        return cache[u]

    clicks, series = 0, []
    for s in range(num_sessions):
        rng = np.random.default_rng([seed, s])
        u = int(rng.integers(len(users)))
        items = shown(u, rng)
        if click_prob is not None:
            p = click_prob
        else:
            z = cfg.click_sharpness * float(users[u].style @ world.item_styles[items].mean(axis=0)) + cfg.click_bias
            p = 1.0 / (1.0 + np.exp(-z / users[u].temperature))
        clicks += int(rng.random() < p)
        series.append(clicks / (s + 1))
    return SimResult(strategy, clicks, num_sessions, series)


def _latest_histories(world: SyntheticWorld, cap: int) -> dict[int, np.ndarray]:
    pos = {uid: i for i, uid in enumerate(world.user_ids)}
    out = {}
    for b in world.behaviors:
        out[pos[b.user_id]] = world.catalog.indices(b.clicks[-cap:])
    return out
