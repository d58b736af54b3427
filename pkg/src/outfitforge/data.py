"""Dataset records, file formats, the synthetic world generator and overlap statistics.

File formats (UTF-8, LF line endings):

* ``items.jsonl``: one JSON object per item with keys ``item_id``, ``category``,
  ``group``, optional ``image`` / ``text`` / ``cf`` feature arrays and optional
  ``brand`` / ``style`` / ``pattern`` attributes.
* ``outfits.csv``: ``outfit_id,item_id;item_id;...``
* ``behaviors.csv``: ``user_id,outfit_id,item_id;...;item_id`` with the item clicks
  in chronological order (most recent last).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MODALITIES = ("image", "text", "cf")
FULL_DIMS = {"image": 1536, "text": 300, "cf": 160}
ATTRIBUTES = ("brand", "category", "style", "pattern")
GROUP_NAMES = ("tops", "bottoms", "shoes", "accessories")


class DataError(ValueError):
    """Malformed input file; message carries the file and line number."""


class IntegrityError(ValueError):
    """A record references an id that does not exist."""


@dataclass
class ItemRecord:
    item_id: str
    category: int
    group: int = 0
    features: dict[str, np.ndarray] = field(default_factory=dict)
    attributes: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class Outfit:
    outfit_id: str
    item_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError(f"outfit {self.outfit_id} repeats an item")


@dataclass(frozen=True)
class BehaviorRecord:
    user_id: str
    outfit_id: str
    clicks: tuple[str, ...]


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    clicked_items: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.clicked_items:
            raise ValueError(f"user {self.user_id} has an empty history")


class Catalog:
    """Column store of item records.  Index ``i`` refers to ``item_ids[i]``."""

    def __init__(self, records: Sequence[ItemRecord]) -> None:
        self.records = list(records)
        self.item_ids = [r.item_id for r in self.records]
        self.index = {iid: i for i, iid in enumerate(self.item_ids)}
        if len(self.index) != len(self.item_ids):
            raise IntegrityError("duplicate item ids in catalog")
        self.categories = np.array([r.category for r in self.records], dtype=np.int64)
        self.groups = np.array([r.group for r in self.records], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.records)

    def indices(self, item_ids: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self.index[i] for i in item_ids], dtype=np.int64)
        except KeyError as e:
            raise IntegrityError(f"unknown item id {e.args[0]!r}") from None

    def features(self, modality: str) -> np.ndarray:
        """Stacked (N, dim) features for one modality; every item must carry it."""
        rows = []
        for r in self.records:
            if modality not in r.features:
                raise ValueError(f"item {r.item_id} is missing modality {modality!r}")
            rows.append(r.features[modality])
        return np.vstack(rows)

    def attribute(self, name: str) -> list:
        if name == "category":
            return self.categories.tolist()
        if name not in ATTRIBUTES:
            raise KeyError(f"unknown property {name!r}")
        return [r.attributes.get(name) for r in self.records]

    def canonical_order(self, idx: Sequence[int]) -> np.ndarray:
        """Sort item indices tops, bottoms, shoes, accessories (then category, index)."""
        idx = np.asarray(idx, dtype=np.int64)
        keys = np.lexsort((idx, self.categories[idx], self.groups[idx]))
        return idx[keys]


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _item_to_json(r: ItemRecord) -> str:
    obj = {"item_id": r.item_id, "category": int(r.category), "group": int(r.group)}
    for m in MODALITIES:
        if m in r.features:
            obj[m] = [float(x) for x in r.features[m]]
    for k in ("brand", "style", "pattern"):
        if k in r.attributes:
            obj[k] = int(r.attributes[k])
    return json.dumps(obj, separators=(",", ":"))


def save_dataset(directory, catalog: Catalog, outfits: Sequence[Outfit],
                 behaviors: Sequence[BehaviorRecord]) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"items": d / "items.jsonl", "outfits": d / "outfits.csv", "behaviors": d / "behaviors.csv"}
    with open(paths["items"], "w", encoding="utf-8", newline="\n") as f:
        for r in catalog.records:
            f.write(_item_to_json(r) + "\n")
    with open(paths["outfits"], "w", encoding="utf-8", newline="\n") as f:
        for o in outfits:
            f.write(f"{o.outfit_id},{';'.join(o.item_ids)}\n")
    with open(paths["behaviors"], "w", encoding="utf-8", newline="\n") as f:
        for b in behaviors:
            f.write(f"{b.user_id},{b.outfit_id},{';'.join(b.clicks)}\n")
    return paths


def _read_items(path: Path) -> list[ItemRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                feats = {m: np.asarray(obj[m], dtype=np.float64) for m in MODALITIES if obj.get(m) is not None}
                for m, v in feats.items():
                    if v.ndim != 1 or not np.all(np.isfinite(v)):
                        raise ValueError(f"bad {m} feature vector")
                attrs = {k: int(obj[k]) for k in ("brand", "style", "pattern") if obj.get(k) is not None}
                out.append(ItemRecord(str(obj["item_id"]), int(obj["category"]),
                                      int(obj.get("group", 0)), feats, attrs))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return out


def _read_csv(path: Path, nfields: int) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != nfields or not all(parts[:-1]) or not parts[-1]:
                raise DataError(f"{path}:{lineno}: expected {nfields} comma-separated fields")
            rows.append((lineno, parts))
    return rows


def load_dataset(directory=None, items=None, outfits=None, behaviors=None):
    """Load ``(catalog, outfits, behaviors)`` and check referential integrity."""
    d = Path(directory) if directory is not None else None
    items = Path(items) if items else d / "items.jsonl"
    outfits = Path(outfits) if outfits else d / "outfits.csv"
    behaviors = Path(behaviors) if behaviors else d / "behaviors.csv"

    catalog = Catalog(_read_items(items))
    outfit_list = []
    for lineno, (oid, ids) in _read_csv(outfits, 2):
        item_ids = tuple(ids.split(";"))
        for i in item_ids:
            if i not in catalog.index:
                raise IntegrityError(f"{outfits}:{lineno}: outfit {oid} references unknown item {i!r}")
        try:
            outfit_list.append(Outfit(oid, item_ids))
        except ValueError as e:
            raise DataError(f"{outfits}:{lineno}: {e}") from None
    known = {o.outfit_id for o in outfit_list}
    beh = []
    if behaviors.exists():
        for lineno, (uid, oid, clicks) in _read_csv(behaviors, 3):
            if oid not in known:
                raise IntegrityError(f"{behaviors}:{lineno}: unknown outfit {oid!r}")
            ids = tuple(clicks.split(";"))
            for i in ids:
                if i not in catalog.index:
                    raise IntegrityError(f"{behaviors}:{lineno}: unknown item {i!r}")
            beh.append(BehaviorRecord(uid, oid, ids))
    log.info("loaded %d items, %d outfits, %d behaviors", len(catalog), len(outfit_list), len(beh))
    return catalog, outfit_list, beh


# ---------------------------------------------------------------------------
# synthetic world
# ---------------------------------------------------------------------------

@dataclass
class SyntheticWorldConfig:
    num_users: int = 300
    num_items: int = 800
    num_categories: int = 8
    num_outfits: int = 2400
    behaviors_per_user: int = 4
    style_dim: int = 6
    num_styles: int = 8
    noise: float = 0.1
    feature_noise: float = 0.3
    image_dim: int = FULL_DIMS["image"]
    text_dim: int = FULL_DIMS["text"]
    cf_dim: int = FULL_DIMS["cf"]
    click_sharpness: float = 6.0
    click_bias: float = -3.0
    min_clicks: int = 11
    max_clicks: int = 60
    seed: int = 0

    def __post_init__(self) -> None:
        counts = ("num_users", "num_items", "num_categories", "num_outfits", "behaviors_per_user",
                  "style_dim", "num_styles", "image_dim", "text_dim", "cf_dim", "min_clicks")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if self.max_clicks < self.min_clicks:
            raise ValueError("max_clicks < min_clicks")

    @property
    def dims(self) -> dict[str, int]:
        return {"image": self.image_dim, "text": self.text_dim, "cf": self.cf_dim}


@dataclass
class SyntheticWorld:
    config: SyntheticWorldConfig
    catalog: Catalog
    outfits: list[Outfit]
    behaviors: list[BehaviorRecord]
    style_centers: np.ndarray       # (num_styles, style_dim)
    item_styles: np.ndarray         # (num_items, style_dim)
    item_clusters: np.ndarray       # (num_items,)
    outfit_clusters: np.ndarray     # (num_outfits,)
    user_ids: list[str]
    user_styles: np.ndarray         # (num_users, style_dim)
    user_clusters: np.ndarray

    def __iter__(self):
        return iter((self.catalog, self.outfits, self.behaviors))

    def outfit_style(self, item_idx: Sequence[int]) -> np.ndarray:
        return self.item_styles[np.asarray(item_idx)].mean(axis=0)

    def affinity(self, user: int, item_idx: Sequence[int]) -> float:
        return float(self.user_styles[user] @ self.outfit_style(item_idx))

    def click_prob(self, user: int, item_idx: Sequence[int]) -> float:
        c = self.config
        return _sigmoid(c.click_sharpness * self.affinity(user, item_idx) + c.click_bias)

    def latest_history(self, user: int, cap: int = 50) -> UserHistory:
        uid = self.user_ids[user]
        last = [b for b in self.behaviors if b.user_id == uid][-1]
        return UserHistory(uid, last.clicks[-cap:])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synthesize_world(config: SyntheticWorldConfig) -> SyntheticWorld:
    """Seeded toy world: latent style clusters drive item features, outfits and clicks.

    Categories are split evenly into the four groups tops / bottoms / shoes /
    accessories and every outfit takes one category per group.  Each outfit item
    is drawn from the outfit's style cluster, except that with probability
    ``noise`` it is replaced by a random item of the same category.
    """
    c = config
    if c.num_categories < len(GROUP_NAMES):
        raise ValueError(f"need at least {len(GROUP_NAMES)} categories to fill the outfit template")
    if c.num_items < c.num_categories:
        raise ValueError("infeasible template: some category would have no items")
    rng = np.random.default_rng(c.seed)
    ncat, k = c.num_categories, c.num_styles
    groups_of = np.arange(ncat) * len(GROUP_NAMES) // ncat

    centers = _unit_rows(rng.normal(size=(k, c.style_dim)))
    item_cat = np.arange(c.num_items) % ncat
    grid = ncat * k
    item_cluster = np.where(np.arange(c.num_items) < grid, (np.arange(c.num_items) // ncat) % k,
                            rng.integers(0, k, size=c.num_items))
    jitter = rng.normal(scale=0.15 / math.sqrt(c.style_dim), size=(c.num_items, c.style_dim))
    item_style = centers[item_cluster] + jitter

    # modality = noisy linear image of (style, category); weights differ per modality
    latent_dim = c.style_dim + ncat
    onehot = np.eye(ncat)[item_cat]
    mix = {"image": (1.0, 0.5), "text": (0.7, 1.0), "cf": (0.8, 0.2)}
    records = []
    feats = {}
    for m in MODALITIES:
        ws, wc = mix[m]
        proj = rng.normal(size=(latent_dim, c.dims[m]))
        z = np.hstack([ws * item_style, wc * onehot])
        feats[m] = z @ proj + c.feature_noise * rng.normal(size=(c.num_items, c.dims[m]))
    nbrand = 2 * k
    brand = np.where(rng.random(c.num_items) < 0.6, 2 * item_cluster + rng.integers(0, 2, c.num_items),
                     rng.integers(0, nbrand, c.num_items))
    pattern = np.where(rng.random(c.num_items) < 0.5, item_cluster % 4, rng.integers(0, 4, c.num_items))
    for i in range(c.num_items):
        records.append(ItemRecord(
            f"i{i}", int(item_cat[i]), int(groups_of[item_cat[i]]),
            {m: feats[m][i] for m in MODALITIES},
            {"brand": int(brand[i]), "style": int(item_cluster[i]), "pattern": int(pattern[i])},
        ))
    catalog = Catalog(records)

    by_cat = [np.flatnonzero(item_cat == cat) for cat in range(ncat)]
    by_cat_style = {(cat, s): np.flatnonzero((item_cat == cat) & (item_cluster == s))
                    for cat in range(ncat) for s in range(k)}
    cats_of_group = [np.flatnonzero(groups_of == g) for g in range(len(GROUP_NAMES))]

    outfits, outfit_cluster, outfit_idx = [], np.empty(c.num_outfits, dtype=np.int64), []
    for o in range(c.num_outfits):
        s = int(rng.integers(k))
        chosen = []
        for g in range(len(GROUP_NAMES)):
            cat = int(rng.choice(cats_of_group[g]))
            pool = by_cat_style[(cat, s)]
            if rng.random() < c.noise or pool.size == 0:
                pool = by_cat[cat]
            chosen.append(int(rng.choice(pool)))
        outfit_cluster[o] = s
        outfit_idx.append(chosen)
        outfits.append(Outfit(f"o{o}", tuple(catalog.item_ids[i] for i in chosen)))
    outfit_style = np.array([item_style[ix].mean(axis=0) for ix in outfit_idx])

    user_cluster = rng.integers(0, k, size=c.num_users)
    user_style = centers[user_cluster] + rng.normal(scale=0.3 / math.sqrt(c.style_dim),
                                                      size=(c.num_users, c.style_dim))
    user_ids = [f"u{u}" for u in range(c.num_users)]

    def weights(u, styles):
        w = _sigmoid(c.click_sharpness * (styles @ user_style[u]) + c.click_bias)
        return w / w.sum()

    behaviors = []
    for u in range(c.num_users):
        w_items = weights(u, item_style)
        w_outfits = weights(u, outfit_style)
        stream: list[int] = []
        for _ in range(c.behaviors_per_user):
            n_new = int(rng.integers(c.min_clicks, c.max_clicks + 1))
            stream.extend(rng.choice(c.num_items, size=n_new, p=w_items).tolist())
            o = int(rng.choice(c.num_outfits, p=w_outfits))
            recent = stream[-c.max_clicks:]
            behaviors.append(BehaviorRecord(user_ids[u], outfits[o].outfit_id,
                                            tuple(catalog.item_ids[i] for i in recent)))
    return SyntheticWorld(c, catalog, outfits, behaviors, centers, item_style, item_cluster,
                          outfit_cluster, user_ids, user_style, user_cluster)


# ---------------------------------------------------------------------------
# training pairs and statistics
# ---------------------------------------------------------------------------

def build_training_pairs(behaviors: Sequence[BehaviorRecord], outfits: Sequence[Outfit],
                         history_cap: int = 50, click_threshold: int = 10):
    """One (UserHistory, Outfit) pair per behavior with more than ``click_threshold`` prior clicks."""
    by_id = {o.outfit_id: o for o in outfits}
    pairs = []
    for b in behaviors:
        if len(b.clicks) == 0:
            log.warning("skipping behavior of user %s with no prior item clicks", b.user_id)
            continue
        if len(b.clicks) <= click_threshold:
            continue
        pairs.append((UserHistory(b.user_id, tuple(b.clicks[-history_cap:])), by_id[b.outfit_id]))
    return pairs


def history_overlap_stats(behaviors: Sequence[BehaviorRecord], outfits: Sequence[Outfit],
                          catalog: Catalog, properties: Sequence[str] = ATTRIBUTES,
                          history_cap: int = 50) -> dict[str, float]:
    """Fraction of clicked outfits holding an item whose property value appears in the history."""
    for p in properties:
        if p not in ATTRIBUTES:
            raise KeyError(f"unknown property {p!r}")
    if not behaviors:
        return {p: 0.0 for p in properties}
    by_id = {o.outfit_id: o for o in outfits}
    columns = {p: catalog.attribute(p) for p in properties}
    hits = dict.fromkeys(properties, 0)
    for b in behaviors:
        hist = catalog.indices(b.clicks[-history_cap:])
        worn = catalog.indices(by_id[b.outfit_id].item_ids)
        for p in properties:
            col = columns[p]
            seen = {col[i] for i in hist} - {None}
            if any(col[i] in seen for i in worn):
                hits[p] += 1
    return {p: hits[p] / len(behaviors) for p in properties}


def dataset_stats(catalog: Catalog, outfits: Sequence[Outfit], behaviors: Sequence[BehaviorRecord]) -> dict:
    return {
        "counts": {"items": len(catalog), "outfits": len(outfits), "behaviors": len(behaviors),
                   "users": len({b.user_id for b in behaviors})},
        "overlap": history_overlap_stats(behaviors, outfits, catalog),
    }


def split_test(n: int, fraction: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train_idx, test_idx) split holding out ``fraction`` of ``n`` records."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])
