"""Multi-modal item embedding: concatenated image/text/CF features -> one linear layer,
trained with a triplet margin loss where positives share the anchor's leaf category."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .data import MODALITIES, FULL_DIMS, Catalog

log = logging.getLogger(__name__)


@dataclass
class RawFeatures:
    image: np.ndarray | None = None
    text: np.ndarray | None = None
    cf: np.ndarray | None = None

    def get(self, modality: str) -> np.ndarray | None:
        return getattr(self, modality)


@dataclass
class EmbedConfig:
    embed_dim: int = 128
    margin: float = 0.1
    lr: float = 0.01
    steps: int = 2000
    seed: int = 0
    modalities: tuple[str, ...] = MODALITIES
    dims: dict[str, int] = field(default_factory=lambda: dict(FULL_DIMS))

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ValueError(f"modalities must be a non-empty subset of {MODALITIES}")


@dataclass
class EmbedModel:
    weight: np.ndarray                   # (concat_dim, embed_dim)
    bias: np.ndarray                     # (embed_dim,)
    margin: float
    modalities: tuple[str, ...]
    dims: dict[str, int]

    @classmethod
    def init(cls, config: EmbedConfig) -> "EmbedModel":
        config.validate()
        rng = np.random.default_rng(config.seed)
        fan_in = sum(config.dims[m] for m in config.modalities)
        return cls(tc.uniform_init(rng, fan_in, (fan_in, config.embed_dim)),
                   tc.uniform_init(rng, fan_in, (config.embed_dim,)),
                   config.margin, tuple(config.modalities), dict(config.dims))

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"fuse.w": self.weight, "fuse.b": self.bias}


def _concat(raw: RawFeatures, model: EmbedModel) -> np.ndarray:
    parts = []
    for m in model.modalities:
        v = raw.get(m)
        if v is None:
            raise ValueError(f"modality {m!r} is enabled but missing")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (model.dims[m],):
            raise ValueError(f"{m} vector has shape {v.shape}, expected ({model.dims[m]},)")
        parts.append(v)
    return np.concatenate(parts)


def fuse(raw: RawFeatures, model: EmbedModel) -> np.ndarray:
    return _concat(raw, model) @ model.weight + model.bias


def catalog_inputs(catalog: Catalog, model: EmbedModel) -> np.ndarray:
    blocks = []
    for m in model.modalities:
        x = catalog.features(m)
        if x.shape[1] != model.dims[m]:
            raise ValueError(f"catalog {m} features have width {x.shape[1]}, model expects {model.dims[m]}")
        blocks.append(x)
    return np.hstack(blocks)


def fuse_catalog(catalog: Catalog, model: EmbedModel) -> np.ndarray:
    """(num_items, embed_dim) embeddings aligned with catalog indices."""
    return catalog_inputs(catalog, model) @ model.weight + model.bias


def triplet_loss(anchor, positive, negative, margin: float = 0.1):
    """max(d(a, p) - d(a, n) + margin, 0) with Euclidean d.  Works on arrays or tensors."""
    plain = not any(isinstance(t, tc.Tensor) for t in (anchor, positive, negative))
    a, p, n = (tc.as_tensor(t) for t in (anchor, positive, negative))
    if not (a.shape == p.shape == n.shape):
        raise ValueError(f"triplet dims differ: {a.shape}, {p.shape}, {n.shape}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    dp = tc.sqrt(tc.tsum((a - p) * (a - p), axis=-1))
    dn = tc.sqrt(tc.tsum((a - n) * (a - n), axis=-1))
    loss = tc.relu(dp - dn + margin)
    return float(loss.data) if plain else loss


def sample_triplet(categories: Sequence[int], anchor: int, rng: np.random.Generator) -> tuple[int, int]:
    """Indices (positive, negative): same leaf category as ``anchor`` / different one."""
    categories = np.asarray(categories)
    same = np.flatnonzero(categories == categories[anchor])
    same = same[same != anchor]
    other = np.flatnonzero(categories != categories[anchor])
    if same.size == 0:
        raise ValueError(f"category {categories[anchor]} has a single item; no positive exists")
    if other.size == 0:
        raise ValueError("catalog has a single category; no negative exists")
    return int(same[rng.integers(same.size)]), int(other[rng.integers(other.size)])


def train_embedding(catalog: Catalog, config: EmbedConfig) -> tuple[EmbedModel, list[float]]:
    """Plain SGD, one triplet per step.  Returns the model and the per-step loss curve."""
    config.validate()
    model = EmbedModel.init(config)
    x = catalog_inputs(catalog, model)
    cats = catalog.categories
    rng = np.random.default_rng([config.seed, 1])
    params = model.params()
    curve = []

    for step in range(config.steps):
        a = int(rng.integers(len(catalog)))
        p, n = sample_triplet(cats, a, rng)
        trip = x[[a, p, n]]

        def loss_fn(P):
            e = tc.Tensor(trip) @ P["fuse.w"] + P["fuse.b"]
            return triplet_loss(e[0], e[1], e[2], config.margin)

        value, grads = tc.value_and_grad(loss_fn, params)
        for k in params:
            params[k] -= config.lr * grads[k]
        curve.append(value)
        if step % 500 == 0:
            log.debug("embed step %d loss %.4f", step, value)
    return model, curve


def category_distances(emb: np.ndarray, categories: Sequence[int]) -> tuple[float, float]:
    """Mean pairwise Euclidean distance within vs across categories."""
    categories = np.asarray(categories)
    d = np.sqrt(((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1))
    same = categories[:, None] == categories[None, :]
    off = ~np.eye(len(emb), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())
