"""Fashion outfit model: masked item prediction over unordered item sets.

Each item embedding goes through a transition layer into outfit space, then an
unmasked Transformer encoder without position embeddings.  One item at a time
is replaced by a learned MASK embedding and the encoder output at that slot is
scored against the true item's transition vector plus sampled negatives.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor_core as tc

log = logging.getLogger(__name__)


@dataclass
class FomConfig:
    embed_dim: int = 16
    model_dim: int = 16
    num_layers: int = 2
    num_heads: int = 2
    num_negatives: int = 3
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_layers < 0 or self.num_negatives < 0:
            raise ValueError("num_layers and num_negatives must be non-negative")
        tc.AttentionConfig(self.model_dim, self.num_heads)

    @property
    def attention(self) -> tc.AttentionConfig:
        return tc.AttentionConfig(self.model_dim, self.num_heads)


FULL_FOM = FomConfig(embed_dim=128, model_dim=64, num_layers=6, num_heads=8)


@dataclass
class FomModel:
    config: FomConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: FomConfig) -> "FomModel":
        rng = np.random.default_rng(config.seed)
        d_e, d_m = config.embed_dim, config.model_dim
        params = {"mask": tc.uniform_init(rng, d_e, (d_e,))}
        params.update(tc.init_transition(rng, "trans", d_e, d_m))
        for i in range(config.num_layers):
            params.update(tc.init_encoder_layer(rng, f"enc.{i}", d_m, config.ffn_mult * d_m))
        return cls(config, params)

    def hyperparams(self) -> dict:
        return asdict(self.config)


# ---------------------------------------------------------------------------
# batched forward pieces (Tensor in, Tensor out)
# ---------------------------------------------------------------------------

def _masked_inputs(P, vecs: np.ndarray, mask_pos: np.ndarray) -> tc.Tensor:
    n_rows = vecs.shape[0]
    m = np.zeros(vecs.shape[:-1] + (1,))
    m[np.arange(n_rows), mask_pos] = 1.0
    return tc.Tensor(vecs * (1.0 - m)) + tc.Tensor(m) * P["mask"]


def _encode(P, x: tc.Tensor, config: FomConfig, key_mask=None) -> tc.Tensor:
    h = tc.transition_layer(x, P, "trans")
    for i in range(config.num_layers):
        h = tc.encoder_layer(h, P, f"enc.{i}", config.attention, key_mask=key_mask)
    return h


def _mask_outputs(P, vecs: np.ndarray, mask_pos: np.ndarray, config: FomConfig) -> tc.Tensor:
    """(N, d_m) encoder outputs at the masked slot of each of N item sets (N, n, d_e)."""
    g = _encode(P, _masked_inputs(P, vecs, mask_pos), config)
    return g[np.arange(vecs.shape[0]), mask_pos]


def _candidate_logits(P, g: tc.Tensor, cand_vecs: np.ndarray) -> tc.Tensor:
    h = tc.transition_layer(tc.Tensor(cand_vecs), P, "trans")
    return tc.tsum(h * tc.reshape(g, (g.shape[0], 1, g.shape[1])), axis=-1)


def _batch_loss(P, item_vecs: np.ndarray, outfits: np.ndarray, negatives: np.ndarray,
                config: FomConfig, positions: np.ndarray | None = None) -> tc.Tensor:
    """Mean masked-item NLL over a (B, n) batch of equal-size outfits.

    ``negatives`` is (B, n, K).  With ``positions`` (B,) only that slot per outfit
    is masked, otherwise every slot is.
    """
    b, n = outfits.shape
    if positions is None:
        sets = np.repeat(outfits, n, axis=0)                   # (B*n, n)
        mask_pos = np.tile(np.arange(n), b)
        truth = outfits.reshape(-1)
        negs = negatives.reshape(b * n, -1)
    else:
        sets = outfits
        mask_pos = positions
        truth = outfits[np.arange(b), positions]
        negs = negatives[np.arange(b), positions]
    g = _mask_outputs(P, item_vecs[sets], mask_pos, config)
    cand = np.concatenate([truth[:, None], negs], axis=1)
    logits = _candidate_logits(P, g, item_vecs[cand])
    return -tc.tmean(tc.log_softmax(logits)[:, 0])


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------

def sample_negatives(num_items: int, exclude, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct item indices in ``range(num_items)`` not in ``exclude``."""
    exclude = set(int(i) for i in exclude)
    if num_items - len(exclude) < k:
        raise ValueError(f"cannot draw {k} negatives from {num_items - len(exclude)} eligible items")
    out: list[int] = []
    while len(out) < k:
        for j in rng.integers(0, num_items, size=2 * (k - len(out))):
            j = int(j)
            if j not in exclude and j not in out:
                out.append(j)
                if len(out) == k:
                    break
    return np.array(out, dtype=np.int64)


def outfit_negatives(outfits: np.ndarray, num_items: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """(B, n, k) negatives, fresh per slot, never drawn from the slot's own outfit."""
    b, n = outfits.shape
    out = np.empty((b, n, k), dtype=np.int64)
    for i in range(b):
        for t in range(n):
            out[i, t] = sample_negatives(num_items, outfits[i], k, rng)
    return out


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def transition(embeddings, model: FomModel) -> np.ndarray:
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[-1] != model.config.embed_dim:
        raise ValueError(f"embedding width {x.shape[-1]} != embed_dim {model.config.embed_dim}")
    return tc.transition_layer(tc.Tensor(x), model.params, "trans").data


def transition_set(model: FomModel, item_vecs: np.ndarray) -> np.ndarray:
    """Transition vectors of every item, computed from the current weights."""
    return transition(item_vecs, model)


def encode_masked(outfit_embeddings, mask_position: int, model: FomModel) -> np.ndarray:
    vecs = np.asarray(outfit_embeddings, dtype=np.float64)
    n = vecs.shape[0]
    if n < 2:
        raise ValueError("need at least two items to mask one")
    if not 0 <= mask_position < n:
        raise IndexError(f"mask position {mask_position} outside [0, {n})")
    if vecs.shape[1] != model.config.embed_dim:
        raise ValueError(f"embedding width {vecs.shape[1]} != embed_dim {model.config.embed_dim}")
    return _mask_outputs(model.params, vecs[None], np.array([mask_position]), model.config).data[0]


def candidate_probs(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Softmax over inner products of ``query`` with each candidate row."""
    return tc.softmax(np.asarray(candidates) @ np.asarray(query))


def masked_item_prob(g_mask, truth, negatives, allow_empty: bool = False) -> float:
    """Probability of ``truth`` among ``truth`` + ``negatives`` under inner-product softmax."""
    truth = np.asarray(truth, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, truth.shape[0])
    if negatives.shape[0] == 0 and not allow_empty:
        raise ValueError("empty negative list")
    if np.any(np.all(negatives == truth, axis=1)):
        raise ValueError("ground truth duplicated among negatives")
    return float(candidate_probs(g_mask, np.vstack([truth, negatives]))[0])


def fom_loss(outfit: Sequence[int], item_vecs: np.ndarray, model: FomModel,
             rng: np.random.Generator | None = None, negatives: np.ndarray | None = None) -> float:
    """Average masked-item NLL over every slot of one outfit (catalog indices)."""
    outfit = np.asarray(outfit, dtype=np.int64)[None]
    if outfit.shape[1] < 2:
        raise ValueError("outfit needs at least two items")
    if negatives is None:
        negatives = outfit_negatives(outfit, len(item_vecs), model.config.num_negatives,
                                     rng or np.random.default_rng())
    return float(_batch_loss(model.params, item_vecs, outfit, negatives[None] if negatives.ndim == 2 else negatives,
                             model.config).data)


def cp_negatives(outfit: Sequence[int], num_items: int, k: int, seed: int) -> np.ndarray:
    """Evaluation negatives keyed by (seed, masked item), so they ignore storage order."""
    return np.stack([sample_negatives(num_items, outfit, k, np.random.default_rng([seed, int(i)]))
                     for i in outfit])


def cp_score(outfit: Sequence[int], item_vecs: np.ndarray, model: FomModel, seed: int = 0) -> float:
    """Compatibility score: negated FOM loss under fixed evaluation negatives."""
    outfit = np.asarray(outfit, dtype=np.int64)
    negs = cp_negatives(outfit, len(item_vecs), model.config.num_negatives, seed)
    return -fom_loss(outfit, item_vecs, model, negatives=negs)


def cp_scores(outfits: Sequence[Sequence[int]], item_vecs: np.ndarray, model: FomModel,
              seed: int = 0) -> np.ndarray:
    """Batched :func:`cp_score`; outfits of equal size are scored together."""
    scores = np.empty(len(outfits))
    by_size: dict[int, list[int]] = {}
    for i, o in enumerate(outfits):
        by_size.setdefault(len(o), []).append(i)
    k = model.config.num_negatives
    for n, ids in by_size.items():
        block = np.array([outfits[i] for i in ids], dtype=np.int64)
        negs = np.stack([cp_negatives(o, len(item_vecs), k, seed) for o in block])
        bsz = block.shape[0]
        sets = np.repeat(block, n, axis=0)
        mask_pos = np.tile(np.arange(n), bsz)
        g = _mask_outputs(model.params, item_vecs[sets], mask_pos, model.config)
        cand = np.concatenate([block.reshape(-1, 1), negs.reshape(bsz * n, k)], axis=1)
        lp = tc.log_softmax(_candidate_logits(model.params, g, item_vecs[cand])).data[:, 0]
        scores[ids] = lp.reshape(bsz, n).mean(axis=1)
    return scores


def _argmax_first(x: np.ndarray) -> int:
    return int(np.flatnonzero(x == x.max())[0])


def fitb_choose(outfit, choices, model: FomModel) -> int:
    """Pick the choice that best fills the single ``None`` slot of ``outfit``.

    ``outfit`` is a sequence of item embeddings with exactly one ``None``.
    Ties go to the lowest choice index.
    """
    blanks = [i for i, v in enumerate(outfit) if v is None]
    if len(blanks) != 1:
        raise ValueError(f"expected exactly one blank, found {len(blanks)}")
    d_e = model.config.embed_dim
    vecs = np.array([np.zeros(d_e) if v is None else v for v in outfit], dtype=np.float64)
    g = encode_masked(vecs, blanks[0], model)
    logits = transition(np.asarray(choices), model) @ g
    return _argmax_first(logits)


def fitb_logits(model: FomModel, context: np.ndarray, blank: np.ndarray, choices: np.ndarray) -> np.ndarray:
    """Batched choice logits: context (N, n, d_e), blank (N,), choices (N, c, d_e) -> (N, c)."""
    g = _mask_outputs(model.params, context, blank, model.config)
    return _candidate_logits(model.params, g, choices).data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FomTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    all_positions: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training config")


def _size_batches(outfits: Sequence[Sequence[int]], batch_size: int, rng) -> list[np.ndarray]:
    by_size: dict[int, list[int]] = {}
    for i, o in enumerate(outfits):
        by_size.setdefault(len(o), []).append(i)
    batches = []
    for n in sorted(by_size):
        ids = np.array(by_size[n])[rng.permutation(len(by_size[n]))]
        batches.extend(ids[s:s + batch_size] for s in range(0, len(ids), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def train_fom(item_vecs: np.ndarray, outfits: Sequence[Sequence[int]], config: FomConfig,
              train: FomTrainConfig = FomTrainConfig(), model: FomModel | None = None
              ) -> tuple[FomModel, list[float]]:
    """Adam on the masked-item loss; negatives are redrawn every step."""
    model = model or FomModel.init(config)
    rng = np.random.default_rng([train.seed, 2])
    opt = tc.Adam(model.params, lr=train.lr)
    curve = []
    for epoch in range(train.epochs):
        for ids in _size_batches(outfits, train.batch_size, rng):
            block = np.array([outfits[i] for i in ids], dtype=np.int64)
            negs = outfit_negatives(block, len(item_vecs), config.num_negatives, rng)
            pos = None if train.all_positions else rng.integers(0, block.shape[1], size=len(ids))
            loss, grads = tc.value_and_grad(
                lambda P: _batch_loss(P, item_vecs, block, negs, config, pos), model.params)
            opt.step(grads)
            curve.append(loss)
        log.info("fom epoch %d loss %.4f", epoch, float(np.mean(curve[-len(outfits) // train.batch_size - 1:])))
    return model, curve
