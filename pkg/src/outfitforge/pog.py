"""Personalized outfit generation: a Per encoder over the user's clicked items and a
Gen decoder (masked self-attention, cross-attention over the Per output, PFFN)
that emits outfit items one at a time, trained with teacher forcing.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .fom import FomModel, masked_item_prob, outfit_negatives, sample_negatives

log = logging.getLogger(__name__)

next_item_prob = masked_item_prob


@dataclass
class PogConfig:
    embed_dim: int = 16
    model_dim: int = 16
    per_layers: int = 2
    gen_layers: int = 2
    num_heads: int = 2
    num_negatives: int = 3
    ffn_mult: int = 4
    max_len: int = 8
    history_cap: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.per_layers < 0 or self.gen_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.max_len < 1 or self.history_cap < 1:
            raise ValueError("max_len and history_cap must be >= 1")
        tc.AttentionConfig(self.model_dim, self.num_heads)

    def attention(self, causal: bool = False) -> tc.AttentionConfig:
        return tc.AttentionConfig(self.model_dim, self.num_heads, causal)


FULL_POG = PogConfig(embed_dim=128, model_dim=64, per_layers=6, gen_layers=6, num_heads=8)


def _init_decoder_layer(rng, prefix: str, d_m: int, inner: int) -> dict[str, np.ndarray]:
    p = tc.init_attention(rng, f"{prefix}.mmh", d_m)
    p.update(tc.init_layer_norm(f"{prefix}.ln1", d_m))
    p.update(tc.init_attention(rng, f"{prefix}.xmh", d_m))
    p.update(tc.init_layer_norm(f"{prefix}.ln2", d_m))
    p.update(tc.init_pffn(rng, f"{prefix}.ffn", d_m, inner))
    p.update(tc.init_layer_norm(f"{prefix}.ln3", d_m))
    return p


@dataclass
class PogModel:
    config: PogConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: PogConfig) -> "PogModel":
        rng = np.random.default_rng(config.seed)
        d_e, d_m, inner = config.embed_dim, config.model_dim, config.ffn_mult * config.model_dim
        params = tc.init_transition(rng, "per.trans", d_e, d_m)
        for i in range(config.per_layers):
            params.update(tc.init_encoder_layer(rng, f"per.enc.{i}", d_m, inner))
        params.update(tc.init_transition(rng, "gen.trans", d_e, d_m))
        for i in range(config.gen_layers):
            params.update(_init_decoder_layer(rng, f"gen.dec.{i}", d_m, inner))
        params["start"] = tc.uniform_init(rng, d_e, (d_e,))
        params["end"] = tc.uniform_init(rng, d_m, (d_m,))
        return cls(config, params)

    def hyperparams(self) -> dict:
        return asdict(self.config)


@dataclass(frozen=True)
class CategoryRule:
    """Ordered category slots; slot ``t`` lists the categories allowed at step ``t``."""
    slots: tuple[frozenset, ...]

    def __post_init__(self) -> None:
        if not self.slots or any(len(s) == 0 for s in self.slots):
            raise ValueError("category rule needs non-empty slots")

    @classmethod
    def of(cls, *slots) -> "CategoryRule":
        return cls(tuple(frozenset(s if isinstance(s, (set, frozenset, list, tuple)) else {s})
                         for s in slots))


# ---------------------------------------------------------------------------
# batched forward pieces
# ---------------------------------------------------------------------------

def _per(P, hist_vecs: np.ndarray, hist_mask: np.ndarray | None, config: PogConfig) -> tc.Tensor:
    b = tc.transition_layer(tc.Tensor(hist_vecs), P, "per.trans")
    for i in range(config.per_layers):
        b = tc.encoder_layer(b, P, f"per.enc.{i}", config.attention(), key_mask=hist_mask)
    return b


def _decoder_layer(h, C, P, prefix: str, config: PogConfig, c_mask) -> tc.Tensor:
    mmh = {w: P[f"{prefix}.mmh.{w}"] for w in ("wq", "wk", "wv", "wo")}
    h1 = tc.layer_norm(h + tc.multi_head_attention(h, h, h, config.attention(causal=True), mmh),
                       P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    xmh = {w: P[f"{prefix}.xmh.{w}"] for w in ("wq", "wk", "wv", "wo")}
    h2 = tc.layer_norm(h1 + tc.multi_head_attention(h1, C, C, config.attention(), xmh, key_mask=c_mask),
                       P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    ff = {w: P[f"{prefix}.ffn.{w}"] for w in ("w1", "b1", "w2", "b2")}
    return tc.layer_norm(h2 + tc.pffn(h2, ff), P[f"{prefix}.ln3.g"], P[f"{prefix}.ln3.b"])


def _gen(P, item_vecs: np.ndarray, C: tc.Tensor, c_mask, config: PogConfig) -> tc.Tensor:
    """Decode [START] + items; ``item_vecs`` is (B, t, d_e), output (B, t + 1, d_m)."""
    b, d_e = item_vecs.shape[0], config.embed_dim
    start = tc.Tensor(np.ones((b, 1, 1))) * tc.reshape(P["start"], (1, 1, d_e))
    x = tc.concat([start, tc.Tensor(item_vecs)], axis=1) if item_vecs.shape[1] else start
    h = tc.transition_layer(x, P, "gen.trans")
    for i in range(config.gen_layers):
        h = _decoder_layer(h, C, P, f"gen.dec.{i}", config, c_mask)
    return h


def _pad(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    m = max(len(s) for s in seqs)
    idx = np.zeros((len(seqs), m), dtype=np.int64)
    mask = np.zeros((len(seqs), m), dtype=bool)
    for i, s in enumerate(seqs):
        idx[i, :len(s)] = s
        mask[i, :len(s)] = True
    return idx, mask


def _batch_loss(P, item_vecs: np.ndarray, histories: Sequence[np.ndarray], outfits: np.ndarray,
                negatives: np.ndarray, config: PogConfig) -> tc.Tensor:
    """Teacher-forced NLL over n item steps plus the END step.

    ``outfits`` is (B, n) in target order; ``negatives`` is (B, n + 1, K).
    """
    b, n = outfits.shape
    hidx, hmask = _pad(histories)
    C = _per(P, item_vecs[hidx], hmask, config)
    V = _gen(P, item_vecs[outfits], C, hmask, config)            # (B, n+1, d_m)
    truth = np.concatenate([outfits, np.zeros((b, 1), dtype=np.int64)], axis=1)
    cand = np.concatenate([truth[..., None], negatives], axis=2)   # (B, n+1, 1+K)
    H = tc.transition_layer(tc.Tensor(item_vecs[cand]), P, "gen.trans")
    is_end = np.zeros(cand.shape + (1,))
    is_end[:, n, 0] = 1.0
    H = H * tc.Tensor(1.0 - is_end) + tc.Tensor(is_end) * P["end"]
    logits = tc.tsum(H * tc.reshape(V, (b, n + 1, 1, config.model_dim)), axis=-1)
    return -tc.tmean(tc.log_softmax(logits)[..., 0])


def _negatives(outfits: np.ndarray, num_items: int, k: int, rng) -> np.ndarray:
    b, n = outfits.shape
    negs = outfit_negatives(outfits, num_items, k, rng)
    last = np.stack([sample_negatives(num_items, o, k, rng) for o in outfits])
    return np.concatenate([negs, last[:, None, :]], axis=1)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def per_encode(history_vecs, model: PogModel) -> np.ndarray:
    """Per-network output C (m, d_m) for one history of item embeddings (m, d_e)."""
    x = np.asarray(history_vecs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("history must be a non-empty (m, d_e) array")
    if x.shape[0] > model.config.history_cap:
        raise ValueError(f"history longer than cap {model.config.history_cap}")
    if x.shape[1] != model.config.embed_dim:
        raise ValueError(f"embedding width {x.shape[1]} != embed_dim {model.config.embed_dim}")
    return _per(model.params, x[None], None, model.config).data[0]


def gen_decode(prefix_vecs, C, model: PogModel) -> np.ndarray:
    """Decoder output V for [START] followed by ``prefix_vecs`` (t, d_e); shape (t + 1, d_m)."""
    x = np.asarray(prefix_vecs, dtype=np.float64).reshape(-1, model.config.embed_dim)
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[1] != model.config.model_dim:
        raise ValueError(f"C must be (m, {model.config.model_dim}), got {C.shape}")
    return _gen(model.params, x[None], tc.Tensor(C[None]), None, model.config).data[0]


def gen_transition(item_vecs, model: PogModel) -> np.ndarray:
    return tc.transition_layer(tc.Tensor(np.atleast_2d(item_vecs)), model.params, "gen.trans").data


def pog_loss(history: Sequence[int], outfit: Sequence[int], item_vecs: np.ndarray, model: PogModel,
             rng: np.random.Generator | None = None, negatives: np.ndarray | None = None) -> float:
    """Teacher-forced loss for one (history, outfit) pair; ``outfit`` already in target order."""
    outfit = np.asarray(outfit, dtype=np.int64)[None]
    if outfit.shape[1] < 1:
        raise ValueError("outfit must hold at least one item")
    if negatives is None:
        negatives = _negatives(outfit, len(item_vecs), model.config.num_negatives,
                               rng or np.random.default_rng())[0]
    return float(_batch_loss(model.params, item_vecs, [np.asarray(history, dtype=np.int64)],
                             outfit, negatives[None], model.config).data)


def init_gen_from_fom(fom: FomModel, config: PogConfig) -> PogModel:
    """Fresh POG whose Gen transition / self-attention / PFFN / norms come from ``fom``.

    Decoder layer ``i`` takes FOM encoder layer ``i``: MH -> MMH, LN1 -> LN1,
    PFFN -> PFFN, LN2 -> LN3.  The START embedding starts from the MASK
    embedding.  Cross-attention and the Per network keep their fresh init.
    """
    fc = fom.config
    if (fc.embed_dim, fc.model_dim, fc.num_heads, fc.ffn_mult) != \
            (config.embed_dim, config.model_dim, config.num_heads, config.ffn_mult):
        raise ValueError("FOM and POG shapes differ")
    if config.gen_layers > fc.num_layers:
        raise ValueError(f"gen_layers {config.gen_layers} exceeds FOM depth {fc.num_layers}")
    model = PogModel.init(config)
    src = fom.params
    for w in ("w0", "b0", "w1", "b1"):
        model.params[f"gen.trans.{w}"] = src[f"trans.{w}"].copy()
    model.params["start"] = src["mask"].copy()
    for i in range(config.gen_layers):
        for w in ("wq", "wk", "wv", "wo"):
            model.params[f"gen.dec.{i}.mmh.{w}"] = src[f"enc.{i}.mh.{w}"].copy()
        for w in ("w1", "b1", "w2", "b2"):
            model.params[f"gen.dec.{i}.ffn.{w}"] = src[f"enc.{i}.ffn.{w}"].copy()
        for dst, s in (("ln1", "ln1"), ("ln3", "ln2")):
            for w in ("g", "b"):
                model.params[f"gen.dec.{i}.{dst}.{w}"] = src[f"enc.{i}.{s}.{w}"].copy()
    return model


@dataclass
class GeneratedOutfit:
    items: list[int]
    scores: list[float] = field(default_factory=list)
    ended: bool = False


def generate(history: Sequence[int], candidates: Sequence[int], rule: CategoryRule,
             item_vecs: np.ndarray, categories: Sequence[int], model: PogModel,
             min_len: int = 4) -> GeneratedOutfit:
    """Greedy rule-constrained generation by exact inner-product search.

    Step ``t`` may only pick unused candidates whose category lies in slot ``t``.
    END competes as a pseudo-candidate once ``min_len`` items (capped by the
    rule length) are chosen.  Stops at END, when the rule is exhausted, or at
    ``max_len`` items.  Ties go to the earliest candidate.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    categories = np.asarray(categories)
    if candidates.size == 0:
        raise ValueError("empty candidate pool")
    cand_h = gen_transition(item_vecs[candidates], model)
    C = per_encode(item_vecs[np.asarray(history, dtype=np.int64)[-model.config.history_cap:]], model)
    end = model.params["end"]
    need = min(min_len, len(rule.slots))
    out = GeneratedOutfit([])
    used = np.zeros(candidates.size, dtype=bool)
    for t in range(min(len(rule.slots), model.config.max_len)):
        admissible = np.flatnonzero(np.isin(categories[candidates], list(rule.slots[t])) & ~used)
        if admissible.size == 0:
            raise ValueError(f"no admissible candidate for rule slot {t} {sorted(rule.slots[t])}")
        v = gen_decode(item_vecs[out.items], C, model)[-1]
        logits = cand_h[admissible] @ v
        best = int(np.flatnonzero(logits == logits.max())[0])
        if len(out.items) >= need and float(end @ v) > logits[best]:
            out.scores.append(float(end @ v))
            out.ended = True
            break
        used[admissible[best]] = True
        out.items.append(int(candidates[admissible[best]]))
        out.scores.append(float(logits[best]))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class PogTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training config")


def fixed_negatives(pairs, num_items: int, k: int, seed: int) -> list[np.ndarray]:
    return [_negatives(np.asarray(o)[None], num_items, k, np.random.default_rng([seed, i]))[0]
            for i, (_, o) in enumerate(pairs)]


def mean_loss(pairs, item_vecs: np.ndarray, model: PogModel, negatives: list[np.ndarray]) -> float:
    """Average per-pair loss under precomputed negatives (validation)."""
    by_size: dict[int, list[int]] = {}
    for i, (_, o) in enumerate(pairs):
        by_size.setdefault(len(o), []).append(i)
    total = 0.0
    for ids in by_size.values():
        outs = np.array([pairs[i][1] for i in ids], dtype=np.int64)
        negs = np.stack([negatives[i] for i in ids])
        loss = _batch_loss(model.params, item_vecs, [np.asarray(pairs[i][0]) for i in ids],
                           outs, negs, model.config)
        total += float(loss.data) * len(ids)
    return total / len(pairs)


def train_pog(pairs: Sequence[tuple[np.ndarray, np.ndarray]], item_vecs: np.ndarray, config: PogConfig,
              train: PogTrainConfig = PogTrainConfig(), model: PogModel | None = None,
              validation=None) -> tuple[PogModel, list[float], list[tuple[int, float]]]:
    """Adam over (history, outfit) pairs; outfits must already be in target order.

    ``validation`` is an optional ``(pairs, negatives)`` tuple scored every
    ``train.eval_every`` steps (and at step 0); returns (model, curve, val_curve).
    """
    model = model or PogModel.init(config)
    rng = np.random.default_rng([train.seed, 3])
    opt = tc.Adam(model.params, lr=train.lr)
    curve: list[float] = []
    val_curve: list[tuple[int, float]] = []
    by_size: dict[int, list[int]] = {}
    for i, (_, o) in enumerate(pairs):
        by_size.setdefault(len(o), []).append(i)

    def maybe_validate(step):
        if validation is not None and train.eval_every and step % train.eval_every == 0:
            val_curve.append((step, mean_loss(validation[0], item_vecs, model, validation[1])))

    step = 0
    maybe_validate(0)
    for epoch in range(train.epochs):
        batches = []
        for n in sorted(by_size):
            ids = np.array(by_size[n])[rng.permutation(len(by_size[n]))]
            batches.extend(ids[s:s + train.batch_size] for s in range(0, len(ids), train.batch_size))
        for bi in rng.permutation(len(batches)):
            ids = batches[bi]
            outs = np.array([pairs[i][1] for i in ids], dtype=np.int64)
            hists = [np.asarray(pairs[i][0], dtype=np.int64) for i in ids]
            negs = _negatives(outs, len(item_vecs), config.num_negatives, rng)
            loss, grads = tc.value_and_grad(
                lambda P: _batch_loss(P, item_vecs, hists, outs, negs, config), model.params)
            opt.step(grads)
            curve.append(loss)
            step += 1
            maybe_validate(step)
        log.info("pog epoch %d loss %.4f", epoch, curve[-1] if curve else float("nan"))
    return model, curve, val_curve
