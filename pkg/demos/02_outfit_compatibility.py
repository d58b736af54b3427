"""Learning what goes together: embeddings, masked-item training, FITB and CP.

We build a synthetic catalog where every outfit is drawn from one latent
style, fuse the item features into a single embedding, and train the
compatibility model by hiding one item at a time and asking it to pick the
hidden item out of a few random negatives.

Run:  python demos/02_outfit_compatibility.py      (about a minute)
"""
import numpy as np

from outfitforge import data, embedding as em, evalsim as ev, fom
from outfitforge.pipeline import split_outfits

cfg = data.SyntheticWorldConfig(image_dim=16, text_dim=8, cf_dim=8, noise=0.1, seed=1)
world = data.synthesize_world(cfg)
print(data.dataset_stats(world.catalog, world.outfits, world.behaviors))

# 1. one linear layer fuses image, text and CF features; a triplet loss pulls
#    same-category items together
embed, curve = em.train_embedding(world.catalog, em.EmbedConfig(embed_dim=16, dims=cfg.dims, steps=300))
E = em.fuse_catalog(world.catalog, embed)
intra, inter = em.category_distances(E, world.catalog.categories)
print(f"triplet loss {np.mean(curve[:20]):.3f} -> {np.mean(curve[-20:]):.3f}; "
      f"mean distance within category {intra:.2f}, across {inter:.2f}")

# 2. hold out 10% of outfits and train on the rest
train, test = split_outfits(world.catalog, world.outfits, seed=0)
config = fom.FomConfig(num_negatives=16)
model, losses = fom.train_fom(E, train, config, fom.FomTrainConfig(epochs=15))
print(f"masked-item loss {losses[0]:.3f} -> {losses[-1]:.3f} over {len(losses)} steps")

# 3. fill in the blank: one slot hidden, four choices
fitb = ev.build_fitb_instances(test, seed=0)
inst = fitb[0]
print("example blank:", inst.context, "choices", inst.choices, "truth", inst.truth)
print("model picks item", inst.choices[ev.fitb_predictions(model, [inst], E)[0]])
untrained = fom.FomModel.init(config)
print(f"FITB accuracy: trained {ev.eval_fitb(model, fitb, E):.3f}, "
      f"untrained {ev.eval_fitb(untrained, fitb, E):.3f} (chance 0.25)")

# 4. compatibility prediction: real outfits vs random item sets of equal size
cp = ev.build_cp_instances(test, seed=0)
print(f"CP AUC: trained {ev.eval_cp(model, cp, E):.3f}, untrained {ev.eval_cp(untrained, cp, E):.3f}")

# the score is a set function, so item order does not matter
o = test[0]
print("cp_score invariant to order:", np.isclose(fom.cp_score(o, E, model), fom.cp_score(o[::-1], E, model),
                                                 atol=1e-12))
