"""Generating outfits for a user from their click history.

The generator reads a user's recent clicks with a bidirectional encoder and
writes an outfit one item at a time, tops first, under a category rule.  Its
decoder starts from a trained compatibility model.  At the end we replay
simulated sessions for three strategies: random outfits, item-item CF and the
generator.

Run:  python demos/03_personalized_generation.py   (about two minutes)
"""
import numpy as np

from outfitforge import data, embedding as em, evalsim as ev, fom, pog
from outfitforge.pipeline import index_pairs, outfit_indices, split_outfits

cfg = data.SyntheticWorldConfig(image_dim=16, text_dim=8, cf_dim=8, noise=0.1, seed=1,
                                click_sharpness=10.0, click_bias=-5.0)
world = data.synthesize_world(cfg)
embed, _ = em.train_embedding(world.catalog, em.EmbedConfig(embed_dim=16, dims=cfg.dims, steps=300))
E = em.fuse_catalog(world.catalog, embed)
outfits = outfit_indices(world.catalog, world.outfits)
train, _ = split_outfits(world.catalog, world.outfits, seed=0)
compat, _ = fom.train_fom(E, train, fom.FomConfig(num_negatives=16), fom.FomTrainConfig(epochs=40))

# (history, clicked outfit) pairs from users with more than ten clicks
pairs = index_pairs(world.catalog, world.behaviors, world.outfits)
print(f"{len(pairs)} training pairs, mean history length {np.mean([len(h) for h, _ in pairs]):.1f}")

config = pog.PogConfig(num_negatives=16)
model, curve, _ = pog.train_pog(pairs, E, config, pog.PogTrainConfig(epochs=20),
                                model=pog.init_gen_from_fom(compat, config))
print(f"generation loss {curve[0]:.3f} -> {curve[-1]:.3f}")

# one slot per group, in the order tops, bottoms, shoes, accessories
rule = ev.category_rule_for(world)
histories = ev._latest_histories(world, 50)
for u in range(3):
    out = pog.generate(histories[u], np.arange(len(E)), rule, E, world.catalog.categories, model)
    styles = world.item_clusters[out.items]
    print(f"user {world.user_ids[u]} (style {world.user_clusters[u]}): items {out.items}, "
          f"item styles {styles.tolist()}, groups {world.catalog.groups[out.items].tolist()}")

# simulated CTR; each strategy shows one outfit per session
models = ev.SimModels(model, E, outfits)
for s in ev.STRATEGIES:
    r = ev.simulate_sessions(s, world, models, 4000, seed=3)
    print(f"{s:>3}: CTR {r.ctr:.3f} +/- {r.stderr:.3f}")
