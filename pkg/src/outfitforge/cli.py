"""Command-line entry point: ``outfitforge <subcommand> [flags]``.

Every subcommand writes its artifacts plus ``manifest.json`` into ``--out``.
The default seed comes from ``OUTFITFORGE_SEED`` (else 0).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, data, embedding as em, evalsim as ev, fom, pog
from . import tensor_core as tc
from .pipeline import index_pairs, outfit_indices, split_outfits

log = logging.getLogger("outfitforge")

COMMANDS = ("synth", "train-embed", "train-fom", "train-pog", "eval-fitb", "eval-cp",
            "generate", "simulate", "gradcheck")


class InvariantError(RuntimeError):
    """A run finished but violated a checked invariant (exit status 1)."""


def _default_seed() -> int:
    try:
        return int(os.environ.get("OUTFITFORGE_SEED", "0"))
    except ValueError:
        return 0


def _write_csv(path: Path, header: str, rows, config_hash: str) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# config_hash={config_hash}\n{header}\n")
        for r in rows:
            f.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in r) + "\n")
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _embeddings(args, catalog):
    model = checkpoint.load(args.embed)
    return em.fuse_catalog(catalog, model)


# ---------------------------------------------------------------------------
# subcommands; each returns (config dict, artifact paths)
# ---------------------------------------------------------------------------

def cmd_synth(args, out: Path):
    cfg = data.SyntheticWorldConfig(
        num_users=args.users, num_items=args.items, num_categories=args.categories,
        num_outfits=args.outfits, behaviors_per_user=args.behaviors_per_user, noise=args.noise,
        image_dim=args.image_dim, text_dim=args.text_dim, cf_dim=args.cf_dim,
        click_sharpness=args.click_sharpness, click_bias=args.click_bias, seed=args.seed)
    world = data.synthesize_world(cfg)
    paths = data.save_dataset(out, world.catalog, world.outfits, world.behaviors)
    world_json = _write_json(out / "world.json", asdict(cfg))
    stats = data.dataset_stats(world.catalog, world.outfits, world.behaviors)
    stats["config_hash"] = checkpoint.config_hash(asdict(cfg))
    stats_path = _write_json(out / "stats.json", stats)
    return asdict(cfg), [*paths.values(), world_json, stats_path]


def cmd_train_embed(args, out: Path):
    catalog, _, _ = data.load_dataset(args.data)
    dims = {m: catalog.records[0].features[m].shape[0] for m in args.modalities}
    cfg = em.EmbedConfig(embed_dim=args.embed_dim, margin=args.margin, lr=args.lr, steps=args.steps,
                         seed=args.seed, modalities=tuple(args.modalities),
                         dims={m: dims.get(m, data.FULL_DIMS[m]) for m in data.MODALITIES})
    model, curve = em.train_embedding(catalog, cfg)
    ck = checkpoint.save(out / "embed.ckpt", model)
    lc = _write_csv(out / "embed_loss.csv", "step,loss", enumerate(curve), checkpoint.config_hash(asdict(cfg)))
    return asdict(cfg), [ck, lc]


def cmd_train_fom(args, out: Path):
    catalog, outfits, _ = data.load_dataset(args.data)
    E = _embeddings(args, catalog)
    train, _ = split_outfits(catalog, outfits, args.split_seed)
    cfg = fom.FomConfig(embed_dim=E.shape[1], model_dim=args.dm, num_layers=args.layers,
                        num_heads=args.heads, num_negatives=args.negatives, seed=args.seed)
    tcfg = fom.FomTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                              all_positions=not args.one_position, seed=args.seed)
    model, curve = fom.train_fom(E, train, cfg, tcfg)
    config = {"model": asdict(cfg), "train": asdict(tcfg), "split_seed": args.split_seed}
    ck = checkpoint.save(out / "fom.ckpt", model)
    lc = _write_csv(out / "fom_loss.csv", "step,loss", enumerate(curve), checkpoint.config_hash(config))
    return config, [ck, lc]


def cmd_train_pog(args, out: Path):
    catalog, outfits, behaviors = data.load_dataset(args.data)
    E = _embeddings(args, catalog)
    pairs = index_pairs(catalog, behaviors, outfits, args.history_cap)
    cfg = pog.PogConfig(embed_dim=E.shape[1], model_dim=args.dm, per_layers=args.p, gen_layers=args.q,
                        num_heads=args.heads, num_negatives=args.negatives, max_len=args.max_len,
                        history_cap=args.history_cap, seed=args.seed)
    init = pog.init_gen_from_fom(checkpoint.load(args.fom), cfg) if args.fom else None
    tcfg = pog.PogTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    model, curve, _ = pog.train_pog(pairs, E, cfg, tcfg, model=init)
    config = {"model": asdict(cfg), "train": asdict(tcfg), "fom_init": bool(args.fom)}
    ck = checkpoint.save(out / "pog.ckpt", model)
    lc = _write_csv(out / "pog_loss.csv", "step,loss", enumerate(curve), checkpoint.config_hash(config))
    return config, [ck, lc]


def _scorer(args):
    if args.model == "oracle":
        return ev.OracleScorer(), "oracle"
    if not args.fom:
        raise SystemExit("eval needs --fom CHECKPOINT or --model oracle")
    return checkpoint.load(args.fom), checkpoint.file_hash(args.fom)[:16]


def cmd_eval_fitb(args, out: Path):
    catalog, outfits, _ = data.load_dataset(args.data)
    _, test = split_outfits(catalog, outfits, args.split_seed)
    instances = ev.build_fitb_instances(test, seed=args.seed)
    model, ident = _scorer(args)
    E = _embeddings(args, catalog) if isinstance(model, fom.FomModel) else None
    acc = ev.eval_fitb(model, instances, E)
    config = {"task": "fitb", "model": ident, "split_seed": args.split_seed}
    report = {"task": "fitb", "n": len(instances), "metric": acc, "seed": args.seed,
              "config_hash": checkpoint.config_hash(config)}
    print(f"FITB accuracy {acc:.4f} over {len(instances)} instances")
    return config, [_write_json(out / "fitb.json", report)]


def cmd_eval_cp(args, out: Path):
    catalog, outfits, _ = data.load_dataset(args.data)
    _, test = split_outfits(catalog, outfits, args.split_seed)
    instances = ev.build_cp_instances(test, seed=args.seed)
    model, ident = _scorer(args)
    E = _embeddings(args, catalog) if isinstance(model, fom.FomModel) else None
    value = ev.eval_cp(model, instances, E, seed=args.seed)
    config = {"task": "cp", "model": ident, "split_seed": args.split_seed}
    report = {"task": "cp", "n": len(instances), "metric": value, "seed": args.seed,
              "config_hash": checkpoint.config_hash(config)}
    print(f"CP AUC {value:.4f} over {len(instances)} outfits")
    return config, [_write_json(out / "cp.json", report)]


def _rule_from_catalog(catalog: data.Catalog) -> pog.CategoryRule:
    groups = sorted(set(catalog.groups.tolist()))
    return pog.CategoryRule(tuple(frozenset(np.unique(catalog.categories[catalog.groups == g]).tolist())
                                  for g in groups))


def cmd_generate(args, out: Path):
    catalog, outfits, behaviors = data.load_dataset(args.data)
    E = _embeddings(args, catalog)
    model = checkpoint.load(args.pog)
    rule = _rule_from_catalog(catalog)
    latest = {}
    for b in behaviors:
        latest[b.user_id] = b.clicks
    users = args.user or sorted(latest, key=lambda u: (len(u), u))
    cand = np.arange(len(catalog))
    path = out / "generated.jsonl"
    config = {"pog": checkpoint.file_hash(args.pog)[:16], "users": list(users)}
    h = checkpoint.config_hash(config)
    n_bad = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for uid in users:
            if uid not in latest:
                raise SystemExit(f"unknown user {uid!r}")
            g = pog.generate(catalog.indices(latest[uid]), cand, rule, E, catalog.categories, model)
            ids = [catalog.item_ids[i] for i in g.items]
            n_bad += len(set(ids)) != len(ids) or len(ids) > model.config.max_len
            f.write(json.dumps({"user_id": uid, "item_ids": ids, "scores": g.scores,
                                "config_hash": h},
                               separators=(",", ":")) + "\n")
    if n_bad:
        raise InvariantError(f"{n_bad} generated outfits violate the generation contract")
    return config, [path]


def cmd_simulate(args, out: Path):
    cfg = data.SyntheticWorldConfig(**json.loads(Path(args.world).read_text()))
    world = data.synthesize_world(cfg)
    E = _embeddings(args, world.catalog)
    model = checkpoint.load(args.pog) if args.pog else None
    models = ev.SimModels(model, E, outfit_indices(world.catalog, world.outfits))
    results = {s: ev.simulate_sessions(s, world, models, args.sessions, args.seed) for s in args.strategies}
    report = {"click_model": {"sharpness": cfg.click_sharpness, "bias": cfg.click_bias,
                              "form": "sigmoid(sharpness * user_style . mean_item_style + bias)"},
              "sessions": args.sessions, "seed": args.seed,
              "ctr": {s: r.ctr for s, r in results.items()},
              "stderr": {s: r.stderr for s, r in results.items()}}
    for s, r in results.items():
        print(f"{s}: CTR {r.ctr:.4f} +- {r.stderr:.4f}")
    config = {"world": asdict(cfg), "strategies": list(args.strategies), "sessions": args.sessions}
    report["config_hash"] = checkpoint.config_hash(config)
    rows = ((i, *(results[s].series[i] for s in args.strategies)) for i in range(args.sessions))
    csv = _write_csv(out / "ctr.csv", "session," + ",".join(args.strategies), rows, report["config_hash"])
    return config, [csv, _write_json(out / "simulate.json", report)]


def gradcheck_errors(dm: int, layers: int, seed: int, heads: int = 2, coords: int | None = None) -> dict[str, float]:
    """Max relative gradient error of the embedding, FOM and POG losses on a toy problem."""
    rng = np.random.default_rng(seed)
    d_e, n_items = 4, 12
    item_vecs = rng.normal(size=(n_items, d_e))

    raw = rng.normal(size=(3, 10))
    emb_params = {"fuse.w": rng.normal(size=(10, d_e)) * 0.3, "fuse.b": rng.normal(size=d_e) * 0.1}

    def emb_loss(P):
        e = tc.Tensor(raw) @ P["fuse.w"] + P["fuse.b"]
        return em.triplet_loss(e[0], e[1], e[2], margin=10.0)

    fcfg = fom.FomConfig(embed_dim=d_e, model_dim=dm, num_layers=layers, num_heads=heads, seed=seed)
    fmodel = fom.FomModel.init(fcfg)
    outfit = np.array([0, 1, 2])[None]
    fnegs = fom.outfit_negatives(outfit, n_items, 3, rng)

    pcfg = pog.PogConfig(embed_dim=d_e, model_dim=dm, per_layers=layers, gen_layers=layers,
                         num_heads=heads, seed=seed)
    pmodel = pog.PogModel.init(pcfg)
    hist = [np.array([5, 6, 7])]
    pnegs = pog._negatives(outfit, n_items, 3, rng)

    grng = np.random.default_rng([seed, 1])
    return {
        "embedding": tc.grad_check(emb_loss, emb_params, coords=coords, rng=grng),
        "fom": tc.grad_check(lambda P: fom._batch_loss(P, item_vecs, outfit, fnegs, fcfg),
                             fmodel.params, coords=coords, rng=grng),
        "pog": tc.grad_check(lambda P: pog._batch_loss(P, item_vecs, hist, outfit, pnegs, pcfg),
                             pmodel.params, coords=coords, rng=grng),
    }


def cmd_gradcheck(args, out: Path):
    errs = gradcheck_errors(args.dm, args.layers, args.seed)
    for k, v in errs.items():
        print(f"{k}: max relative error {v:.3e}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e}")
    config = {"dm": args.dm, "layers": args.layers}
    path = _write_json(out / "gradcheck.json", {"errors": errs, "max": worst, "tolerance": 1e-3,
                                                "config_hash": checkpoint.config_hash(config)})
    if worst > 1e-3:
        raise InvariantError(f"gradient check failed: {worst:.3e} > 1e-3")
    return config, [path]


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="outfitforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    seed = _default_seed()

    def common(p, data_arg=True):
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--out", type=Path, default=Path("."))
        if data_arg:
            p.add_argument("--data", type=Path, required=True, help="directory with the dataset files")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, data_arg=False)
    p.add_argument("--users", type=int, default=300)
    p.add_argument("--items", type=int, default=800)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--outfits", type=int, default=2400)
    p.add_argument("--behaviors-per-user", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--image-dim", type=int, default=data.FULL_DIMS["image"])
    p.add_argument("--text-dim", type=int, default=data.FULL_DIMS["text"])
    p.add_argument("--cf-dim", type=int, default=data.FULL_DIMS["cf"])
    p.add_argument("--click-sharpness", type=float, default=6.0)
    p.add_argument("--click-bias", type=float, default=-3.0)

    p = sub.add_parser("train-embed", help="train the multi-modal embedding")
    common(p)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--modalities", type=lambda s: s.split(","), default=list(data.MODALITIES))

    p = sub.add_parser("train-fom", help="train the outfit compatibility model")
    common(p)
    p.add_argument("--embed", type=Path, required=True)
    p.add_argument("--dm", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--negatives", type=int, default=3)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--one-position", action="store_true", help="mask one sampled slot per outfit")
    p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("train-pog", help="train the personalized generator")
    common(p)
    p.add_argument("--embed", type=Path, required=True)
    p.add_argument("--fom", type=Path, help="initialize Gen from this FOM checkpoint")
    p.add_argument("--dm", type=int, default=16)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--q", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--negatives", type=int, default=3)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--history-cap", type=int, default=50)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)

    for name in ("eval-fitb", "eval-cp"):
        p = sub.add_parser(name, help=f"{name[5:].upper()} evaluation on the held-out split")
        common(p)
        p.add_argument("--embed", type=Path)
        p.add_argument("--fom", type=Path)
        p.add_argument("--model", choices=("fom", "oracle"), default="fom")
        p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("generate", help="generate personalized outfits")
    common(p)
    p.add_argument("--embed", type=Path, required=True)
    p.add_argument("--pog", type=Path, required=True)
    p.add_argument("--user", action="append", help="user id (repeatable; default all users)")

    p = sub.add_parser("simulate", help="simulated CTR of RR / CF / POG")
    common(p, data_arg=False)
    p.add_argument("--world", type=Path, required=True, help="world.json written by synth")
    p.add_argument("--embed", type=Path, required=True)
    p.add_argument("--pog", type=Path)
    p.add_argument("--sessions", type=int, default=10000)
    p.add_argument("--strategies", type=lambda s: s.split(","), default=list(ev.STRATEGIES))

    p = sub.add_parser("gradcheck", help="finite-difference check of all training losses")
    common(p, data_arg=False)
    p.add_argument("--dm", type=int, default=8)
    p.add_argument("--layers", type=int, default=1)
    return parser


HANDLERS = {
    "synth": cmd_synth, "train-embed": cmd_train_embed, "train-fom": cmd_train_fom,
    "train-pog": cmd_train_pog, "eval-fitb": cmd_eval_fitb, "eval-cp": cmd_eval_cp,
    "generate": cmd_generate, "simulate": cmd_simulate, "gradcheck": cmd_gradcheck,
}


def _argv_without_out(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)      # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        config, artifacts = HANDLERS[args.command](args, out)
    except InvariantError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    checkpoint.write_manifest(out, args.command, _argv_without_out(argv), config, args.seed, artifacts)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
