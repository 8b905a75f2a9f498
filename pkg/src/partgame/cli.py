"""Command-line entry point.

Verbs: ``gen`` (synthesize a dataset), ``decompose`` (write part masks for a
dataset), ``fit`` (train dictionaries), ``eval`` (score predictions),
``ground`` (relation grounding protocol), ``dump-embeddings`` (descriptor
CSV for external visualization).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from itertools import combinations

import numpy as np

from .core import write_pgm
from .dictionary import EmptyPartError, embed_pair, embed_part
from .harness import (
    Config,
    config_dict,
    decompose_many,
    fit,
    ground,
    load_config,
    load_predictions,
    run_eval,
)
from .synthworld import (
    GenConfig,
    gen_lineworld,
    gen_lwg,
    gen_lwg_mixed,
    load_dataset,
    write_dataset,
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partgame")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="override the configured seeds")
    p.add_argument("--threads", type=int, default=1, help="worker processes for batch steps")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--dataset", choices=("lineworld", "lwg"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", dest="gen_seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32, help="canvas side in pixels")
    g.add_argument("--out", required=True)
    g.add_argument("--pattern", default=None, help="pin one grounding pattern")

    d = sub.add_parser("decompose", help="decompose a dataset into part masks")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--dict", dest="dict_path", default=None,
                   help="part dictionary JSON enabling the prototype pull")

    f = sub.add_parser("fit", help="train the prototype dictionaries")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a prediction directory")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default="iou,cig,sp")
    e.add_argument("--k", type=int, default=None, help="override metric cluster count")
    e.add_argument("--report", required=True)

    r = sub.add_parser("ground", help="relation grounding protocol")
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=("gt-parts", "decomposed"), default="gt-parts")
    r.add_argument("--dict", dest="dict_path", default=None)
    r.add_argument("--report", required=True)

    m = sub.add_parser("dump-embeddings", help="write part/pair descriptors as CSV")
    m.add_argument("--data", required=True)
    m.add_argument("--pred", default=None, help="use predicted parts instead of references")
    m.add_argument("--out", required=True)
    return p


def _cmd_gen(args, cfg: Config) -> None:
    gcfg = GenConfig(height=args.size, width=args.size)
    base = args.gen_seed if args.seed is None else args.seed
    scenes = []
    for i in range(args.n):
        if args.dataset == "lineworld":
            scenes.append(gen_lineworld(base + i, gcfg))
        elif args.pattern is not None:
            scenes.append(gen_lwg(base + i, args.pattern, gcfg))
        else:
            scenes.append(gen_lwg_mixed(base + i, gcfg))
    write_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} samples to {args.out}")


def _cmd_decompose(args, cfg: Config) -> None:
    from .dictionary import PrototypeDictionary

    data = load_dataset(args.data)
    dictionary = PrototypeDictionary.load(args.dict_path) if args.dict_path else None
    seed = cfg.decompose.seed if args.seed is None else args.seed
    decs = decompose_many(
        [scene.image for _, scene in data],
        cfg.game,
        cfg.decompose,
        dictionary=dictionary,
        seed_keys=[[seed, i] for i in range(len(data))],
        pool=None if args.threads <= 1 else __import__(
            "concurrent.futures", fromlist=["ProcessPoolExecutor"]
        ).ProcessPoolExecutor(max_workers=args.threads),
        threads=args.threads,
    )
    parts_dir = os.path.join(args.out, "parts")
    decomp_dir = os.path.join(args.out, "decomp")
    os.makedirs(parts_dir, exist_ok=True)
    os.makedirs(decomp_dir, exist_ok=True)
    for (sample_id, _), dec in zip(data, decs):
        for k, part in enumerate(dec.parts):
            write_pgm(os.path.join(parts_dir, f"{sample_id}_{k}.pgm"), part)
        with open(os.path.join(decomp_dir, f"{sample_id}.json"), "w") as fh:
            json.dump({"loss": dec.loss.as_dict(), "steps_run": dec.steps_run}, fh)
    print(f"decomposed {len(decs)} samples into {args.out}")


def _cmd_fit(args, cfg: Config) -> None:
    fit_cfg = cfg.fit if args.seed is None else replace(cfg.fit, seed=args.seed)
    manifest = fit(args.data, fit_cfg, args.out, threads=args.threads)
    final = manifest["records"][-1] if manifest["records"] else None
    print(f"fit complete: {len(manifest['records'])} epochs"
          + (f", final clustering loss {final['clustering_loss']:.4f}" if final else ""))


def _cmd_eval(args, cfg: Config) -> None:
    if args.k is not None:
        cfg = replace(cfg, metrics=replace(cfg.metrics, k=args.k))
    if args.seed is not None:
        cfg = replace(cfg, metrics=replace(cfg.metrics, seed=args.seed))
    names = [x for x in args.metrics.split(",") if x]
    report = run_eval(args.pred, args.data, names, cfg)
    report.save(args.report)
    print(json.dumps(report.to_json()["config"] and {k: v for k, v in report.values.items()}))


def _cmd_ground(args, cfg: Config) -> None:
    report = ground(args.data, cfg, mode=args.mode, part_dict_path=args.dict_path,
                    threads=args.threads)
    report.save(args.report)
    print(json.dumps({k: v for k, v in report.values.items()}))


def _cmd_dump(args, cfg: Config) -> None:
    data = load_dataset(args.data)
    parts_by_id = (
        load_predictions(args.pred, [sid for sid, _ in data]) if args.pred else None
    )
    pool = cfg.dictionary.pool_size
    min_mass = cfg.dictionary.empty_mass
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "part_idx", "arity"] + [f"v{i}" for i in range(pool * pool)])
        for sample_id, scene in data:
            parts = parts_by_id[sample_id] if parts_by_id else scene.parts
            valid = [(i, p) for i, p in enumerate(parts) if np.asarray(p).sum() >= min_mass]
            for i, part in valid:
                writer.writerow([sample_id, i, 1] + list(embed_part(part, pool)))
            for (i, a), (j, b) in combinations(valid, 2):
                try:
                    mu = embed_pair(a, b, pool)
                except EmptyPartError:
                    continue
                writer.writerow([sample_id, f"{i}-{j}", 2] + list(mu))
    print(f"wrote descriptors to {args.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    handlers = {
        "gen": _cmd_gen,
        "decompose": _cmd_decompose,
        "fit": _cmd_fit,
        "eval": _cmd_eval,
        "ground": _cmd_ground,
        "dump-embeddings": _cmd_dump,
    }
    handlers[args.verb](args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
