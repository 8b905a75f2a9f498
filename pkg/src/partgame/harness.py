"""End-to-end loops: dictionary fitting, relation grounding, evaluation.

The fit loop alternates decomposition and clustering per batch: every sample
in a batch is decomposed (with the dictionary pull active after warm-up),
the resulting parts feed one clustering step, and per-epoch aggregates (mean
loss components, clustering loss, corpus log-likelihood) are recorded in a
run manifest. All randomness derives from the run seed; per-sample
decomposition streams make results independent of batch grouping and worker
count.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import read_pgm, write_pgm
from .decomposer import DecomposeConfig, decompose_batch
from .dictionary import (
    DictionaryConfig,
    EmptyPartError,
    MemoryBank,
    PrototypeDictionary,
    clustering_step,
    embed_pair,
    embed_part,
    init_dictionary,
    log_likelihood,
)
from .gameloss import GameConfig
from .metrics import ShapeScoreConfig, cig, iou_align, relation_accuracy, shape_score
from .synthworld import RelationKind, Scene, load_dataset

RELATION_CLASSES = tuple(RelationKind)


@dataclass
class MetricsConfig:
    k: int = 10  # K-Means clusters for the information-gain metric
    d_pca: int = 32
    n_players_baseline: int = 4
    smoothing: str = "rdp"
    rdp_epsilon: float = 1.0
    seed: int = 0


def fit_decompose_defaults() -> DecomposeConfig:
    """Lighter decomposition settings for the training loop.

    Training runs tens of thousands of decompositions; a shorter noise-free
    schedule keeps epochs fast while the parts stay good enough to cluster.
    """
    return DecomposeConfig(
        outer_steps=4, inner_steps=60, sigma_max=0.0, sigma_min=0.0, proto_pull=0.01
    )


@dataclass
class FitConfig:
    epochs: int = 20
    batch_size: int = 32
    warmup_epochs: int = 2
    seed: int = 0
    game: GameConfig = field(default_factory=GameConfig)
    decompose: DecomposeConfig = field(default_factory=fit_decompose_defaults)
    dictionary: DictionaryConfig = field(default_factory=DictionaryConfig)

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs and self.epochs > 0:
            raise ValueError("warmup_epochs must be smaller than epochs")


@dataclass
class Config:
    """Full configuration bundle mirroring the TOML sections."""

    game: GameConfig = field(default_factory=GameConfig)
    decompose: DecomposeConfig = field(default_factory=DecomposeConfig)
    dictionary: DictionaryConfig = field(default_factory=DictionaryConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    if "th_s" in section and section["th_s"] is False:
        section = {**section, "th_s": None}
    return cls(**section)


def load_config(path=None) -> Config:
    """Config from a TOML file; missing sections fall back to defaults.

    ``th_s = false`` in [game] selects the raw (hard) overlap hinge.
    """
    if path is None:
        return Config()
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    game = _build(GameConfig, raw.get("game", {}), "game")
    decompose = _build(DecomposeConfig, raw.get("decompose", {}), "decompose")
    dictionary = _build(DictionaryConfig, raw.get("dictionary", {}), "dictionary")
    metrics = _build(MetricsConfig, raw.get("metrics", {}), "metrics")
    fit_section = dict(raw.get("fit", {}))
    known = {"epochs", "batch_size", "warmup_epochs", "seed"}
    unknown = set(fit_section) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [fit]: {sorted(unknown)}")
    fit_decompose = decompose if "decompose" in raw else fit_decompose_defaults()
    fit = FitConfig(game=game, decompose=fit_decompose, dictionary=dictionary, **fit_section)
    return Config(game, decompose, dictionary, fit, metrics)


def config_dict(cfg) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# Batch decomposition with optional worker processes


def _decompose_chunk(args):
    targets, game, dcfg, dictionary, seed_keys, sources = args
    seeds = [np.random.SeedSequence(k) for k in seed_keys]
    return decompose_batch(targets, game, dcfg, dictionary, seeds, sources, dtype=np.float32)


def decompose_many(
    targets, game, dcfg, dictionary=None, seed_keys=None, sources=None, pool=None, threads=1
):
    """Decompose samples with per-sample seed keys, optionally in workers.

    ``seed_keys`` are entropy lists fed to SeedSequence, so results do not
    depend on chunking or worker count.
    """
    n = len(targets)
    if seed_keys is None:
        seed_keys = [[i] for i in range(n)]
    if sources is None:
        sources = [""] * n
    if pool is None or threads <= 1:
        return _decompose_chunk((targets, game, dcfg, dictionary, seed_keys, sources))
    step = (n + threads - 1) // threads
    jobs = []
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        jobs.append(pool.submit(
            _decompose_chunk,
            (targets[lo:hi], game, dcfg, dictionary, seed_keys[lo:hi], sources[lo:hi]),
        ))
    out = []
    for job in jobs:
        out.extend(job.result())
    return out


# ---------------------------------------------------------------------------
# Fit


def fit(data_dir, cfg: FitConfig, out_dir, threads: int = 1) -> dict:
    """Train the dictionaries on a dataset; returns the run manifest.

    Writes ``manifest.json`` plus ``dict_arity1.json`` / ``dict_arity2.json``
    into ``out_dir``. Fully deterministic given the config and seed (wall
    clock aside).
    """
    t_start = time.time()
    data = load_dataset(data_dir)
    if not data:
        raise ValueError(f"no samples found under {data_dir}")
    images = [scene.image for _, scene in data]
    n = len(images)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1C7]))
    banks = {
        1: MemoryBank(1, cfg.dictionary.bank_capacity_1),
        2: MemoryBank(2, cfg.dictionary.bank_capacity_2),
    }
    dicts: dict[int, PrototypeDictionary | None] = {1: None, 2: None}
    records = []
    os.makedirs(out_dir, exist_ok=True)
    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            warmup = epoch < cfg.warmup_epochs
            order = rng.permutation(n)
            sums: dict[str, float] = {}
            cluster_losses = []
            epoch_parts = []
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                targets = [images[i] for i in idx]
                dcfg = cfg.decompose if not warmup else replace(cfg.decompose, proto_pull=0.0)
                decs = decompose_many(
                    targets,
                    cfg.game,
                    dcfg,
                    dictionary=None if warmup else dicts[1],
                    seed_keys=[[cfg.seed, epoch, int(i)] for i in idx],
                    sources=[data[i][0] for i in idx],
                    pool=pool,
                    threads=threads,
                )
                batch_parts = [d.parts for d in decs]
                epoch_parts.extend(batch_parts)
                closs, dicts, banks = clustering_step(
                    batch_parts, banks, dicts, cfg.dictionary, rng, warmup=warmup
                )
                cluster_losses.append(closs)
                for d in decs:
                    for key, val in d.loss.as_dict().items():
                        sums[key] = sums.get(key, 0.0) + val
            if dicts[1] is None and epoch >= cfg.warmup_epochs - 1:
                need1 = cfg.dictionary.n_proto(1) * cfg.dictionary.multi_k
                need2 = cfg.dictionary.n_proto(2) * cfg.dictionary.multi_k
                if len(banks[1]) >= need1 and len(banks[2]) >= need2:
                    dicts[1] = init_dictionary(1, banks[1].asarray(), cfg.dictionary, rng)
                    dicts[2] = init_dictionary(2, banks[2].asarray(), cfg.dictionary, rng)
            loglik = (
                log_likelihood(epoch_parts, dicts, cfg.dictionary)
                if dicts[1] is not None and dicts[2] is not None
                else None
            )
            records.append(
                {
                    "epoch": epoch,
                    "warmup": warmup,
                    "mean_loss": {k: v / n for k, v in sums.items()},
                    "clustering_loss": float(np.mean(cluster_losses)),
                    "log_likelihood": loglik,
                }
            )
    finally:
        if pool is not None:
            pool.shutdown()
    paths = {}
    for arity, d in dicts.items():
        if d is not None:
            path = os.path.join(out_dir, f"dict_arity{arity}.json")
            d.save(path)
            paths[str(arity)] = path
    manifest = {
        "config": config_dict(cfg),
        "records": records,
        "dictionaries": paths,
        "n_samples": n,
        "wall_clock": time.time() - t_start,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


# ---------------------------------------------------------------------------
# Relation grounding


@dataclass
class MetricReport:
    values: dict
    n_samples: int
    config: dict

    def to_json(self) -> dict:
        return {**self.values, "n_samples": self.n_samples, "config": self.config}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)


def fit_relation_dictionary(
    pairs: list[np.ndarray],
    labels: list[int],
    cfg: DictionaryConfig,
    epochs: int = 200,
) -> PrototypeDictionary:
    """Supervised relation prototypes: one per class, fit by CE descent.

    Prototypes start at the class means of the training descriptors and then
    take full-batch gradient steps on the same cross-entropy objective the
    unsupervised clustering uses.
    """
    from .dictionary import ce_loss_and_grad

    mu = np.stack(pairs)
    y = np.asarray(labels)
    n_classes = len(RELATION_CLASSES)
    protos = np.stack(
        [
            mu[y == c].mean(axis=0) if (y == c).any() else np.zeros(mu.shape[1])
            for c in range(n_classes)
        ]
    )
    counts = np.bincount(y, minlength=n_classes).astype(float)
    dictionary = PrototypeDictionary(2, protos[:, None, :], counts, cfg.tau_ce)
    for _ in range(epochs):
        _, grad = ce_loss_and_grad(mu, dictionary, y)
        dictionary.prototypes = dictionary.prototypes - cfg.eta_proto * grad
    return dictionary


def _scene_pairs(scene: Scene, pool_size: int):
    out = []
    for i, j, kind in scene.relations:
        try:
            mu = embed_pair(scene.parts[i], scene.parts[j], pool_size)
        except EmptyPartError:
            continue
        out.append((mu, RELATION_CLASSES.index(kind)))
    return out


def ground(
    lwg_dir,
    config: Config,
    mode: str = "gt-parts",
    part_dict_path=None,
    train_fraction: float = 0.8,
    threads: int = 1,
) -> MetricReport:
    """Grounding protocol: learn the four relation prototypes on a training
    split of labeled pairs, then predict relations on held-out samples.

    In ``gt-parts`` mode predictions run on the reference masks (the
    decomposer is never invoked). In ``decomposed`` mode each held-out image
    is decomposed, empty players are dropped, parts are aligned to the
    references by IoU, relations are predicted on the complete graph of
    non-empty parts, and the mean IoU is reported alongside accuracy.
    """
    if mode not in ("gt-parts", "decomposed"):
        raise ValueError(f"unknown mode {mode!r}")
    data = load_dataset(lwg_dir)
    if not data:
        raise ValueError(f"no samples found under {lwg_dir}")
    for _, scene in data:
        if not scene.relations:
            raise ValueError("grounding requires relation labels on every sample")
    n_train = int(round(train_fraction * len(data)))
    train, test = data[:n_train], data[n_train:]
    if not train or not test:
        raise ValueError("both grounding splits must be non-empty")
    dcfg = config.dictionary
    pairs, labels = [], []
    for _, scene in train:
        for mu, lab in _scene_pairs(scene, dcfg.pool_size):
            pairs.append(mu)
            labels.append(lab)
    rel_dict = fit_relation_dictionary(pairs, labels, dcfg)

    part_dict = PrototypeDictionary.load(part_dict_path) if part_dict_path else None
    total, correct_sum, iou_sum = 0, 0.0, 0.0
    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        if mode == "decomposed":
            decs = decompose_many(
                [scene.image for _, scene in test],
                config.game,
                config.decompose,
                dictionary=part_dict,
                seed_keys=[[config.metrics.seed, 0x6E0D, i] for i in range(len(test))],
                pool=pool,
                threads=threads,
            )
        for t_idx, (_, scene) in enumerate(test):
            if mode == "gt-parts":
                parts = scene.parts
                matching = {i: i for i in range(len(parts))}
            else:
                parts = [
                    p for p in decs[t_idx].parts if p.sum() >= dcfg.empty_mass
                ]
                if not parts:
                    total += len(scene.relations)
                    continue
                matching, mean_iou = iou_align(parts, scene.parts)
                iou_sum += mean_iou
            predicted = {}
            for i in range(len(parts)):
                for j in range(i + 1, len(parts)):
                    try:
                        mu = embed_pair(parts[i], parts[j], dcfg.pool_size)
                    except EmptyPartError:
                        continue
                    predicted[(i, j)] = RELATION_CLASSES[int(rel_dict.nearest(mu[None])[0])]
            acc = relation_accuracy(predicted, scene.relations, matching)
            correct_sum += acc * len(scene.relations)
            total += len(scene.relations)
    finally:
        if pool is not None:
            pool.shutdown()
    values = {"relation_accuracy": correct_sum / total if total else 1.0, "mode": mode}
    if mode == "decomposed":
        values["iou"] = iou_sum / len(test)
    return MetricReport(values, len(test), {"dictionary": config_dict(dcfg), "mode": mode})


# ---------------------------------------------------------------------------
# Evaluation of a prediction directory against a dataset


def load_predictions(pred_dir, ids) -> dict[str, list]:
    parts_dir = os.path.join(pred_dir, "parts")
    if not os.path.isdir(parts_dir):
        raise FileNotFoundError(f"{pred_dir} has no parts/ directory")
    by_id = {}
    for sample_id in ids:
        parts = []
        k = 0
        while True:
            path = os.path.join(parts_dir, f"{sample_id}_{k}.pgm")
            if not os.path.exists(path):
                break
            parts.append(read_pgm(path))
            k += 1
        if not parts:
            raise FileNotFoundError(f"no predicted parts for sample {sample_id}")
        by_id[sample_id] = parts
    return by_id


def run_eval(pred_dir, data_dir, metric_names, config: Config) -> MetricReport:
    """Compute the requested metrics for a prediction directory."""
    known = {"iou", "cig", "sp"}
    unknown = set(metric_names) - known
    if unknown:
        raise ValueError(f"unknown metric(s): {sorted(unknown)}; expected {sorted(known)}")
    data = load_dataset(data_dir)
    ids = [sample_id for sample_id, _ in data]
    preds = load_predictions(pred_dir, ids)
    mcfg = config.metrics
    values: dict = {}
    if "iou" in metric_names:
        scores = [iou_align(preds[sid], scene.parts)[1] for sid, scene in data]
        values["iou"] = float(np.mean(scores))
    if "cig" in metric_names:
        values["cig"] = cig(
            [preds[sid] for sid, _ in data],
            [scene.image for _, scene in data],
            k=mcfg.k,
            seed=mcfg.seed,
            n_players=mcfg.n_players_baseline,
            d_pca=mcfg.d_pca,
        )
    if "sp" in metric_names:
        sccfg = ShapeScoreConfig(smoothing=mcfg.smoothing, rdp_epsilon=mcfg.rdp_epsilon)
        scores = []
        for sid, _ in data:
            for part in preds[sid]:
                bd = shape_score(part, sccfg)
                if not bd.empty:
                    scores.append(bd.score)
        values["sp"] = float(np.mean(scores)) if scores else 0.0
    return MetricReport(values, len(data), {"metrics": config_dict(mcfg)})
