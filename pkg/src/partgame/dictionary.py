"""Prototype dictionaries learned by online clustering of part descriptors.

A part descriptor is deterministic: the part mask is shifted so its center
of mass sits at the grid center (bilinear, so sub-pixel shifts blur
slightly), area-average downsampled to ``pool_size x pool_size``, flattened
and L2-normalized. Pair descriptors embed the clipped sum of two masks, so
relative geometry survives the joint centering. Descriptors are translation
invariant by construction (exactly so for integer translations).

Learning alternates decomposition with a clustering step: fresh descriptors
are pushed into FIFO memory banks, K-Means (k-means++ seeding, farthest-point
re-seeding of empty clusters) runs over each bank, cluster centroids are
greedily matched to prototypes by L1 distance, each batch descriptor inherits
the prototype matched to its cluster as a pseudo-label, and prototypes take
one cross-entropy gradient step on logits ``-||mu - phi||^2 / tau``.

Mixture weights track smoothed assignment counts; the corpus log-likelihood
treats each dictionary as a Gaussian mixture over its prototypes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

from .core import Grid


class EmptyPartError(ValueError):
    """Raised when a descriptor is requested for a (near-)empty part."""


@dataclass
class DictionaryConfig:
    n_proto_1: int = 10
    n_proto_2: int = 8
    multi_k: int = 1  # prototypes per predicate
    pool_size: int = 8
    tau_ce: float = 0.1
    tau_lik: float = 0.2
    eta_proto: float = 0.1
    gamma: float = 0.01  # clustering loss weight
    pair_sample_rate: float = 0.3
    bank_capacity_1: int = 4096
    bank_capacity_2: int = 8192
    empty_mass: float = 2.0
    far_pair_gap: float | None = None  # defaults to half the canvas height

    def n_proto(self, arity: int) -> int:
        return self.n_proto_1 if arity == 1 else self.n_proto_2


# ---------------------------------------------------------------------------
# Descriptors


@lru_cache(maxsize=16)
def _pool_weights(size: int, pooled: int) -> np.ndarray:
    """(pooled, size) area-average weights; each output row sums to 1."""
    edges = np.linspace(0.0, size, pooled + 1)
    w = np.zeros((pooled, size))
    cell = size / pooled
    for i in range(pooled):
        lo = np.maximum(edges[i], np.arange(size))
        hi = np.minimum(edges[i + 1], np.arange(size) + 1.0)
        w[i] = np.maximum(0.0, hi - lo) / cell
    w.setflags(write=False)
    return w

def _shifted_pool_ops(weights: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-item operators pooling after a bilinear shift by ``offsets``.

    ``weights`` is (pooled, size); returns (n, pooled, size) such that
    ``op @ x`` equals pooling x shifted by the item's offset (zero fill).
    """
    size = weights.shape[1]
    base = np.floor(offsets).astype(int)
    frac = offsets - base
    idx = np.arange(size)[None, :] + base[:, None]  # (n, size)

    def gather(cols):
        valid = (cols >= 0) & (cols < size)
        g = weights[:, np.clip(cols, 0, size - 1)]  # (pooled, n, size)
        return np.where(valid[None], g, 0.0).transpose(1, 0, 2)

    return (1.0 - frac)[:, None, None] * gather(idx) + frac[:, None, None] * gather(idx + 1)


def center_offsets(masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shifts (dr, dc) moving each mask's center of mass to the grid center."""
    h, w = masks.shape[-2:]
    mass = masks.sum(axis=(-2, -1))
    if np.any(mass <= 0):
        raise EmptyPartError("center of mass undefined for empty mask")
    r_bar = (masks.sum(axis=-1) @ np.arange(h)) / mass
    c_bar = (masks.sum(axis=-2) @ np.arange(w)) / mass
    return (h - 1) / 2.0 - r_bar, (w - 1) / 2.0 - c_bar


def _embed_ops(masks: np.ndarray, pool_size: int):
    h, w = masks.shape[-2:]
    dr, dc = center_offsets(masks)
    ar = _shifted_pool_ops(_pool_weights(h, pool_size), dr)  # (n, D, H)
    ac = _shifted_pool_ops(_pool_weights(w, pool_size), dc)  # (n, D, W)
    return ar, ac


def embed_batch(masks: np.ndarray, pool_size: int = 8):
    """Descriptors for stacked masks (n, H, W).

    Returns (mu, vnorm, ar, ac): unit descriptors (n, pool^2), the pre-
    normalization magnitudes, and the per-item linear pooling operators
    (kept so gradients can flow back through the linear path).
    """
    ar, ac = _embed_ops(masks, pool_size)
    v = np.matmul(ar, np.matmul(masks, ac.transpose(0, 2, 1)))  # (n, D, D)
    v = v.reshape(v.shape[0], -1)
    vnorm = np.linalg.norm(v, axis=1)
    if np.any(vnorm <= 0):
        raise EmptyPartError("descriptor undefined for empty pooled mask")
    return v / vnorm[:, None], vnorm, ar, ac


def embed_part(part: Grid, pool_size: int = 8, min_mass: float = 1e-6) -> np.ndarray:
    """Unit descriptor of one part mask; raises EmptyPartError below min_mass."""
    part = np.asarray(part, dtype=np.float64)
    if part.sum() < min_mass:
        raise EmptyPartError(f"part mass {part.sum():.3g} below {min_mass}")
    mu, _, _, _ = embed_batch(part[None], pool_size)
    return mu[0]


def embed_pair(a: Grid, b: Grid, pool_size: int = 8, min_mass: float = 1e-6) -> np.ndarray:
    """Descriptor of a pair: the clipped union, centered by joint mass."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.sum() < min_mass or b.sum() < min_mass:
        raise EmptyPartError("both parts of a pair must be non-empty")
    return embed_part(np.minimum(a + b, 1.0), pool_size, min_mass)


# ---------------------------------------------------------------------------
# Dictionary state


@dataclass
class PrototypeDictionary:
    arity: int
    prototypes: np.ndarray  # (n_pred, multi_k, d)
    counts: np.ndarray  # raw assignment counts per predicate
    tau_ce: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim == 2:
            self.prototypes = self.prototypes[:, None, :]
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.n_pred < 2:
            raise ValueError("a dictionary needs at least two predicates")
        if not np.isfinite(self.prototypes).all():
            raise ValueError("prototypes must be finite")

    @property
    def n_pred(self) -> int:
        return self.prototypes.shape[0]

    @property
    def multi_k(self) -> int:
        return self.prototypes.shape[1]

    @property
    def d_mu(self) -> int:
        return self.prototypes.shape[2]

    @property
    def pi(self) -> np.ndarray:
        """Laplace-smoothed assignment frequencies (strictly positive)."""
        return (self.counts + 1.0) / (self.counts.sum() + self.n_pred)

    def sq_dists(self, mu: np.ndarray) -> np.ndarray:
        """(n, n_pred) squared L2 distance to each predicate (min over members)."""
        return self._sq_dists_members(mu)[0]

    def _sq_dists_members(self, mu: np.ndarray):
        mu = np.atleast_2d(mu)
        diff = mu[:, None, None, :] - self.prototypes[None]  # (n, P, K, d)
        d2 = (diff**2).sum(-1)  # (n, P, K)
        member = d2.argmin(-1)
        return np.take_along_axis(d2, member[..., None], -1)[..., 0], member

    def nearest(self, mu: np.ndarray) -> np.ndarray:
        return self.sq_dists(mu).argmin(axis=1)

    def save(self, path) -> None:
        flat = self.prototypes.reshape(-1, self.d_mu)
        payload = {
            "arity": self.arity,
            "d_mu": self.d_mu,
            "prototypes": flat.tolist(),
            "pi": self.pi.tolist(),
            "tau_ce": self.tau_ce,
            "meta": {
                **self.meta,
                "multi_k": self.multi_k,
                "counts": self.counts.tolist(),
            },
        }
        with open(path, "w") as f:
            json.dump(payload, f)

    @classmethod
    def load(cls, path) -> "PrototypeDictionary":
        with open(path) as f:
            payload = json.load(f)
        meta = dict(payload.get("meta", {}))
        multi_k = int(meta.pop("multi_k", 1))
        flat = np.asarray(payload["prototypes"], dtype=np.float64)
        counts = np.asarray(meta.pop("counts", np.zeros(flat.shape[0] // multi_k)))
        protos = flat.reshape(-1, multi_k, payload["d_mu"])
        return cls(payload["arity"], protos, counts, payload["tau_ce"], meta)


class MemoryBank:
    """FIFO buffer of past descriptors (no gradient role)."""

    def __init__(self, arity: int, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.arity = arity
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    def push(self, vectors) -> None:
        for v in np.atleast_2d(np.asarray(vectors, dtype=np.float64)):
            self._entries.append(v)

    def asarray(self) -> np.ndarray:
        if not self._entries:
            return np.empty((0, 0))
        return np.stack(list(self._entries))

    def __len__(self) -> int:
        return len(self._entries)


def init_dictionary(
    arity: int, descriptors: np.ndarray, cfg: DictionaryConfig, rng: np.random.Generator
) -> PrototypeDictionary:
    """Dictionary whose prototypes are a random draw of distinct descriptors."""
    need = cfg.n_proto(arity) * cfg.multi_k
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if len(descriptors) < need:
        raise ValueError(f"need {need} descriptors to seed the arity-{arity} dictionary")
    pick = rng.choice(len(descriptors), size=need, replace=False)
    protos = descriptors[pick].reshape(cfg.n_proto(arity), cfg.multi_k, -1)
    return PrototypeDictionary(arity, protos, np.zeros(cfg.n_proto(arity)), cfg.tau_ce)


# ---------------------------------------------------------------------------
# K-Means and prototype assignment


def kmeans(points, k: int, seed: int, max_iters: int = 100, tol: float = 1e-8):
    """Lloyd's algorithm with k-means++ seeding, deterministic in seed.

    Empty clusters are re-seeded to the point farthest from its current
    centroid. Returns (assignments, centroids).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    closest = ((pts - centroids[0]) ** 2).sum(1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[i] = pts[idx]
        closest = np.minimum(closest, ((pts - centroids[i]) ** 2).sum(1))

    assign = np.zeros(n, dtype=int)
    for _ in range(max_iters):
        d2 = ((pts[:, None, :] - centroids[None]) ** 2).sum(-1)
        assign = d2.argmin(1)
        mind2 = d2[np.arange(n), assign]
        for c in range(k):
            if not (assign == c).any():
                far = int(mind2.argmax())
                assign[far] = c
                mind2[far] = 0.0
        new_centroids = np.stack([pts[assign == c].mean(0) for c in range(k)])
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < tol:
            break
    return assign, centroids


def assign_prototypes(centroids: np.ndarray, dictionary: PrototypeDictionary) -> np.ndarray:
    """Greedy injective matching of clusters to predicates by L1 distance.

    Repeatedly takes the globally smallest remaining entry of the
    centroid-prototype L1 distance matrix, masking matched rows and columns.
    Returns an array mapping cluster index -> predicate index.
    """
    centroids = np.atleast_2d(centroids)
    k = len(centroids)
    if k > dictionary.n_pred:
        raise ValueError(f"{k} clusters cannot map injectively to {dictionary.n_pred} predicates")
    # L1 distance to a predicate = distance to its nearest member prototype
    d1 = np.abs(centroids[:, None, None, :] - dictionary.prototypes[None]).sum(-1).min(-1)
    d1 = d1.astype(np.float64)
    mapping = np.full(k, -1, dtype=int)
    for _ in range(k):
        row, col = np.unravel_index(np.argmin(d1), d1.shape)
        mapping[row] = col
        d1[row, :] = np.inf
        d1[:, col] = np.inf
    return mapping


# ---------------------------------------------------------------------------
# The clustering step


def _bbox(mask: np.ndarray):
    rows, cols = np.nonzero(mask > 0.5)
    return rows.min(), rows.max(), cols.min(), cols.max()


def _bbox_gap(a, b) -> float:
    """Chebyshev gap between two bounding boxes (0 when they touch/overlap)."""
    (ar0, ar1, ac0, ac1), (br0, br1, bc0, bc1) = a, b
    dr = max(br0 - ar1, ar0 - br1, 0)
    dc = max(bc0 - ac1, ac0 - bc1, 0)
    return float(max(dr, dc))


def batch_descriptors(batch_parts, cfg: DictionaryConfig, rng: np.random.Generator):
    """(arity-1 descriptors, arity-2 descriptors) for a batch of samples.

    ``batch_parts`` is a list over samples of lists of part grids. Parts
    below the empty-mass threshold are dropped; pairs are subsampled at the
    configured rate and far-apart pairs (bounding-box gap beyond the
    configured limit) are discarded as degenerate.
    """
    mu1, mu2 = [], []
    for parts in batch_parts:
        valid = [p for p in parts if np.asarray(p).sum() >= cfg.empty_mass]
        if not valid:
            continue
        stack = np.stack([np.asarray(p, dtype=np.float64) for p in valid])
        mu, _, _, _ = embed_batch(stack, cfg.pool_size)
        mu1.extend(mu)
        if cfg.pair_sample_rate <= 0.0 or len(valid) < 2:
            continue
        far = cfg.far_pair_gap if cfg.far_pair_gap is not None else stack.shape[-2] / 2.0
        boxes = [_bbox(p) for p in valid]
        for i, j in combinations(range(len(valid)), 2):
            if rng.random() >= cfg.pair_sample_rate:
                continue
            if _bbox_gap(boxes[i], boxes[j]) > far:
                continue
            mu2.append(embed_pair(valid[i], valid[j], cfg.pool_size))
    d = cfg.pool_size**2
    as_arr = lambda v: np.stack(v) if v else np.empty((0, d))
    return as_arr(mu1), as_arr(mu2)


def ce_loss_and_grad(mu: np.ndarray, dictionary: PrototypeDictionary, labels: np.ndarray):
    """Cross-entropy on logits -||mu - phi||^2 / tau and its prototype gradient."""
    n = len(mu)
    d2, member = dictionary._sq_dists_members(mu)
    z = -d2 / dictionary.tau_ce
    z_shift = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z_shift).sum(axis=1))
    loss = float((log_norm - z_shift[np.arange(n), labels]).mean())
    softmax = np.exp(z_shift) / np.exp(z_shift).sum(axis=1, keepdims=True)
    dz = softmax.copy()
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    grad = np.zeros_like(dictionary.prototypes)
    for p in range(dictionary.n_pred):
        for m in range(dictionary.multi_k):
            sel = member[:, p] == m
            if not sel.any():
                continue
            diff = mu[sel] - dictionary.prototypes[p, m]  # dz/dphi = 2*diff/tau
            grad[p, m] = (dz[sel, p, None] * 2.0 * diff / dictionary.tau_ce).sum(0)
    return loss, grad


def clustering_step(
    batch_parts,
    banks: dict[int, MemoryBank],
    dicts: dict[int, PrototypeDictionary | None],
    cfg: DictionaryConfig,
    rng: np.random.Generator,
    warmup: bool = False,
):
    """One online-clustering update from a batch of decomposed parts.

    Embeds batch parts and sampled pairs, pushes them into the banks, runs
    K-Means per arity over the bank, matches centroids to prototypes, labels
    each batch descriptor with its cluster's prototype, applies one CE
    gradient step to the prototypes and refreshes assignment counts. During
    warm-up only the embedding and bank pushes happen.

    Returns (weighted clustering loss, dicts, banks); dictionary and bank
    state is updated in place.
    """
    mu_by_arity = dict(zip((1, 2), batch_descriptors(batch_parts, cfg, rng)))
    for arity, mu in mu_by_arity.items():
        if len(mu):
            banks[arity].push(mu)
    if warmup:
        return 0.0, dicts, banks

    total = 0.0
    for arity, mu in mu_by_arity.items():
        dd = dicts.get(arity)
        if dd is None or len(mu) == 0:
            continue
        pts = banks[arity].asarray()
        if len(pts) < dd.n_pred:
            continue
        _, centroids = kmeans(pts, dd.n_pred, seed=int(rng.integers(2**63)))
        proto_of_cluster = assign_prototypes(centroids, dd)
        cluster_of = ((mu[:, None, :] - centroids[None]) ** 2).sum(-1).argmin(1)
        labels = proto_of_cluster[cluster_of]
        loss, grad = ce_loss_and_grad(mu, dd, labels)
        if cfg.eta_proto > 0.0:
            dd.prototypes = dd.prototypes - cfg.eta_proto * grad
        dd.counts = dd.counts + np.bincount(labels, minlength=dd.n_pred)
        total += loss
    return cfg.gamma * total, dicts, banks


# ---------------------------------------------------------------------------
# Corpus likelihood


def _log_gauss_mixture(mu: np.ndarray, dictionary: PrototypeDictionary, tau_lik: float):
    """log sum_sigma pi_sigma N(mu; phi_sigma, tau^2 I), members uniform."""
    d = dictionary.d_mu
    diff = mu[:, None, None, :] - dictionary.prototypes[None]  # (n, P, K, d)
    log_n = -0.5 * d * np.log(2.0 * np.pi * tau_lik**2) - (diff**2).sum(-1) / (2.0 * tau_lik**2)
    log_members = _logsumexp(log_n - np.log(dictionary.multi_k), axis=2)  # (n, P)
    return _logsumexp(log_members + np.log(dictionary.pi)[None], axis=1)


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def log_likelihood(
    parts_per_sample, dicts: dict[int, PrototypeDictionary], cfg: DictionaryConfig
) -> float:
    """Corpus log-likelihood: unary terms plus all ordered distinct pairs."""
    total = 0.0
    for parts in parts_per_sample:
        valid = [np.asarray(p, dtype=np.float64) for p in parts]
        valid = [p for p in valid if p.sum() >= cfg.empty_mass]
        if not valid:
            continue
        mu1, _, _, _ = embed_batch(np.stack(valid), cfg.pool_size)
        total += float(_log_gauss_mixture(mu1, dicts[1], cfg.tau_lik).sum())
        if len(valid) >= 2 and dicts.get(2) is not None:
            mu2 = np.stack(
                [embed_pair(valid[i], valid[j], cfg.pool_size)
                 for i, j in combinations(range(len(valid)), 2)]
            )
            # unordered pairs computed once, ordered enumeration counts twice
            total += 2.0 * float(_log_gauss_mixture(mu2, dicts[2], cfg.tau_lik).sum())
    return total
