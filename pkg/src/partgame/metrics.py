"""Evaluation metrics for decompositions.

Contours are traced on the crack lattice (vertices are pixel corners, edges
run between foreground and background), so the enclosed area of a hole-free
8-connected region equals its pixel count exactly. The shape score multiplies
three factors in [0, 1]: continuity (largest segment's share of contoured
area), solidity (pixel count over contoured area, <1 when holes exist) and
smoothness (perimeter after simplification over the original perimeter).

Corpus-level clustering quality reduces flattened parts with PCA, clusters
with fixed-k K-Means and averages each part's distance to its nearest
centroid; the information gain normalizes that error against a random
decomposition of the same images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .core import Grid, iou
from .dictionary import kmeans
from .synthworld import RelationKind

# Heading -> (dr, dc) on the vertex lattice, plus the two pixels flanking the
# next edge: (ahead-left, ahead-right) offsets relative to the current vertex.
_STEP = {"E": (0, 1), "S": (1, 0), "W": (0, -1), "N": (-1, 0)}
_LEFT = {"E": "N", "N": "W", "W": "S", "S": "E"}
_RIGHT = {"E": "S", "S": "W", "W": "N", "N": "E"}
_AHEAD = {
    "E": ((-1, 0), (0, 0)),
    "S": ((0, 0), (0, -1)),
    "W": ((0, -1), (-1, -1)),
    "N": ((-1, -1), (-1, 0)),
}


def trace_outer_contour(mask) -> np.ndarray:
    """Closed outer boundary polygon of the foreground, on pixel corners.

    Follows the crack between foreground and background keeping the region
    on the right, which makes the shoelace area positive in (col, row)
    axes and exactly equal to the number of enclosed pixels for hole-free
    8-connected regions. First vertex equals the last.
    """
    m = np.asarray(mask).astype(bool)
    rows, cols = np.nonzero(m)
    if len(rows) == 0:
        raise ValueError("cannot trace an empty mask")
    start_idx = np.lexsort((cols, rows))[0]
    v0 = (int(rows[start_idx]), int(cols[start_idx]))
    h, w = m.shape

    def fg(r, c):
        return 0 <= r < h and 0 <= c < w and m[r, c]

    verts = [v0]
    v, d = v0, "E"
    while True:
        dr, dc = _STEP[d]
        v = (v[0] + dr, v[1] + dc)
        (lr, lc), (rr, rc) = _AHEAD[d]
        if fg(v[0] + lr, v[1] + lc):
            d = _LEFT[d]
        elif fg(v[0] + rr, v[1] + rc):
            pass
        else:
            d = _RIGHT[d]
        if v == v0 and d == "E":
            break
        verts.append(v)
    verts.append(v0)
    return np.asarray(verts, dtype=np.float64)


def shoelace_area(polygon) -> float:
    """Signed area with x=col, y=row; positive for outer contours."""
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 1], p[:, 0]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def polygon_perimeter(polygon) -> float:
    p = np.asarray(polygon, dtype=np.float64)
    return float(np.sqrt(((p[1:] - p[:-1]) ** 2).sum(axis=1)).sum())


def rdp_simplify(polyline, epsilon: float) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification keeping both endpoints.

    Returns a subsequence of the input whose maximum deviation from the
    original is at most epsilon. With epsilon 0 the input is returned
    unchanged (degenerate case).
    """
    pts = np.asarray(polyline, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("need at least two vertices")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _deviations(pts[lo : hi + 1])
        split = int(d.argmax())
        if d[split] >= epsilon:
            mid = lo + split
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return pts[keep]


def _deviations(segment_pts) -> np.ndarray:
    """Distance of interior points to the chord between the endpoints."""
    a, b = segment_pts[0], segment_pts[-1]
    inner = segment_pts[1:-1]
    chord = b - a
    norm2 = float(chord @ chord)
    if norm2 == 0.0:
        return np.sqrt(((inner - a) ** 2).sum(axis=1))
    t = np.clip((inner - a) @ chord / norm2, 0.0, 1.0)
    proj = a + t[:, None] * chord
    return np.sqrt(((inner - proj) ** 2).sum(axis=1))


def _rdp_closed(ring, epsilon: float) -> np.ndarray:
    """RDP on a closed ring (first == last): split at the farthest vertex."""
    pts = np.asarray(ring, dtype=np.float64)[:-1]
    far = int(((pts - pts[0]) ** 2).sum(axis=1).argmax())
    if far == 0:
        return np.asarray(ring, dtype=np.float64)
    first = rdp_simplify(pts[: far + 1], epsilon)
    second = rdp_simplify(np.vstack([pts[far:], pts[:1]]), epsilon)
    return np.vstack([first, second[1:]])


def convex_hull(points) -> np.ndarray:
    """Monotone-chain convex hull of 2-D points, closed (first == last)."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)  # sorts rows
    if len(pts) == 1:
        return np.vstack([pts, pts])

    def turn(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and turn(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1] + [lower[0]])


@dataclass
class ShapeScoreBreakdown:
    r_cont: float
    r_solid: float
    r_smooth: float
    score: float
    segment_count: int
    empty: bool = False


@dataclass
class ShapeScoreConfig:
    smoothing: str = "rdp"  # or "hull"
    rdp_epsilon: float = 1.0
    threshold: float = 0.5


def shape_score(part: Grid, cfg: ShapeScoreConfig | None = None) -> ShapeScoreBreakdown:
    """Continuity x solidity x smoothness of one binarized part."""
    cfg = cfg or ShapeScoreConfig()
    if cfg.smoothing not in ("rdp", "hull"):
        raise ValueError(f"unknown smoothing {cfg.smoothing!r}")
    mask = np.asarray(part) > cfg.threshold
    if not mask.any():
        return ShapeScoreBreakdown(0.0, 0.0, 0.0, 0.0, 0, empty=True)
    labels, n_seg = ndimage.label(mask, structure=np.ones((3, 3), bool))
    areas = []
    contours = []
    for lab in range(1, n_seg + 1):
        contour = trace_outer_contour(labels == lab)
        contours.append(contour)
        areas.append(shoelace_area(contour))
    areas = np.asarray(areas)
    r_cont = float(areas.max() / areas.sum())
    r_solid = float(min(1.0, mask.sum() / areas.sum()))
    ring = contours[int(areas.argmax())]
    rho_o = polygon_perimeter(ring)
    if cfg.smoothing == "rdp":
        smoothed = _rdp_closed(ring, cfg.rdp_epsilon)
    else:
        smoothed = convex_hull(ring)
    rho_s = polygon_perimeter(smoothed)
    r_smooth = float(np.clip(rho_s / rho_o, 0.0, 1.0))
    score = r_cont * r_solid * r_smooth
    return ShapeScoreBreakdown(r_cont, r_solid, r_smooth, score, n_seg)


# ---------------------------------------------------------------------------
# Corpus clustering metrics


@dataclass
class PCAReducer:
    mean: np.ndarray
    components: np.ndarray  # (d_out, d_in)

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(x, n_components: int) -> PCAReducer:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    d = min(n_components, *x.shape)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    return PCAReducer(mean, vt[:d])


def _flatten_parts(parts_by_sample, min_mass: float):
    groups = []
    for parts in parts_by_sample:
        vecs = [np.asarray(p, dtype=np.float64).ravel() for p in parts
                if np.asarray(p).sum() >= min_mass]
        groups.append(vecs)
    return groups


def mce(
    parts_by_sample,
    k: int,
    seed: int,
    d_pca: int = 32,
    reducer: PCAReducer | None = None,
    min_mass: float = 2.0,
) -> float:
    """Mean distance of decomposed parts to their nearest cluster centroid.

    Parts are flattened, PCA-reduced and clustered with fixed-k K-Means;
    per-sample means of the minimum centroid distance are averaged over
    samples. Near-empty parts are dropped.
    """
    groups = _flatten_parts(parts_by_sample, min_mass)
    pooled = [v for g in groups for v in g]
    if not pooled:
        raise ValueError("no non-empty parts in the corpus")
    if len(pooled) < k:
        raise ValueError(f"need at least k={k} parts, got {len(pooled)}")
    x = np.stack(pooled)
    if reducer is None:
        reducer = fit_pca(x, d_pca)
    z = reducer.transform(x)
    _, centroids = kmeans(z, k, seed=seed)
    d2 = ((z[:, None, :] - centroids[None]) ** 2).sum(-1)
    dist = np.sqrt(d2.min(axis=1))
    per_sample = []
    pos = 0
    for g in groups:
        if g:
            per_sample.append(dist[pos : pos + len(g)].mean())
            pos += len(g)
    return float(np.mean(per_sample))


def random_parts(image: Grid, n_players: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random decomposition baseline: per-pixel standard-normal masks times
    the input."""
    img = np.asarray(image, dtype=np.float64)
    return [expit(rng.standard_normal(img.shape)) * img for _ in range(n_players)]


def cig(
    model_parts_by_sample,
    inputs,
    k: int,
    seed: int,
    n_players: int = 4,
    d_pca: int = 32,
    min_mass: float = 2.0,
) -> float:
    """Clustering information gain of a decomposition over a random one.

    One PCA reducer is fit on the union of model and random-baseline parts,
    both sets are scored with `mce`, and the gain 1 - mce_model / mce_random
    is clamped into [0, 1].
    """
    rng = np.random.default_rng(seed)
    rand_by_sample = [random_parts(img, n_players, rng) for img in inputs]
    model_groups = _flatten_parts(model_parts_by_sample, min_mass)
    rand_groups = _flatten_parts(rand_by_sample, min_mass)
    pooled = [v for g in model_groups + rand_groups for v in g]
    reducer = fit_pca(np.stack(pooled), d_pca)
    mce_model = mce(model_parts_by_sample, k, seed, d_pca, reducer, min_mass)
    mce_rand = mce(rand_by_sample, k, seed, d_pca, reducer, min_mass)
    if mce_rand <= 0.0:
        return 0.0
    return float(np.clip(1.0 - mce_model / mce_rand, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Grounding metrics


def iou_align(pred: list[Grid], gt: list[Grid], threshold: float = 0.5):
    """Optimal one-to-one matching of predicted to reference parts.

    Maximizes total IoU with the Hungarian method. Returns (matching, mean
    IoU over reference parts); reference parts left unmatched (only possible
    when there are fewer predictions) count as zero.
    """
    if len(gt) == 0:
        raise ValueError("reference part list is empty")
    if len(pred) == 0:
        raise ValueError("prediction list is empty")
    table = np.zeros((len(gt), len(pred)))
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            table[i, j] = iou(g, p, threshold)
    rows, cols = linear_sum_assignment(table, maximize=True)
    matching = {int(r): int(c) for r, c in zip(rows, cols)}
    return matching, float(table[rows, cols].sum() / len(gt))


def relation_accuracy(pred_relations, gt_relations, matching) -> float:
    """Top-1 accuracy of predicted pairwise relations under a part matching.

    ``pred_relations`` maps unordered prediction-index pairs to a
    RelationKind (a list of (i, j, kind) is also accepted). Reference tuples
    whose parts are unmatched, or whose mapped pair carries no prediction,
    count as wrong. Vacuously 1.0 when there are no reference tuples.
    """
    if not isinstance(pred_relations, dict):
        pred_relations = {frozenset((i, j)): k for i, j, k in pred_relations}
    else:
        pred_relations = {frozenset(k): v for k, v in pred_relations.items()}
    if len(gt_relations) == 0:
        return 1.0
    correct = 0
    for i, j, kind in gt_relations:
        mi, mj = matching.get(i), matching.get(j)
        if mi is None or mj is None:
            continue
        pred = pred_relations.get(frozenset((mi, mj)))
        if pred is not None and RelationKind(pred) is RelationKind(kind):
            correct += 1
    return correct / len(gt_relations)
