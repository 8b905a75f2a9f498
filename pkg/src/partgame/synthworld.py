"""Procedural generator for line-based scenes with exact part masks.

Two families of samples are produced on a square canvas:

* line-world scenes: 1 to 3 non-overlapping multi-line shapes (L, T, E,
  Rectangle, H, C, A, F), each shape decomposing into its individual line
  masks;
* grounding samples: a single line pattern plus the relation tuples the
  sampling process guarantees (Parallel / VerticalMid / VerticalEdge /
  VerticalSepa between line pairs).

Lines are axis-aligned so rasterization is exact and perpendicular means
orthogonal axes. ``classify_relation`` is the geometric oracle: every
relation tuple a generator stores is re-checked against it before a scene
is returned.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .core import Grid, write_pgm, read_pgm


class PlacementError(RuntimeError):
    """Raised when rejection sampling cannot place the requested shapes."""


class RelationKind(Enum):
    PARALLEL = "Parallel"
    VERTICAL_MID = "VerticalMid"
    VERTICAL_EDGE = "VerticalEdge"
    VERTICAL_SEPA = "VerticalSepa"


@dataclass(frozen=True)
class LineSegment:
    """Axis-aligned thick line between two integer pixel coordinates."""

    start: tuple[int, int]  # (row, col)
    end: tuple[int, int]
    thickness: int = 1

    def __post_init__(self):
        if self.start[0] != self.end[0] and self.start[1] != self.end[1]:
            raise ValueError(f"line must be axis-aligned: {self.start} -> {self.end}")
        if self.thickness < 1:
            raise ValueError("thickness must be >= 1")

    @property
    def horizontal(self) -> bool:
        return self.start[0] == self.end[0]

    @property
    def length(self) -> int:
        (r0, c0), (r1, c1) = self.start, self.end
        return abs(r1 - r0) + abs(c1 - c0) + 1

    def raster(self, height: int, width: int) -> Grid:
        """Binary mask of the line; thickness extends on the +axis side."""
        mask = np.zeros((height, width), dtype=np.float64)
        (r0, c0), (r1, c1) = self.start, self.end
        t = self.thickness
        if self.horizontal:
            lo, hi = min(c0, c1), max(c0, c1)
            mask[r0 : r0 + t, lo : hi + 1] = 1.0
        else:
            lo, hi = min(r0, r1), max(r0, r1)
            mask[lo : hi + 1, c0 : c0 + t] = 1.0
        return mask

    def fits(self, height: int, width: int) -> bool:
        (r0, c0), (r1, c1) = self.start, self.end
        t = self.thickness
        if self.horizontal:
            return 0 <= r0 and r0 + t <= height and 0 <= min(c0, c1) and max(c0, c1) < width
        return 0 <= min(r0, r1) and max(r0, r1) < height and 0 <= c0 and c0 + t <= width


def _point_dist(p, q) -> float:
    return float(np.hypot(p[0] - q[0], p[1] - q[1]))


def _point_segment_dist(p, seg: LineSegment) -> float:
    """Euclidean distance from point p to the segment's centerline."""
    (r0, c0), (r1, c1) = seg.start, seg.end
    pr, pc = p
    dr, dc = r1 - r0, c1 - c0
    denom = dr * dr + dc * dc
    if denom == 0:
        return _point_dist(p, seg.start)
    t = ((pr - r0) * dr + (pc - c0) * dc) / denom
    t = min(1.0, max(0.0, t))
    return float(np.hypot(pr - (r0 + t * dr), pc - (c0 + t * dc)))


def classify_relation(a: LineSegment, b: LineSegment, tol: float) -> RelationKind:
    """Geometric relation between two axis-aligned lines.

    Same orientation is Parallel. Perpendicular pairs are VerticalEdge when
    some endpoint of one lies within ``tol`` of an endpoint of the other
    (endpoint contact takes precedence), VerticalMid when an endpoint of one
    lies within ``tol`` of the other's centerline, and VerticalSepa otherwise.
    """
    if a.start == a.end or b.start == b.end:
        raise ValueError("degenerate (single-pixel) segment has no orientation")
    if a.horizontal == b.horizontal:
        return RelationKind.PARALLEL
    ends_a = (a.start, a.end)
    ends_b = (b.start, b.end)
    if min(_point_dist(p, q) for p in ends_a for q in ends_b) <= tol:
        return RelationKind.VERTICAL_EDGE
    attach = min(
        min(_point_segment_dist(p, b) for p in ends_a),
        min(_point_segment_dist(q, a) for q in ends_b),
    )
    if attach <= tol:
        return RelationKind.VERTICAL_MID
    return RelationKind.VERTICAL_SEPA


@dataclass
class GenConfig:
    height: int = 32
    width: int = 32
    thickness: int = 1
    min_len: int = 5
    max_len: int = 12
    dilation: int = 1  # bounding-box dilation for inter-shape separation
    sepa_gap: int = 3  # minimum clearance for VerticalSepa / Parallel pairs
    max_attempts: int = 200

    @property
    def tol(self) -> float:
        return float(self.thickness)


LINEWORLD_KINDS = (
    "Lshape",
    "Tshape",
    "Eshape",
    "Rectangle",
    "Hshape",
    "Cshape",
    "Ashape",
    "Fshape",
)

LWG_PATTERNS = ("basic-4-relations", "F", "E", "A", "C", "H", "P", "Rect")

# Lines per shape kind; used by tests and by the generators themselves.
SHAPE_LINE_COUNT = {
    "Lshape": 2,
    "Tshape": 2,
    "Cshape": 3,
    "Fshape": 3,
    "Hshape": 3,
    "Ashape": 4,
    "Eshape": 4,
    "Rectangle": 4,
}


@dataclass
class Scene:
    image: Grid
    parts: list[Grid]
    shape_kinds: list[str]  # one tag per part
    relations: list[tuple[int, int, RelationKind]]
    seed: int

    def validate(self, binarize_threshold: float = 0.5) -> None:
        union = np.zeros_like(self.image)
        for p in self.parts:
            if p.sum() == 0:
                raise ValueError("scene contains an empty part")
            union = np.maximum(union, p)
        if not np.array_equal(union > binarize_threshold, self.image > binarize_threshold):
            raise ValueError("parts do not cover the image exactly")
        n = len(self.parts)
        for i, j, _ in self.relations:
            if not (0 <= i < n and 0 <= j < n and i != j):
                raise ValueError(f"relation indices out of range: ({i}, {j})")


# ---------------------------------------------------------------------------
# Pattern construction


class _Builder:
    """Places one line pattern on the canvas with collision checks."""

    LOCAL_TRIES = 60

    def __init__(self, rng: np.random.Generator, cfg: GenConfig):
        self.rng = rng
        self.cfg = cfg
        self.lines: list[LineSegment] = []
        self.occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
        self._relations: list[tuple[int, int, RelationKind]] = []

    # -- sampling helpers

    def _rand_length(self) -> int:
        return int(self.rng.integers(self.cfg.min_len, self.cfg.max_len + 1))

    def _sample_free_line(self, orientation: str | None = None) -> LineSegment:
        cfg = self.cfg
        for _ in range(self.LOCAL_TRIES):
            ori = orientation or ("h" if self.rng.random() < 0.5 else "v")
            length = self._rand_length()
            if ori == "h":
                if cfg.width < length or cfg.height < cfg.thickness:
                    continue
                r = int(self.rng.integers(0, cfg.height - cfg.thickness + 1))
                c = int(self.rng.integers(0, cfg.width - length + 1))
                seg = LineSegment((r, c), (r, c + length - 1), cfg.thickness)
            else:
                if cfg.height < length or cfg.width < cfg.thickness:
                    continue
                r = int(self.rng.integers(0, cfg.height - length + 1))
                c = int(self.rng.integers(0, cfg.width - cfg.thickness + 1))
                seg = LineSegment((r, c), (r + length - 1, c), cfg.thickness)
            if self._clear(seg, allowed_at=None):
                return seg
        raise PlacementError("could not place a free line")

    def _perp_candidates(self, base: LineSegment, anchor: tuple[int, int], length: int):
        """Perpendicular segments of given length with one endpoint at anchor."""
        r, c = anchor
        if base.horizontal:
            return [
                LineSegment((r - length + 1, c), (r, c), self.cfg.thickness),
                LineSegment((r, c), (r + length - 1, c), self.cfg.thickness),
            ]
        return [
            LineSegment((r, c - length + 1), (r, c), self.cfg.thickness),
            LineSegment((r, c), (r, c + length - 1), self.cfg.thickness),
        ]

    def _clear(self, seg: LineSegment, allowed_at) -> bool:
        """True when seg fits the canvas and only touches existing lines
        inside small windows around the allowed attachment points."""
        cfg = self.cfg
        if not seg.fits(cfg.height, cfg.width):
            return False
        raster = seg.raster(cfg.height, cfg.width).astype(bool)
        if allowed_at is None:
            # detached line: keep one pixel of clearance everywhere
            grown = ndimage.binary_dilation(self.occupied, np.ones((3, 3), bool))
            return not (raster & grown).any()
        allowed = np.zeros_like(raster)
        t = cfg.thickness
        for (ar, ac) in allowed_at:
            allowed[max(0, ar - t) : ar + t + 1, max(0, ac - t) : ac + t + 1] = True
        return not (raster & self.occupied & ~allowed).any()

    def _add(self, seg: LineSegment) -> None:
        self.lines.append(seg)
        self.occupied |= seg.raster(self.cfg.height, self.cfg.width).astype(bool)

    def _attach_edge(self, base: LineSegment, at: tuple[int, int] | None = None) -> LineSegment:
        """Perpendicular line with one endpoint on an endpoint of base."""
        for _ in range(self.LOCAL_TRIES):
            anchor = at if at is not None else (base.start if self.rng.random() < 0.5 else base.end)
            length = self._rand_length()
            cands = self._perp_candidates(base, anchor, length)
            self.rng.shuffle(cands)
            for seg in cands:
                if self._clear(seg, allowed_at=[anchor]):
                    return seg
        raise PlacementError("could not attach an edge line")

    def _attach_mid(self, base: LineSegment) -> LineSegment:
        """Perpendicular line with one endpoint on the interior of base."""
        cfg = self.cfg
        gap = int(np.ceil(cfg.tol)) + 1  # interior: beyond endpoint tolerance
        (r0, c0), (r1, c1) = base.start, base.end
        for _ in range(self.LOCAL_TRIES):
            if base.horizontal:
                lo, hi = min(c0, c1) + gap, max(c0, c1) - gap
                if lo > hi:
                    raise PlacementError("base line too short for a mid attachment")
                anchor = (r0, int(self.rng.integers(lo, hi + 1)))
            else:
                lo, hi = min(r0, r1) + gap, max(r0, r1) - gap
                if lo > hi:
                    raise PlacementError("base line too short for a mid attachment")
                anchor = (int(self.rng.integers(lo, hi + 1)), c0)
            length = self._rand_length()
            cands = self._perp_candidates(base, anchor, length)
            self.rng.shuffle(cands)
            for seg in cands:
                if self._clear(seg, allowed_at=[anchor]):
                    return seg
        raise PlacementError("could not attach a mid line")

    def _attach_parallel(self, base: LineSegment) -> LineSegment:
        cfg = self.cfg
        for _ in range(self.LOCAL_TRIES):
            length = self._rand_length()
            offset = int(self.rng.integers(cfg.thickness + 1, cfg.thickness + 10)) * (
                1 if self.rng.random() < 0.5 else -1
            )
            if base.horizontal:
                r = base.start[0] + offset
                c = int(self.rng.integers(0, max(1, cfg.width - length + 1)))
                seg = LineSegment((r, c), (r, c + length - 1), cfg.thickness)
            else:
                c = base.start[1] + offset
                r = int(self.rng.integers(0, max(1, cfg.height - length + 1)))
                seg = LineSegment((r, c), (r + length - 1, c), cfg.thickness)
            if self._clear(seg, allowed_at=None):
                return seg
        raise PlacementError("could not place a parallel line")

    def _attach_sepa(self, base: LineSegment) -> LineSegment:
        """Perpendicular but detached line (clearance > tolerance)."""
        cfg = self.cfg
        for _ in range(self.LOCAL_TRIES):
            ori = "v" if base.horizontal else "h"
            seg = self._sample_free_line(orientation=ori)
            ends_s = (seg.start, seg.end)
            ends_b = (base.start, base.end)
            attach = min(
                min(_point_segment_dist(p, base) for p in ends_s),
                min(_point_segment_dist(q, seg) for q in ends_b),
            )
            if attach >= cfg.sepa_gap:
                return seg
        raise PlacementError("could not place a separated line")

    # -- patterns

    def free_end(self, line_idx: int) -> tuple[int, int]:
        """Endpoint of lines[line_idx] not touching any other placed line."""
        seg = self.lines[line_idx]
        others = [s for k, s in enumerate(self.lines) if k != line_idx]
        for p in (seg.start, seg.end):
            if all(_point_segment_dist(p, o) > self.cfg.tol for o in others):
                return p
        raise PlacementError("line has no free endpoint")

    def build(self, pattern: str) -> list[tuple[int, int, RelationKind]]:
        rng = self.rng
        R = RelationKind
        if pattern == "basic-4-relations":
            kind = list(R)[rng.integers(0, 4)]
            base = self._sample_free_line()
            self._add(base)
            if kind is R.PARALLEL:
                self._add(self._attach_parallel(base))
            elif kind is R.VERTICAL_MID:
                self._add(self._attach_mid(base))
            elif kind is R.VERTICAL_EDGE:
                self._add(self._attach_edge(base))
            else:
                self._add(self._attach_sepa(base))
            return [(0, 1, kind)]

        if pattern in ("F", "E", "A", "P"):
            base = self._sample_free_line()
            self._add(base)
            self._add(self._attach_mid(base))
            edge_end = base.start if rng.random() < 0.5 else base.end
            self._add(self._attach_edge(base, at=edge_end))
            rels = [(0, 1, R.VERTICAL_MID), (0, 2, R.VERTICAL_EDGE)]
            if pattern == "E":
                other = base.end if edge_end == base.start else base.start
                self._add(self._attach_edge(base, at=other))
                rels.append((0, 3, R.VERTICAL_EDGE))
            elif pattern == "A":
                self._add(self._attach_parallel(base))
                rels.append((0, 3, R.PARALLEL))
            elif pattern == "P":
                self._add(self._attach_edge(self.lines[1], at=self.free_end(1)))
                rels.append((1, 3, R.VERTICAL_EDGE))
            return rels

        if pattern == "C":
            base = self._sample_free_line()
            self._add(base)
            self._add(self._attach_edge(base, at=base.start))
            self._add(self._attach_edge(base, at=base.end))
            return [(0, 1, R.VERTICAL_EDGE), (0, 2, R.VERTICAL_EDGE)]

        if pattern == "H":
            base = self._sample_free_line()
            self._add(base)
            self._add(self._attach_mid(base))
            self._add(self._attach_parallel(base))
            return [(0, 1, R.VERTICAL_MID), (0, 2, R.PARALLEL)]

        if pattern == "Rect":
            return self._build_rect()

        raise ValueError(f"unknown pattern {pattern!r}")

    def _build_rect(self) -> list[tuple[int, int, RelationKind]]:
        cfg = self.cfg
        R = RelationKind
        for _ in range(self.LOCAL_TRIES):
            self.lines.clear()
            self.occupied[:] = False
            try:
                base = self._sample_free_line()
            except PlacementError:
                continue
            side = self._rand_length()
            direction = 1 if self.rng.random() < 0.5 else -1
            if base.horizontal:
                r, (ca, cb) = base.start[0], (base.start[1], base.end[1])
                far = r + direction * (side - 1)
                l1 = LineSegment((r, ca), (far, ca), cfg.thickness)
                l2 = LineSegment((r, cb), (far, cb), cfg.thickness)
                l3 = LineSegment((far, ca), (far, cb), cfg.thickness)
            else:
                c, (ra, rb) = base.start[1], (base.start[0], base.end[0])
                far = c + direction * (side - 1)
                l1 = LineSegment((ra, c), (ra, far), cfg.thickness)
                l2 = LineSegment((rb, c), (rb, far), cfg.thickness)
                l3 = LineSegment((ra, far), (rb, far), cfg.thickness)
            self._add(base)
            if not self._clear(l1, allowed_at=[l1.start]):
                continue
            self._add(l1)
            if not self._clear(l2, allowed_at=[l2.start]):
                continue
            self._add(l2)
            if not self._clear(l3, allowed_at=[l3.start, l3.end]):
                continue
            self._add(l3)
            return [
                (0, 1, R.VERTICAL_EDGE),
                (0, 2, R.VERTICAL_EDGE),
                (1, 3, R.VERTICAL_EDGE),
            ]
        raise PlacementError("could not close a rectangle")


_KIND_TO_PATTERN = {
    "Fshape": "F",
    "Eshape": "E",
    "Ashape": "A",
    "Cshape": "C",
    "Hshape": "H",
    "Rectangle": "Rect",
}


def _build_shape(kind: str, rng: np.random.Generator, cfg: GenConfig) -> _Builder:
    b = _Builder(rng, cfg)
    R = RelationKind
    if kind == "Lshape":
        base = b._sample_free_line()
        b._add(base)
        b._add(b._attach_edge(base))
        b._relations = [(0, 1, R.VERTICAL_EDGE)]
    elif kind == "Tshape":
        base = b._sample_free_line()
        b._add(base)
        b._add(b._attach_mid(base))
        b._relations = [(0, 1, R.VERTICAL_MID)]
    elif kind in _KIND_TO_PATTERN:
        b._relations = b.build(_KIND_TO_PATTERN[kind])
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return b


def _verify_relations(lines, relations, tol) -> bool:
    return all(classify_relation(lines[i], lines[j], tol) is k for i, j, k in relations)


def gen_lineworld(seed: int, config: GenConfig | None = None) -> Scene:
    """Scene with 1 to 3 non-overlapping shapes, deterministic in seed."""
    cfg = config or GenConfig()
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, 4))
    for _ in range(cfg.max_attempts):
        builders: list[_Builder] = []
        kinds: list[str] = []
        boxes: list[tuple[int, int, int, int]] = []
        ok = True
        for _ in range(n_shapes):
            placed = False
            for _ in range(50):
                kind = LINEWORLD_KINDS[rng.integers(0, len(LINEWORLD_KINDS))]
                try:
                    b = _build_shape(kind, rng, cfg)
                except PlacementError:
                    continue
                if not _verify_relations(b.lines, b._relations, cfg.tol):
                    continue
                rows, cols = np.nonzero(b.occupied)
                d = cfg.dilation
                box = (rows.min() - d, rows.max() + d, cols.min() - d, cols.max() + d)
                if any(
                    box[0] <= o[1] and o[0] <= box[1] and box[2] <= o[3] and o[2] <= box[3]
                    for o in boxes
                ):
                    continue
                builders.append(b)
                kinds.append(kind)
                boxes.append(box)
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return _assemble_scene(builders, kinds, cfg, seed)
    raise PlacementError(
        f"failed to place {n_shapes} shapes on a {cfg.height}x{cfg.width} canvas"
    )


def _assemble_scene(builders, kinds, cfg: GenConfig, seed: int) -> Scene:
    parts: list[Grid] = []
    shape_kinds: list[str] = []
    relations: list[tuple[int, int, RelationKind]] = []
    for b, kind in zip(builders, kinds):
        offset = len(parts)
        for seg in b.lines:
            parts.append(seg.raster(cfg.height, cfg.width))
            shape_kinds.append(kind)
        relations.extend((i + offset, j + offset, k) for i, j, k in b._relations)
    image = np.zeros((cfg.height, cfg.width), dtype=np.float64)
    for p in parts:
        image = np.maximum(image, p)
    scene = Scene(image, parts, shape_kinds, relations, seed)
    scene.validate()
    return scene


def gen_lwg(seed: int, pattern: str, config: GenConfig | None = None) -> Scene:
    """Single-pattern grounding sample with verified relation tuples."""
    cfg = config or GenConfig()
    if pattern not in LWG_PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {LWG_PATTERNS}")
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_attempts):
        b = _Builder(rng, cfg)
        try:
            rels = b.build(pattern)
        except PlacementError:
            continue
        if not _verify_relations(b.lines, rels, cfg.tol):
            continue
        b._relations = rels
        return _assemble_scene([b], [pattern], cfg, seed)
    raise PlacementError(f"failed to place pattern {pattern!r}")


def gen_lwg_mixed(seed: int, config: GenConfig | None = None) -> Scene:
    """Grounding sample whose pattern is itself drawn from the seed."""
    pick = np.random.default_rng(seed).integers(0, len(LWG_PATTERNS))
    return gen_lwg(seed, LWG_PATTERNS[pick], config)


# ---------------------------------------------------------------------------
# Dataset serialization: images/<id>.pgm + annotations/<id>.json.


def rle_encode(mask: Grid, threshold: float = 0.5) -> list[int]:
    """Row-major alternating run lengths, starting with background."""
    flat = (np.asarray(mask).ravel() > threshold).astype(np.int8)
    n = flat.size
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [n]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], height: int, width: int) -> Grid:
    flat = np.zeros(height * width, dtype=np.float64)
    pos = 0
    value = 0.0
    for run in runs:
        if value == 1.0:
            flat[pos : pos + run] = 1.0
        pos += run
        value = 1.0 - value
    if pos != height * width:
        raise ValueError(f"run lengths sum to {pos}, expected {height * width}")
    return flat.reshape(height, width)


def scene_annotation(scene: Scene, sample_id: str) -> dict:
    h, w = scene.image.shape
    return {
        "id": sample_id,
        "seed": int(scene.seed),
        "size": [int(h), int(w)],
        "shape_kinds": list(scene.shape_kinds),
        "parts": [rle_encode(p) for p in scene.parts],
        "relations": [[int(i), int(j), k.value] for i, j, k in scene.relations],
    }


def write_dataset(out_dir, scenes: list[Scene], ids: list[str] | None = None) -> list[str]:
    img_dir = os.path.join(out_dir, "images")
    ann_dir = os.path.join(out_dir, "annotations")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(ann_dir, exist_ok=True)
    if ids is None:
        ids = [f"{i:06d}" for i in range(len(scenes))]
    for sample_id, scene in zip(ids, scenes):
        write_pgm(os.path.join(img_dir, f"{sample_id}.pgm"), scene.image)
        with open(os.path.join(ann_dir, f"{sample_id}.json"), "w") as f:
            json.dump(scene_annotation(scene, sample_id), f)
    return ids


def load_dataset(data_dir) -> list[tuple[str, Scene]]:
    ann_dir = os.path.join(data_dir, "annotations")
    img_dir = os.path.join(data_dir, "images")
    if not os.path.isdir(ann_dir) or not os.path.isdir(img_dir):
        raise FileNotFoundError(f"{data_dir} is not a dataset directory")
    out = []
    for name in sorted(os.listdir(ann_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(ann_dir, name)) as f:
            ann = json.load(f)
        h, w = ann["size"]
        image = read_pgm(os.path.join(img_dir, f"{ann['id']}.pgm"))
        parts = [rle_decode(r, h, w) for r in ann["parts"]]
        relations = [(i, j, RelationKind(k)) for i, j, k in ann["relations"]]
        scene = Scene(image, parts, ann["shape_kinds"], relations, ann["seed"])
        out.append((ann["id"], scene))
    return out
