"""Grids, masks, and the pixel-level primitives every other module builds on.

A grid is a plain 2-D float ndarray with values in [0, 1]; images, part masks
and reconstructions all share this representation. A logit grid is the
unbounded pre-activation counterpart: ``activate`` (a sigmoid) maps it into a
grid. All functions here are pure.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

# Type aliases; invariants are enforced by validate_grid, not by the type.
Grid = np.ndarray
LogitGrid = np.ndarray


class GridError(ValueError):
    """Raised when an array violates the grid contract."""


def as_grid(values, dtype=np.float64) -> Grid:
    """Coerce to a validated 2-D float array with entries in [0, 1]."""
    g = np.asarray(values, dtype=dtype)
    validate_grid(g)
    return g


def validate_grid(g: Grid) -> None:
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise GridError(f"grid must be 2-D and non-empty, got shape {g.shape}")
    if not np.isfinite(g).all():
        raise GridError("grid contains non-finite values")
    if g.min() < 0.0 or g.max() > 1.0:
        raise GridError(f"grid values outside [0, 1]: min={g.min()}, max={g.max()}")


def activate(logits: LogitGrid) -> Grid:
    """Sigmoid activation mapping pre-activations into (0, 1)."""
    return expit(logits)


def binarize(g: Grid, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(g) > threshold


def iou(a: Grid, b: Grid, threshold: float = 0.5) -> float:
    """Intersection over union of two grids binarized at ``threshold``.

    Both-empty is defined as 1.0: an empty prediction aligned with an empty
    reference is a perfect match, not a failure.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise GridError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    am = a > threshold
    bm = b > threshold
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(am, bm).sum()
    return float(inter) / float(union)


def soft_step(v, th_s: float, steepness: float):
    """Smooth occupancy indicator: logistic(steepness * (v - th_s)).

    Returns ~1 well above the threshold, ~0 well below, exactly 0.5 at it.
    Monotone and differentiable, with derivative steepness * s * (1 - s).
    """
    if steepness <= 0:
        raise ValueError(f"steepness must be positive, got {steepness}")
    return expit(steepness * (np.asarray(v, dtype=float) - th_s))


def reconstruct(parts: list[Grid]) -> np.ndarray:
    """Pixelwise sum of parts. The result is returned unclamped and may
    exceed 1 where parts overlap."""
    if len(parts) == 0:
        raise ValueError("cannot reconstruct from an empty part list")
    first = np.asarray(parts[0])
    out = np.zeros_like(first, dtype=np.result_type(first.dtype, np.float64))
    for p in parts:
        p = np.asarray(p)
        if p.shape != first.shape:
            raise GridError(f"shape mismatch: {p.shape} vs {first.shape}")
        out += p
    return out


def write_pgm(path, grid: Grid) -> None:
    """Write a grid as binary 8-bit PGM (P5); 255 encodes intensity 1.0."""
    g = np.asarray(grid, dtype=np.float64)
    validate_grid(g)
    h, w = g.shape
    data = np.round(g * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> Grid:
    """Read a binary 8-bit PGM (P5) written by write_pgm (or compatible)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise GridError(f"{path}: not a binary PGM (P5) file")
    # Header = magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines; pixel data starts after the single
    # whitespace byte that terminates maxval.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise GridError(f"{path}: unsupported maxval {maxval} (only 255)")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).astype(np.float64) / 255.0
