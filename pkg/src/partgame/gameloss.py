"""Joint loss scoring a set of player masks against one target image.

Players are parameterized by unbounded logits; their masks are the sigmoid
activations. The loss combines four components:

* reconstruction: mean binary focal loss plus dice loss between the pixelwise
  sum of the masks and the target;
* overlap: hinge on reconstructed mass exceeding the target, either raw
  (``th_s`` unset) or through a soft occupancy step per player (``th_s`` set),
  which also catches players splitting the target into weak copies;
* resources: hinge keeping every player's mask mass at or above the quota,
  so no single player can own the whole input while others stay empty
  (``resources_hinge="flipped"`` inverts the hinge for ablation);
* norm: sum of squared pre-activation logits, shrinking the search space.

An optional sparsity term charges total mask mass. ``game_loss_grad`` is the
exact analytic gradient of the total with respect to the logits; hinge
subgradients at kinks are taken on the inactive side (zero).

All functions accept stacked players ``(n_players, H, W)`` and broadcast over
an optional leading batch axis ``(B, n_players, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import Grid, soft_step


@dataclass
class GameConfig:
    alpha_overlap: float = 0.2
    alpha_resources: float = 0.1
    alpha_norm: float = 1e-6
    lambda_sparse: float = 0.0
    quota: float = 8.0
    th_s: float | None = 0.2
    step_steepness: float = 10.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    prob_clamp: float = 1e-6
    resources_hinge: str = "as_written"  # or "flipped"

    def __post_init__(self):
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError(f"prob_clamp must lie in (0, 0.5), got {self.prob_clamp}")
        if self.resources_hinge not in ("as_written", "flipped"):
            raise ValueError(f"unknown resources_hinge {self.resources_hinge!r}")
        if self.th_s is not None and not 0.0 < self.th_s < 1.0:
            raise ValueError(f"th_s must lie in (0, 1), got {self.th_s}")
        for name in ("alpha_overlap", "alpha_resources", "alpha_norm", "lambda_sparse", "quota"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossBreakdown:
    """Unweighted component values; total applies the configured weights."""

    rec: float
    overlap: float
    resources: float
    norm: float
    sparse: float
    total: float

    def as_dict(self) -> dict:
        return {
            "rec": self.rec,
            "overlap": self.overlap,
            "resources": self.resources,
            "norm": self.norm,
            "sparse": self.sparse,
            "total": self.total,
        }


def _stack_players(parts) -> np.ndarray:
    if isinstance(parts, np.ndarray):
        arr = parts
    else:
        arr = np.stack([np.asarray(p, dtype=float) for p in parts], axis=-3)
    if arr.ndim < 3:
        raise ValueError(f"expected stacked players (..., n, H, W), got shape {arr.shape}")
    return arr


def _check_dims(players: np.ndarray, target: np.ndarray) -> None:
    if players.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"player/target shape mismatch: {players.shape} vs {target.shape}")


def reconstruction_loss(recon, target: Grid, cfg: GameConfig) -> float:
    """Mean binary focal loss plus dice loss of a reconstruction field."""
    recon = np.asarray(recon, dtype=float)
    target = np.asarray(target, dtype=float)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {target.shape}")
    return float(_rec_loss(recon[None], target[None], cfg)[0])


def _pow(base, exponent):
    # focal exponents are almost always small integers; avoid float pow
    if exponent == 0.0:
        return np.ones_like(base)
    if exponent == 1.0:
        return base
    if exponent == 2.0:
        return base * base
    return base**exponent


def _rec_loss(recon, y, cfg: GameConfig):
    c = cfg.prob_clamp
    p = np.clip(recon, c, 1.0 - c)
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    g, fa = cfg.focal_gamma, cfg.focal_alpha
    focal = -fa * y * _pow(1.0 - p, g) * log_p - (1.0 - fa) * (1.0 - y) * _pow(p, g) * log_1p
    focal = focal.mean(axis=(-2, -1))
    inter = (p * y).sum(axis=(-2, -1))
    mass_p = p.sum(axis=(-2, -1))
    mass_y = y.sum(axis=(-2, -1))
    s = cfg.dice_smooth
    dice = 1.0 - (2.0 * inter + s) / (mass_p + mass_y + s)
    return focal + dice


def overlap_penalty(parts, target: Grid, cfg: GameConfig) -> float:
    """Hinge on reconstructed mass exceeding the target, per pixel."""
    m = _stack_players(parts)
    y = np.asarray(target, dtype=float)
    _check_dims(m, y)
    if m.shape[-3] == 0:
        raise ValueError("no players")
    return float(_overlap(m, y, cfg))


def _overlap(m, y, cfg: GameConfig):
    if cfg.th_s is None:
        arg = m.sum(axis=-3) - y
    else:
        arg = soft_step(m, cfg.th_s, cfg.step_steepness).sum(axis=-3) - soft_step(
            y, cfg.th_s, cfg.step_steepness
        )
    return np.maximum(arg, 0.0).sum(axis=(-2, -1))


def resources_penalty(parts, q_r: float, hinge: str = "as_written") -> float:
    """Sum over players of the quota hinge on mask mass."""
    if q_r < 0:
        raise ValueError("quota must be nonnegative")
    m = _stack_players(parts)
    mass = m.sum(axis=(-2, -1))
    if hinge == "as_written":
        val = np.maximum(q_r - mass, 0.0)
    elif hinge == "flipped":
        val = np.maximum(mass - q_r, 0.0)
    else:
        raise ValueError(f"unknown hinge {hinge!r}")
    return float(val.sum(axis=-1))


def norm_penalty(logits) -> float:
    """Sum of squared pre-activation values across players."""
    if not isinstance(logits, np.ndarray) and len(logits) == 0:
        return 0.0
    arr = _stack_players(logits)
    return float((arr**2).sum())


def game_loss(logits, target: Grid, cfg: GameConfig) -> LossBreakdown:
    """Full loss of one player configuration; masks are sigmoid(logits)."""
    el = _stack_players(logits)
    y = np.asarray(target, dtype=float)
    _check_dims(el, y)
    comps = _loss_batch(el[None], y[None], cfg)
    return LossBreakdown(**{k: float(v[0]) for k, v in comps.items()})


def game_loss_grad(logits, target: Grid, cfg: GameConfig) -> np.ndarray:
    """Exact gradient of the total loss with respect to the logits."""
    el = _stack_players(logits)
    y = np.asarray(target, dtype=float)
    _check_dims(el, y)
    return _grad_batch(el[None], y[None], cfg)[0]


def _loss_batch(el, y, cfg: GameConfig) -> dict:
    """Loss components for batched logits (B, n, H, W) vs targets (B, H, W)."""
    m = expit(el)
    recon = m.sum(axis=-3)
    rec = _rec_loss(recon, y, cfg)
    overlap = _overlap(m, y, cfg)
    mass = m.sum(axis=(-2, -1))
    if cfg.resources_hinge == "as_written":
        resources = np.maximum(cfg.quota - mass, 0.0).sum(axis=-1)
    else:
        resources = np.maximum(mass - cfg.quota, 0.0).sum(axis=-1)
    norm = (el**2).sum(axis=(-3, -2, -1))
    sparse = mass.sum(axis=-1)
    total = (
        rec
        + cfg.alpha_overlap * overlap
        + cfg.alpha_resources * resources
        + cfg.alpha_norm * norm
        + cfg.lambda_sparse * sparse
    )
    return {
        "rec": rec,
        "overlap": overlap,
        "resources": resources,
        "norm": norm,
        "sparse": sparse,
        "total": total,
    }


def _grad_batch(el, y, cfg: GameConfig, extra_mask_grad=None) -> np.ndarray:
    """Gradient of the batched total w.r.t. logits.

    ``extra_mask_grad`` (same shape as the logits) is added to the
    mask-space gradient before chaining through the sigmoid; the decomposition
    loop uses it for the dictionary pull term.
    """
    m = expit(el)
    dm = m * (1.0 - m)
    recon = m.sum(axis=-3)
    c = cfg.prob_clamp
    p = np.clip(recon, c, 1.0 - c)
    inside = (recon > c) & (recon < 1.0 - c)
    g, fa = cfg.focal_gamma, cfg.focal_alpha
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    hw = p.shape[-2] * p.shape[-1]
    q = 1.0 - p
    dfocal = (
        -fa * y * (-g * _pow(q, g - 1.0) * log_p + _pow(q, g) / p)
        - (1.0 - fa) * (1.0 - y) * (g * _pow(p, g - 1.0) * log_1p - _pow(p, g) / q)
    ) / hw
    inter = (p * y).sum(axis=(-2, -1), keepdims=True)
    mass_p = p.sum(axis=(-2, -1), keepdims=True)
    mass_y = y.sum(axis=(-2, -1), keepdims=True)
    s = cfg.dice_smooth
    denom = mass_p + mass_y + s
    ddice = -(2.0 * y * denom - (2.0 * inter + s)) / denom**2
    drec = (dfocal + ddice) * inside  # clamp gate

    # mask-space gradient shared by all players, then per-player terms
    gmask = np.empty_like(m)
    gmask[:] = drec[..., None, :, :]
    if cfg.alpha_overlap > 0.0:
        if cfg.th_s is None:
            act = (recon - y) > 0.0
            gmask += cfg.alpha_overlap * act[..., None, :, :]
        else:
            kap = cfg.step_steepness
            sm = expit(kap * (m - cfg.th_s))
            arg = sm.sum(axis=-3) - soft_step(y, cfg.th_s, kap)
            sm -= sm * sm  # now the soft-step derivative / steepness
            sm *= (cfg.alpha_overlap * kap) * (arg > 0.0)[..., None, :, :]
            gmask += sm
    if cfg.alpha_resources > 0.0:
        mass = m.sum(axis=(-2, -1))
        if cfg.resources_hinge == "as_written":
            gmask += (-cfg.alpha_resources) * ((cfg.quota - mass) > 0.0)[..., None, None]
        else:
            gmask += cfg.alpha_resources * ((mass - cfg.quota) > 0.0)[..., None, None]
    if cfg.lambda_sparse > 0.0:
        gmask += cfg.lambda_sparse
    if extra_mask_grad is not None:
        gmask += extra_mask_grad
    gmask *= dm
    if cfg.alpha_norm > 0.0:
        gmask += (2.0 * cfg.alpha_norm) * el
    return gmask
