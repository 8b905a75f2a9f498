"""The decomposition game: players refine masks by annealed Langevin descent.

Each of ``n_players`` players owns a logit grid; its mask is the sigmoid.
Every inner step moves all players simultaneously (a synchronous round)
down the exact gradient of the joint game loss plus Gaussian exploration
noise whose scale anneals geometrically over the outer steps:

    logits <- logits - step_size * grad + sqrt(2 * step_size) * sigma * z

Players interact only through the shared reconstruction inside the loss, so
the update is equivariant under player permutation. When a prototype
dictionary is supplied, an extra pull term draws each non-empty mask's
descriptor toward its nearest prototype; the descriptor's centering shift is
held constant within a step so the pull gradient flows through the linear
pooling path only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .core import Grid, LogitGrid
from .dictionary import PrototypeDictionary, embed_batch
from .gameloss import GameConfig, LossBreakdown, _grad_batch, _loss_batch


class DecompositionError(RuntimeError):
    """Raised when the game dynamics produce non-finite values."""


@dataclass
class DecomposeConfig:
    n_players: int = 4
    outer_steps: int = 6  # annealing levels
    inner_steps: int = 60  # Langevin steps per level
    step_size: float = 2.0
    sigma_max: float = 1.0
    sigma_min: float = 0.01
    proto_pull: float = 0.0  # weight of the dictionary pull term
    init_mean: float | None = None  # None: logit(0.5 / n_players)
    init_std: float = 0.5
    empty_mass: float = 2.0  # masks below this skip the pull term
    pool_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_players < 1 or self.outer_steps < 1 or self.inner_steps < 1:
            raise ValueError("n_players, outer_steps and inner_steps must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.sigma_min > self.sigma_max:
            raise ValueError("sigma_min must not exceed sigma_max")


@dataclass
class Decomposition:
    parts: list[Grid]
    source: str
    loss: LossBreakdown
    steps_run: int


def noise_schedule(cfg: DecomposeConfig) -> np.ndarray:
    """Geometric noise levels from sigma_max down to sigma_min.

    A zero sigma_max means noise-free descent at every level.
    """
    if cfg.sigma_max == 0.0:
        return np.zeros(cfg.outer_steps)
    if cfg.sigma_min <= 0.0:
        raise ValueError("sigma_min must be positive when sigma_max is")
    return np.geomspace(cfg.sigma_max, cfg.sigma_min, cfg.outer_steps)


def _pull_extra_grad(el, pull, dictionary, empty_mass, pool_size):
    """Mask-space gradient of pull * sum_i min_sigma ||mu_i - phi_sigma||^2."""
    masks = expit(el)
    b, n, h, w = masks.shape
    flat = masks.reshape(b * n, h, w)
    mass = flat.sum(axis=(-2, -1))
    valid = mass >= empty_mass
    extra = np.zeros_like(flat)
    if valid.any():
        mu, vnorm, ar, ac = embed_batch(flat[valid], pool_size)
        protos = dictionary.prototypes.reshape(-1, dictionary.d_mu)
        d2 = ((mu[:, None, :] - protos[None]) ** 2).sum(-1)
        phi = protos[d2.argmin(1)]
        g_mu = 2.0 * (mu - phi)
        # through L2 normalization: project out the radial component
        g_v = (g_mu - mu * (mu * g_mu).sum(1, keepdims=True)) / vnorm[:, None]
        gv = g_v.reshape(-1, pool_size, pool_size)
        extra[valid] = np.matmul(ar.transpose(0, 2, 1), np.matmul(gv, ac))
    return pull * extra.reshape(b, n, h, w)


def _step_batch(el, y, game: GameConfig, noise, step_size, rngs, dictionary, pull,
                empty_mass, pool_size):
    extra = None
    if dictionary is not None and pull > 0.0:
        extra = _pull_extra_grad(el, pull, dictionary, empty_mass, pool_size)
    grad = _grad_batch(el, y, game, extra_mask_grad=extra)
    if not np.isfinite(grad).all():
        bad = np.where(~np.isfinite(grad).reshape(grad.shape[0], -1).all(axis=1))[0]
        raise DecompositionError(
            f"non-finite game-loss gradient for batch item(s) {bad.tolist()}; "
            "check loss coefficients and step size"
        )
    out = el - step_size * grad
    if noise > 0.0:
        scale = np.sqrt(2.0 * step_size) * noise
        for i, rng in enumerate(rngs):
            out[i] += scale * rng.standard_normal(el.shape[1:])
    return out


def langevin_step(
    logits: LogitGrid,
    target: Grid,
    game: GameConfig,
    noise: float,
    step_size: float,
    rng: np.random.Generator,
    dictionary: PrototypeDictionary | None = None,
    pull: float = 0.0,
    empty_mass: float = 2.0,
    pool_size: int = 8,
) -> np.ndarray:
    """One synchronous noisy descent round for stacked players (n, H, W)."""
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    el = np.asarray(logits, dtype=float)
    y = np.asarray(target, dtype=float)
    out = _step_batch(
        el[None], y[None], game, noise, step_size, [rng], dictionary, pull,
        empty_mass, pool_size,
    )
    return out[0]


def decompose_batch(
    targets,
    game: GameConfig,
    cfg: DecomposeConfig,
    dictionary: PrototypeDictionary | None = None,
    seeds=None,
    sources=None,
    dtype=np.float64,
) -> list[Decomposition]:
    """Decompose several targets in lockstep.

    Each sample carries its own generator stream, so results are identical
    to running ``decompose`` per sample and independent of batch grouping.
    """
    y = np.stack([np.asarray(t, dtype=dtype) for t in targets])
    b = y.shape[0]
    if seeds is None:
        seeds = [cfg.seed] * b
    if sources is None:
        sources = [""] * b
    rngs = [np.random.default_rng(s) for s in seeds]
    # start with the reconstruction near half coverage regardless of player count
    mean = cfg.init_mean
    if mean is None:
        mean = float(np.log(0.5 / cfg.n_players) - np.log1p(-0.5 / cfg.n_players))
    el = np.stack(
        [r.normal(mean, cfg.init_std, (cfg.n_players, *y.shape[1:])) for r in rngs]
    )
    el = el.astype(dtype)
    for sigma in noise_schedule(cfg):
        for _ in range(cfg.inner_steps):
            el = _step_batch(
                el, y, game, sigma, cfg.step_size, rngs, dictionary,
                cfg.proto_pull, cfg.empty_mass, cfg.pool_size,
            )
    comps = _loss_batch(el.astype(np.float64), y.astype(np.float64), game)
    steps = cfg.outer_steps * cfg.inner_steps
    out = []
    for i in range(b):
        loss = LossBreakdown(**{k: float(v[i]) for k, v in comps.items()})
        parts = list(expit(el[i]).astype(np.float64))
        out.append(Decomposition(parts, sources[i], loss, steps))
    return out


def decompose(
    target: Grid,
    game: GameConfig,
    cfg: DecomposeConfig,
    dictionary: PrototypeDictionary | None = None,
    source: str = "",
) -> Decomposition:
    """Run the full annealed game on one target."""
    return decompose_batch([target], game, cfg, dictionary, [cfg.seed], [source])[0]


def predicate_embedding(part: Grid, dictionary: PrototypeDictionary,
                        pool_size: int = 8) -> np.ndarray:
    """Probability-weighted sum of prototypes for one part.

    Weights are the softmax of negative squared descriptor distances at the
    dictionary's temperature; each predicate is represented by its member
    prototype nearest to the part.
    """
    mu, _, _, _ = embed_batch(np.asarray(part, dtype=np.float64)[None], pool_size)
    d2, member = dictionary._sq_dists_members(mu)
    z = -d2[0] / dictionary.tau_ce
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    reps = dictionary.prototypes[np.arange(dictionary.n_pred), member[0]]
    return p @ reps
