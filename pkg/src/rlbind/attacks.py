"""l-inf bounded white-box attacks: sign-gradient PGD and Auto-PGD.

``loss_fn`` maps a batch ``z`` of shape (B, n) to per-sample losses of shape
(B,), or a single vector (n,) to a scalar.  Samples never interact, so the
gradient of the summed loss gives each sample its own ascent direction and
each sample keeps its own step size and best iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from . import gradcore as gc

MODES = ("pgd", "apgd")

LossFn = Callable[[gc.Tensor], gc.Tensor]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float | Fraction = Fraction(4, 255)
    n_iter: int = 10
    mode: str = "apgd"
    lower: float = 0.0
    upper: float = 1.0
    seed: int = 0
    random_start: bool = False
    restarts: int = 1
    pgd_step: float = 0.25  # PGD step as a fraction of epsilon
    apgd_initial_step: float = 2.0  # APGD initial step as a multiple of epsilon
    momentum: float = 0.75
    rho: float = 0.75
    first_checkpoint: float = 0.22
    checkpoint_decrement: float = 0.03
    min_checkpoint: float = 0.06

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")
        if self.mode not in MODES:
            raise ValueError(f"unknown attack {self.mode!r}; accepted: {', '.join(MODES)}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def eps(self) -> float:
        return float(self.epsilon)

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def project_linf(z, x, epsilon, lower: float = 0.0, upper: float = 1.0) -> np.ndarray:
    """Clamp to the epsilon-ball around ``x``, then to [lower, upper]; idempotent."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.shape != x.shape:
        raise gc.ShapeError(f"project_linf: shapes {z.shape} and {x.shape} differ")
    eps = float(epsilon)
    return np.clip(np.clip(z, x - eps, x + eps), lower, upper)


class _Objective:
    """Evaluates per-sample losses and input gradients for a batch of points."""

    def __init__(self, loss_fn: LossFn, single: bool):
        self.loss_fn = loss_fn
        self.single = single
        self.calls = 0

    def __call__(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.calls += 1
        zt = gc.Tensor(z[0] if self.single else z, requires_grad=True)
        loss = self.loss_fn(zt)
        expected = () if self.single else (z.shape[0],)
        if loss.shape != expected:
            raise gc.ShapeError(f"attack loss_fn returned shape {loss.shape}, expected {expected}")
        values = np.atleast_1d(loss.data).astype(np.float64).copy()
        (g,) = gc.grad(gc.sum_(loss) if loss.ndim else loss, [zt])
        if not np.all(np.isfinite(g)):
            raise gc.NonFiniteError("attack: non-finite input gradient")
        return values, g.reshape(z.shape)


def _start_points(x: np.ndarray, cfg: AttackConfig, restart: int, sample_ids) -> np.ndarray:
    if not cfg.random_start:
        return x.copy()
    noise = np.empty_like(x)
    for row, sid in enumerate(sample_ids):
        rng = np.random.default_rng([cfg.seed, int(sid), restart])
        noise[row] = rng.uniform(-1.0, 1.0, size=x.shape[1])
    return project_linf(x + cfg.eps * noise, x, cfg.eps, cfg.lower, cfg.upper)


def _pgd_run(obj: _Objective, x, start, cfg: AttackConfig):
    eps = cfg.eps
    step = cfg.pgd_step * eps
    z = start
    loss, g = obj(z)
    best_z, best_loss = z.copy(), loss.copy()
    for _ in range(cfg.n_iter):
        z = project_linf(z + step * np.sign(g), x, eps, cfg.lower, cfg.upper)
        loss, g = obj(z)
        better = loss > best_loss
        best_z[better] = z[better]
        best_loss[better] = loss[better]
    return best_z, best_loss


def _apgd_checkpoint_lengths(cfg: AttackConfig):
    n = cfg.n_iter
    first = max(int(cfg.first_checkpoint * n), 1)
    decr = max(int(cfg.checkpoint_decrement * n), 1)
    floor = max(int(cfg.min_checkpoint * n), 1)
    return first, decr, floor


def _apgd_run(obj: _Objective, x, start, cfg: AttackConfig):
    eps = cfg.eps
    b = x.shape[0]
    step = np.full((b, 1), cfg.apgd_initial_step * eps)
    k, decr, floor = _apgd_checkpoint_lengths(cfg)

    z = start
    loss, g = obj(z)
    history = np.zeros((cfg.n_iter + 1, b))
    history[0] = loss
    best_z, best_loss, best_g = z.copy(), loss.copy(), g.copy()
    z_prev = z.copy()

    since_check = 0
    best_at_last_check = best_loss.copy()
    reduced_at_last_check = np.ones(b, dtype=bool)

    for i in range(cfg.n_iter):
        velocity = z - z_prev
        z_prev = z
        a = cfg.momentum if i > 0 else 1.0
        z1 = project_linf(z + step * np.sign(g), x, eps, cfg.lower, cfg.upper)
        z = project_linf(z + a * (z1 - z) + (1.0 - a) * velocity, x, eps, cfg.lower, cfg.upper)

        loss, g = obj(z)
        history[i + 1] = loss
        better = loss > best_loss
        best_z[better] = z[better]
        best_g[better] = g[better]
        best_loss[better] = loss[better]

        since_check += 1
        if since_check == k:
            window = history[i + 1 - k:i + 2]
            n_up = (np.diff(window, axis=0) > 0).sum(axis=0)
            oscillating = n_up < cfg.rho * k
            stalled = ~reduced_at_last_check & (best_at_last_check >= best_loss)
            halve = oscillating | stalled
            reduced_at_last_check = halve
            best_at_last_check = best_loss.copy()
            if halve.any():
                step[halve] /= 2.0
                z = z.copy()
                g = g.copy()
                z[halve] = best_z[halve]
                g[halve] = best_g[halve]
            since_check = 0
            k = max(k - decr, floor)
    return best_z, best_loss


def run_attack(loss_fn: LossFn, x, cfg: AttackConfig, sample_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Maximize ``loss_fn`` over the feasible set; returns (best points, best losses).

    The clean input is always a candidate, so the returned loss is never below
    the clean loss.  Random starts are seeded per (seed, sample id, restart).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2:
        raise gc.ShapeError(f"attack: expected a vector or a (B, n) batch, got shape {x.shape}")
    if sample_ids is None:
        sample_ids = np.arange(x2.shape[0])
    obj = _Objective(loss_fn, single)
    best_loss, _ = obj(x2)
    best_z = x2.copy()
    if cfg.eps > 0:
        run = _apgd_run if cfg.mode == "apgd" else _pgd_run
        for r in range(cfg.restarts):
            z, loss = run(obj, x2, _start_points(x2, cfg, r, sample_ids), cfg)
            better = loss > best_loss
            best_z[better] = z[better]
            best_loss[better] = loss[better]
    if single:
        return best_z[0], best_loss[:1].reshape(())
    return best_z, best_loss


def pgd_attack(loss_fn: LossFn, x, cfg: AttackConfig, sample_ids=None) -> np.ndarray:
    return run_attack(loss_fn, x, cfg.with_(mode="pgd"), sample_ids)[0]


def apgd_attack(loss_fn: LossFn, x, cfg: AttackConfig, sample_ids=None) -> np.ndarray:
    return run_attack(loss_fn, x, cfg.with_(mode="apgd"), sample_ids)[0]
