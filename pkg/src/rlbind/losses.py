"""Training objectives: InfoNCE, FARE, cross-entropy, score alignment and the stage-2 composite.

Per-sample losses keep the batch axes of their inputs; callers reduce with
``.mean()``.  Scalar inputs give scalar outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .correspondence import Scorer, score_against_anchors
from .encoders import AnchorMatrix, Encoder, encode
from .gradcore import Tensor

LOSS_NAMES = ("infonce", "fare", "ce", "l1", "l2", "kl")
ALIGNMENTS = ("l1", "l2", "kl")


class BallViolationError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentSpec:
    kind: str = "l2"  # l1 | l2 | kl
    tau_prime: float = 1.0

    def __post_init__(self):
        if self.kind not in ALIGNMENTS:
            raise ValueError(f"unknown alignment {self.kind!r}; accepted: {', '.join(ALIGNMENTS)}")
        if not self.tau_prime > 0:
            raise ValueError("tau_prime must be > 0")

    @property
    def p(self) -> int | None:
        return {"l1": 1, "l2": 2}.get(self.kind)


@dataclass
class Stage2Config:
    scorer: Scorer
    alignment: AlignmentSpec = AlignmentSpec()
    lam: float = 1.0
    include_clean_ce: bool = True
    include_adv_ce: bool = True
    include_cma: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not (self.include_clean_ce or self.include_adv_ce or self.include_cma):
            raise ValueError("stage-2 objective needs at least one enabled term")


def infonce(x, y, tau: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over a batch of K pairs (rows of ``x`` and ``y``)."""
    if not tau > 0:
        raise ValueError(f"infonce: temperature must be > 0, got {tau}")
    x, y = gc.as_tensor(x), gc.as_tensor(y)
    if x.ndim != 2 or x.shape != y.shape:
        raise gc.ShapeError(f"infonce: expected two (K, d) batches of equal shape, got {x.shape} and {y.shape}")
    k = x.shape[0]
    sim = gc.matmul(gc.l2_normalize(x), gc.transpose(gc.l2_normalize(y))) * (1.0 / tau)
    eye = np.eye(k)
    m2t = -gc.sum_(gc.log_softmax(sim, axis=1) * eye) * (1.0 / k)
    t2m = -gc.sum_(gc.log_softmax(gc.transpose(sim), axis=1) * eye) * (1.0 / k)
    return (m2t + t2m) * 0.5


def infonce_directions(sim: np.ndarray) -> tuple[float, float]:
    """The two directional terms for a precomputed similarity matrix (already divided by tau)."""
    s = gc.Tensor(sim)
    k = sim.shape[0]
    with gc.no_grad():
        m2t = -(gc.sum_(gc.log_softmax(s, axis=1) * np.eye(k)) * (1.0 / k)).item()
        t2m = -(gc.sum_(gc.log_softmax(gc.transpose(s), axis=1) * np.eye(k)) * (1.0 / k)).item()
    return m2t, t2m


def fare_loss(phi_ft: Encoder, phi_org: Encoder, x, z, epsilon: float | None = None) -> Tensor:
    """Squared L2 distance between the trainable embedding of ``z`` and the frozen embedding of ``x``."""
    x, z = gc.as_tensor(x), gc.as_tensor(z)
    if epsilon is not None:
        gap = float(np.max(np.abs(z.data - x.data), initial=0.0))
        if gap > epsilon + 1e-12:
            raise BallViolationError(f"fare_loss: ||z - x||_inf = {gap:.6g} exceeds epsilon = {epsilon:.6g}")
    with gc.no_grad():
        target = encode(phi_org, gc.Tensor(x.data)).data
    diff = encode(phi_ft, z) - target
    return gc.sum_(diff * diff, axis=-1)


def cross_entropy(scores, t) -> Tensor:
    """-log softmax(scores)[t] via log-sum-exp; ``t`` is an int or an int array over the batch."""
    scores = gc.as_tensor(scores)
    n_classes = scores.shape[-1]
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= n_classes):
        raise IndexError(f"cross_entropy: target {t} outside [0, {n_classes})")
    onehot = np.eye(n_classes)[t]
    return -gc.sum_(gc.log_softmax(scores, axis=-1) * onehot, axis=-1)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise gc.ShapeError(f"{op}: score vectors have shapes {a.shape} and {b.shape}")


def align_lp(s_clean, s_adv, p: int = 2) -> Tensor:
    """(1/C) sum |s_clean - s_adv|^p for p in {1, 2}."""
    s_clean, s_adv = gc.as_tensor(s_clean), gc.as_tensor(s_adv)
    _check_same(s_clean, s_adv, "align_lp")
    if p not in (1, 2):
        raise ValueError(f"align_lp: p must be 1 or 2, got {p}")
    diff = s_clean - s_adv
    term = gc.abs_(diff) if p == 1 else diff * diff
    return gc.mean(term, axis=-1)


def align_symkl(s_clean, s_adv, tau_prime: float = 1.0) -> Tensor:
    """KL(P||Q) + KL(Q||P) between the tau'-softmaxes of the two score vectors."""
    s_clean, s_adv = gc.as_tensor(s_clean), gc.as_tensor(s_adv)
    _check_same(s_clean, s_adv, "align_symkl")
    if not tau_prime > 0:
        raise ValueError("align_symkl: tau_prime must be > 0")
    log_p = gc.log_softmax(s_clean * (1.0 / tau_prime), axis=-1)
    log_q = gc.log_softmax(s_adv * (1.0 / tau_prime), axis=-1)
    p, q = gc.exp(log_p), gc.exp(log_q)
    return gc.sum_(p * (log_p - log_q), axis=-1) + gc.sum_(q * (log_q - log_p), axis=-1)


def cma_loss(s_clean, s_adv, spec: AlignmentSpec) -> Tensor:
    if spec.kind == "kl":
        return align_symkl(s_clean, s_adv, spec.tau_prime)
    return align_lp(s_clean, s_adv, spec.p)


def stage2_terms(e_clean, e_adv, anchors: AnchorMatrix, t, cfg: Stage2Config) -> dict[str, Tensor]:
    """Per-sample enabled terms of the stage-2 objective (CMA already weighted by lambda)."""
    terms: dict[str, Tensor] = {}
    s_clean = score_against_anchors(cfg.scorer, e_clean, anchors)
    s_adv = score_against_anchors(cfg.scorer, e_adv, anchors)
    if cfg.include_clean_ce:
        terms["clean_ce"] = cross_entropy(s_clean, t)
    if cfg.include_adv_ce:
        terms["adv_ce"] = cross_entropy(s_adv, t)
    if cfg.include_cma:
        terms["cma"] = cma_loss(s_clean, s_adv, cfg.alignment) * cfg.lam
    return terms


def stage2_objective(e_clean, e_adv, anchors: AnchorMatrix, t, cfg: Stage2Config) -> Tensor:
    """CE(clean, t) + CE(adv, t) + lambda * CMA with per-term switches; batch-averaged."""
    total = None
    for term in stage2_terms(e_clean, e_adv, anchors, t, cfg).values():
        term = gc.mean(term) if term.ndim else term
        total = term if total is None else total + term
    return total


def check_cosine_l2_bound(u, v, t) -> tuple[bool, float]:
    """Check |cos(u,t) - cos(v,t)| <= 2 ||u - v|| / max(||u||, ||v||); returns (holds, slack)."""
    u, v, t = (np.asarray(a, dtype=np.float64) for a in (u, v, t))
    nu, nv, nt = (float(np.linalg.norm(a)) for a in (u, v, t))
    if min(nu, nv, nt) <= 1e-12:
        raise gc.DegenerateVectorError("check_cosine_l2_bound: degenerate vector")
    lhs = abs(u @ t / (nu * nt) - v @ t / (nv * nt))
    rhs = 2.0 / max(nu, nv) * float(np.linalg.norm(u - v))
    slack = rhs - lhs
    return bool(slack >= -1e-12), float(slack)
