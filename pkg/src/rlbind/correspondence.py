"""Cross-modal correspondence scorers and anchor score vectors.

All scorers take embeddings whose last axis is the embedding dimension and
broadcast over any leading axes, so ``score(e[:, None, :], anchors.T[None])``
scores a batch against every anchor column at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .encoders import AnchorMatrix
from .gradcore import Tensor

SCORERS = ("dot", "scaled_dot", "cosine", "norm_euclid", "bilinear", "mlp")
_DEGENERATE = 1e-12


def _pair(e1, e2, op: str) -> tuple[Tensor, Tensor]:
    e1, e2 = gc.as_tensor(e1), gc.as_tensor(e2)
    if e1.shape[-1] != e2.shape[-1]:
        raise gc.ShapeError(f"{op}: embedding lengths differ ({e1.shape[-1]} vs {e2.shape[-1]})")
    return e1, e2


def score_dot(e1, e2) -> Tensor:
    e1, e2 = _pair(e1, e2, "score_dot")
    return gc.sum_(e1 * e2, axis=-1)


def score_scaled_dot(e1, e2, alpha) -> Tensor:
    if not np.all(np.isfinite(gc.as_tensor(alpha).data)):
        raise ValueError("score_scaled_dot: alpha must be finite")
    return score_dot(e1, e2) * alpha


def score_cosine(e1, e2) -> Tensor:
    e1, e2 = _pair(e1, e2, "score_cosine")
    n1 = gc.l2_norm(e1, axis=-1)
    n2 = gc.l2_norm(e2, axis=-1)
    if np.any(n1.data <= _DEGENERATE) or np.any(n2.data <= _DEGENERATE):
        raise gc.DegenerateVectorError("score_cosine: embedding norm below 1e-12")
    return score_dot(e1, e2) * gc.power(n1 * n2, -1.0)


def score_norm_euclid(e1, e2) -> Tensor:
    """1 - ||e1 - e2|| / max(||e1||, ||e2||), exactly as printed.

    The value lies in [-1, 1]; it reaches below 0 whenever the vectors are
    farther apart than the longer one is long (e.g. orthogonal unit vectors
    give 1 - sqrt(2)).  No clipping is applied.
    """
    e1, e2 = _pair(e1, e2, "score_norm_euclid")
    n1 = gc.l2_norm(e1, axis=-1)
    n2 = gc.l2_norm(e2, axis=-1)
    if np.any(np.maximum(n1.data, n2.data) <= _DEGENERATE):
        raise gc.DegenerateVectorError("score_norm_euclid: both embeddings have norm below 1e-12")
    return 1.0 - gc.l2_norm(e1 - e2, axis=-1) * gc.power(gc.maximum(n1, n2), -1.0)


def score_bilinear(e1, e2, W) -> Tensor:
    e1, e2 = _pair(e1, e2, "score_bilinear")
    W = gc.as_tensor(W)
    d = e1.shape[-1]
    if W.shape != (d, d):
        raise gc.ShapeError(f"score_bilinear: W has shape {W.shape}, expected {(d, d)}")
    # e1^T W e2 == sum(e1 * (e2 @ W^T))
    return gc.sum_(e1 * gc.matmul(e2, gc.transpose(W)), axis=-1)


@dataclass
class MLP:
    """Stack of affine layers with relu between them and no output nonlinearity."""

    weights: list[Tensor]  # each (d_in, d_out)
    biases: list[Tensor]

    def __call__(self, h: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = gc.matmul(h, w) + b
            if k < last:
                h = gc.relu(h)
        return h

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]


def score_mlp(e1, e2, theta: MLP) -> Tensor:
    """MLP over the concatenation [e1 : e2]; not symmetric in its arguments."""
    e1, e2 = _pair(e1, e2, "score_mlp")
    if 2 * e1.shape[-1] != theta.in_dim:
        raise gc.ShapeError(f"score_mlp: concatenated width {2 * e1.shape[-1]} != MLP input {theta.in_dim}")
    lead = np.broadcast_shapes(e1.shape[:-1], e2.shape[:-1])
    zeros = np.zeros(lead + (1,))
    out = theta(gc.concat([e1 + zeros, e2 + zeros], axis=-1))
    return gc.reshape(out, out.shape[:-1])


@dataclass
class Scorer:
    variant: str
    params: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in SCORERS:
            raise ValueError(f"unknown scorer {self.variant!r}; accepted: {', '.join(SCORERS)}")

    def __call__(self, e1, e2) -> Tensor:
        v = self.variant
        if v == "dot":
            return score_dot(e1, e2)
        if v == "scaled_dot":
            return score_scaled_dot(e1, e2, self.params["alpha"])
        if v == "cosine":
            return score_cosine(e1, e2)
        if v == "norm_euclid":
            return score_norm_euclid(e1, e2)
        if v == "bilinear":
            return score_bilinear(e1, e2, self.params["W"])
        return score_mlp(e1, e2, self.params["theta"])

    def parameters(self) -> list[Tensor]:
        out = []
        for p in self.params.values():
            if isinstance(p, MLP):
                out += p.parameters()
            elif isinstance(p, Tensor) and p.requires_grad:
                out.append(p)
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.params.items():
            if isinstance(p, MLP):
                for i, (w, b) in enumerate(zip(p.weights, p.biases)):
                    out[f"scorer.{k}.w{i}"] = w.data
                    out[f"scorer.{k}.b{i}"] = b.data
            else:
                out[f"scorer.{k}"] = gc.as_tensor(p).data
        return out

    def spec(self) -> dict:
        trainable = {k: bool(isinstance(p, Tensor) and p.requires_grad) for k, p in self.params.items()}
        layers = {k: len(p.weights) for k, p in self.params.items() if isinstance(p, MLP)}
        return {"variant": self.variant, "trainable": trainable, "mlp_layers": layers}

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], spec: dict) -> "Scorer":
        params: dict[str, object] = {}
        for k, n_layers in spec.get("mlp_layers", {}).items():
            params[k] = MLP(
                [gc.parameter(tensors[f"scorer.{k}.w{i}"]) for i in range(n_layers)],
                [gc.parameter(tensors[f"scorer.{k}.b{i}"]) for i in range(n_layers)],
            )
        for k, trainable in spec.get("trainable", {}).items():
            if k not in params:
                params[k] = gc.Tensor(tensors[f"scorer.{k}"], requires_grad=trainable)
        return cls(spec["variant"], params)


def make_scorer(name: str, dim: int, seed: int | np.random.Generator = 0, trainable_alpha: bool = False,
                mlp_hidden: int = 32) -> Scorer:
    """Scorer with default parameters: alpha = 1/sqrt(d), W = I, Theta uniform 1/sqrt(fan_in)."""
    if name not in SCORERS:
        raise ValueError(f"unknown scorer {name!r}; accepted: {', '.join(SCORERS)}")
    rng = np.random.default_rng(seed)
    if name == "scaled_dot":
        return Scorer(name, {"alpha": gc.Tensor(1.0 / np.sqrt(dim), requires_grad=trainable_alpha)})
    if name == "bilinear":
        return Scorer(name, {"W": gc.parameter(np.eye(dim))})
    if name == "mlp":
        b1, b2 = 1.0 / np.sqrt(2 * dim), 1.0 / np.sqrt(mlp_hidden)
        theta = MLP(
            [gc.parameter(rng.uniform(-b1, b1, (2 * dim, mlp_hidden))), gc.parameter(rng.uniform(-b2, b2, (mlp_hidden, 1)))],
            [gc.parameter(rng.uniform(-b1, b1, mlp_hidden)), gc.parameter(rng.uniform(-b2, b2, 1))],
        )
        return Scorer(name, {"theta": theta})
    return Scorer(name)


def score_against_anchors(scorer: Scorer, e, anchors: AnchorMatrix) -> Tensor:
    """Score vector(s) s[..., c] = scorer(e, anchors[:, c]); shape e.shape[:-1] + (C,)."""
    e = gc.as_tensor(e)
    if e.shape[-1] != anchors.dim:
        raise gc.ShapeError(f"score_against_anchors: embedding length {e.shape[-1]} != anchor dim {anchors.dim}")
    E = anchors.tensor()
    if scorer.variant == "dot":
        return gc.matmul(e, E)
    if scorer.variant == "scaled_dot":
        return gc.matmul(e, E) * scorer.params["alpha"]
    if scorer.variant == "bilinear":
        return gc.matmul(e, gc.matmul(scorer.params["W"], E))
    cols = gc.Tensor(anchors.matrix.T.copy())  # (C, d)
    return scorer(gc.reshape(e, e.shape[:-1] + (1, e.shape[-1])), cols)


def classify(scorer: Scorer, e, anchors: AnchorMatrix) -> np.ndarray:
    """Argmax class per embedding; ties go to the lowest class index."""
    with gc.no_grad():
        s = score_against_anchors(scorer, e, anchors).data
    return np.argmax(s, axis=-1)
