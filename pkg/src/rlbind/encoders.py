"""Feed-forward modality encoders, low-rank adapters and the frozen anchor table."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from . import tensorio
from .gradcore import Tensor

ACTIVATIONS = ("relu", "none")


@dataclass
class Layer:
    weight: Tensor  # (d_out, d_in)
    bias: Tensor  # (d_out,)
    activation: str = "relu"
    lora_a: Tensor | None = None  # (r, d_in)
    lora_b: Tensor | None = None  # (d_out, r)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def rank(self) -> int:
        return 0 if self.lora_a is None else self.lora_a.shape[0]

    def effective_weight(self) -> np.ndarray:
        w = self.weight.data
        if self.lora_a is not None:
            w = w + self.lora_b.data @ self.lora_a.data
        return w

    def __call__(self, x: Tensor) -> Tensor:
        out = gc.matmul(x, gc.transpose(self.weight))
        if self.lora_a is not None:
            low = gc.matmul(gc.matmul(x, gc.transpose(self.lora_a)), gc.transpose(self.lora_b))
            out = out + low
        out = out + self.bias
        return gc.relu(out) if self.activation == "relu" else out


@dataclass
class Encoder:
    layers: list[Layer]
    frozen: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError(f"layer dims do not chain: {prev.d_out} -> {nxt.d_in}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}; expected one of {ACTIVATIONS}")
        if self.layers[-1].activation != "none":
            raise ValueError("final encoder layer must have activation 'none'")

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].d_out

    @property
    def lora_rank(self) -> int:
        return self.layers[0].rank

    def __call__(self, x) -> Tensor:
        return encode(self, x)

    def parameters(self) -> list[Tensor]:
        """Trainable tensors: all weights and biases, or adapters and biases under LoRA."""
        if self.frozen:
            return []
        params = []
        for layer in self.layers:
            if layer.lora_a is not None:
                params += [layer.lora_a, layer.lora_b, layer.bias]
            else:
                params += [layer.weight, layer.bias]
        return params

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layer{i}.weight"] = layer.weight.data
            out[f"{prefix}layer{i}.bias"] = layer.bias.data
            if layer.lora_a is not None:
                out[f"{prefix}layer{i}.lora_a"] = layer.lora_a.data
                out[f"{prefix}layer{i}.lora_b"] = layer.lora_b.data
        return out

    def spec(self) -> dict:
        return {"activations": [l.activation for l in self.layers], "frozen": self.frozen}

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], spec: dict, prefix: str = "") -> "Encoder":
        frozen = bool(spec.get("frozen", False))
        layers = []
        for i, act in enumerate(spec["activations"]):
            key = f"{prefix}layer{i}"
            layer = Layer(
                gc.Tensor(tensors[f"{key}.weight"]), gc.Tensor(tensors[f"{key}.bias"]), act,
            )
            if f"{key}.lora_a" in tensors:
                layer.lora_a = gc.Tensor(tensors[f"{key}.lora_a"])
                layer.lora_b = gc.Tensor(tensors[f"{key}.lora_b"])
            layers.append(layer)
        enc = cls(layers, frozen=frozen)
        _set_trainable(enc)
        return enc


def _set_trainable(enc: Encoder) -> None:
    for layer in enc.layers:
        lora = layer.lora_a is not None
        layer.weight.requires_grad = not enc.frozen and not lora
        layer.bias.requires_grad = not enc.frozen
        if lora:
            layer.lora_a.requires_grad = not enc.frozen
            layer.lora_b.requires_grad = not enc.frozen


def build_encoder(input_dim: int, hidden: tuple[int, ...] = (64, 64), embed_dim: int = 16,
                  seed: int | np.random.Generator = 0) -> Encoder:
    """Random encoder with symmetric uniform init scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, embed_dim]
    layers = []
    for k, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / np.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        b = rng.uniform(-bound, bound, size=d_out)
        act = "none" if k == len(dims) - 2 else "relu"
        layers.append(Layer(gc.parameter(w), gc.parameter(b), act))
    return Encoder(layers)


def encode(enc: Encoder, x) -> Tensor:
    x = gc.as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != enc.input_dim:
        raise gc.ShapeError(f"encode: input has shape {x.shape}, encoder expects last dim {enc.input_dim}")
    h = x
    for layer in enc.layers:
        h = layer(h)
    return h


def snapshot_frozen(enc: Encoder) -> Encoder:
    """Deep copy whose tensors never require grad; later training of ``enc`` cannot reach it."""
    snap = Encoder(
        [
            Layer(
                gc.Tensor(l.weight.data.copy()), gc.Tensor(l.bias.data.copy()), l.activation,
                None if l.lora_a is None else gc.Tensor(l.lora_a.data.copy()),
                None if l.lora_b is None else gc.Tensor(l.lora_b.data.copy()),
            )
            for l in enc.layers
        ],
        frozen=True,
    )
    for arr in snap.state().values():
        arr.setflags(write=False)
    return snap


def clone(enc: Encoder) -> Encoder:
    out = copy.deepcopy(enc)
    for layer in out.layers:
        layer.weight.grad = layer.bias.grad = None
    return out


def attach_lora(enc: Encoder, rank: int, seed: int | np.random.Generator = 0, init_scale: float = 0.01) -> Encoder:
    """Copy of ``enc`` with frozen base weights and trainable rank-``rank`` adapters on every layer."""
    rank = int(rank)
    for layer in enc.layers:
        if layer.lora_a is not None:
            raise ValueError("encoder already carries adapters")
        if not 1 <= rank < min(layer.d_in, layer.d_out):
            raise ValueError(
                f"invalid LoRA rank {rank}: need 1 <= r < min(d_in, d_out) = {min(layer.d_in, layer.d_out)}"
            )
    rng = np.random.default_rng(seed)
    out = clone(enc)
    out.frozen = False
    for layer in out.layers:
        layer.lora_a = gc.Tensor(rng.normal(0.0, init_scale, size=(rank, layer.d_in)))
        layer.lora_b = gc.Tensor(np.zeros((layer.d_out, rank)))
    _set_trainable(out)
    return out


def state_digest(enc: Encoder) -> str:
    spec = enc.spec()
    return hashlib.sha256(tensorio.dumps(enc.state(), {"encoder": spec})).hexdigest()


# ----------------------------------------------------------------------
# anchors
# ----------------------------------------------------------------------


@dataclass
class AnchorMatrix:
    """Frozen (d, C) matrix of unit-norm class anchors."""

    matrix: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] < 2:
            raise ValueError(f"anchor matrix must be d x C with C >= 2, got shape {m.shape}")
        if not np.allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-12, rtol=0):
            raise ValueError("anchor columns must have unit L2 norm")
        m.setflags(write=False)
        self.matrix = m
        if not self.class_names:
            self.class_names = [f"class_{c}" for c in range(m.shape[1])]
        if len(self.class_names) != m.shape[1]:
            raise ValueError("class_names length must match number of anchor columns")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[1]

    def tensor(self) -> Tensor:
        return gc.Tensor(self.matrix)

    def digest(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


class AnchorSeparationError(RuntimeError):
    pass


def build_anchor_matrix(seed: int, n_classes: int, dim: int, max_cosine: float = 0.5,
                        orthogonal: bool = False, max_attempts: int = 10_000) -> AnchorMatrix:
    """Seeded unit anchors with pairwise cosine at most ``max_cosine``.

    ``orthogonal=True`` draws an orthonormal set instead (needs C <= d).
    """
    if n_classes < 2 or dim < 2:
        raise ValueError(f"need C >= 2 and d >= 2, got C={n_classes}, d={dim}")
    rng = np.random.default_rng(seed)
    if orthogonal:
        if n_classes > dim:
            raise ValueError(f"cannot build {n_classes} orthogonal anchors in dimension {dim}")
        q, r = np.linalg.qr(rng.normal(size=(dim, n_classes)))
        q = q * np.sign(np.diag(r))
        return AnchorMatrix(q / np.linalg.norm(q, axis=0))
    cols: list[np.ndarray] = []
    attempts = 0
    while len(cols) < n_classes:
        if attempts >= max_attempts:
            raise AnchorSeparationError(
                f"could not place {n_classes} anchors with cosine <= {max_cosine} in d={dim} "
                f"after {max_attempts} attempts; raise d or lower C"
            )
        attempts += 1
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(float(v @ c) <= max_cosine for c in cols):
            cols.append(v)
    return AnchorMatrix(np.stack(cols, axis=1))
