"""Seeded synthetic multi-modal classification data in [0, 1]^n.

Each class owns a latent prototype.  For every modality a sample draws its own
gaussian latent around the class prototype, optionally bends it with tanh, mixes
it through that modality's fixed random matrix and squashes with a sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio

PRESETS = {
    "image": dict(input_dim=32, mixing_seed=101, noise_std=None, nonlinearity=False),
    "audio": dict(input_dim=32, mixing_seed=202, noise_std=None, nonlinearity=True),
    "thermal": dict(input_dim=32, mixing_seed=303, noise_std=None, nonlinearity=False),
    "video": dict(input_dim=32, mixing_seed=404, noise_std=None, nonlinearity=True),
}


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    input_dim: int = 32
    mixing_seed: int = 0
    noise_std: float | None = None  # None -> dataset default
    nonlinearity: bool = False
    gain: float = 1.0

    @classmethod
    def preset(cls, name: str) -> "ModalitySpec":
        if name not in PRESETS:
            raise ValueError(f"unknown modality preset {name!r}; accepted: {', '.join(PRESETS)}")
        return cls(name=name, **PRESETS[name])


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 8
    samples_per_class: int = 200
    latent_dim: int = 16
    noise_std: float = 0.25
    prototype_scale: float = 1.0
    train_fraction: float = 0.8
    modalities: tuple[ModalitySpec, ...] = field(
        default_factory=lambda: (ModalitySpec.preset("image"), ModalitySpec.preset("audio"))
    )

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names {names}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        mods = d.pop("modalities", None)
        if mods is not None:
            d["modalities"] = tuple(
                ModalitySpec.preset(m) if isinstance(m, str) else ModalitySpec(**m) for m in mods
            )
        return cls(**d)


@dataclass
class Dataset:
    spec: DatasetSpec
    seed: int
    inputs: dict[str, np.ndarray]  # modality -> (N, input_dim)
    labels: np.ndarray  # (N,) int
    latents: dict[str, np.ndarray]  # modality -> (N, latent_dim) noisy latent codes
    prototypes: np.ndarray  # (C, latent_dim)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.spec, self.seed, {m: x[idx] for m, x in self.inputs.items()},
            self.labels[idx], {m: z[idx] for m, z in self.latents.items()}, self.prototypes,
        )

    @property
    def modality_names(self) -> list[str]:
        return list(self.inputs)


def _mixing_matrix(mod: ModalitySpec, latent_dim: int) -> np.ndarray:
    rng = np.random.default_rng(mod.mixing_seed)
    return mod.gain * rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(mod.input_dim, latent_dim)) * 2.0


def _squash(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def generate(spec: DatasetSpec, seed: int) -> Dataset:
    """Deterministic dataset of ``samples_per_class`` samples per class, ordered by class."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(spec.n_classes, spec.latent_dim))
    protos *= spec.prototype_scale / np.linalg.norm(protos, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    base = protos[labels]
    inputs, latents = {}, {}
    for mod in spec.modalities:
        std = spec.noise_std if mod.noise_std is None else mod.noise_std
        noise = rng.normal(size=base.shape)
        lat = base + std * noise
        latents[mod.name] = lat
        h = np.tanh(lat) if mod.nonlinearity else lat
        inputs[mod.name] = _squash(h @ _mixing_matrix(mod, spec.latent_dim).T)
    return Dataset(spec, seed, inputs, labels, latents, protos)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-class stratified split: floor(fraction * n_c) train, the rest test."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.spec.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 2:
            raise ValueError(f"class {c} has {len(idx)} samples; need at least 2 to split")
        idx = rng.permutation(idx)
        n_train = int(np.floor(train_fraction * len(idx)))
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    return dataset.subset(np.sort(np.concatenate(train_idx))), dataset.subset(np.sort(np.concatenate(test_idx)))


def sample_eval_subset(test: Dataset, k_per_class: int, seed: int) -> Dataset:
    """min(k, available) samples per class, drawn without replacement."""
    if k_per_class < 1:
        raise ValueError("k_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(test.spec.n_classes):
        idx = np.flatnonzero(test.labels == c)
        if len(idx) > k_per_class:
            idx = rng.choice(idx, size=k_per_class, replace=False)
        keep.append(np.sort(idx))
    return test.subset(np.sort(np.concatenate(keep)))


# ----------------------------------------------------------------------
# dumps
# ----------------------------------------------------------------------

MANIFEST = "dataset.json"
TENSORS = "dataset.rlbd"


def dump(train: Dataset, test: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for part, ds in (("train", train), ("test", test)):
        for m, x in ds.inputs.items():
            tensors[f"{part}.{m}"] = x
        tensors[f"{part}.labels"] = ds.labels.astype(np.float64)
        for m, z in ds.latents.items():
            tensors[f"{part}.latent.{m}"] = z
    tensors["prototypes"] = train.prototypes
    manifest = {"spec": train.spec.to_dict(), "seed": train.seed}
    tensorio.save(out / TENSORS, tensors, {"kind": "dataset"})
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / MANIFEST)


def load(data_dir: str | Path) -> tuple[Dataset, Dataset]:
    d = Path(data_dir)
    manifest = json.loads((d / MANIFEST).read_text())
    spec = DatasetSpec.from_dict(manifest["spec"])
    tensors, _ = tensorio.load(d / TENSORS)
    parts = []
    for part in ("train", "test"):
        parts.append(
            Dataset(
                spec, int(manifest["seed"]),
                {m.name: tensors[f"{part}.{m.name}"] for m in spec.modalities},
                tensors[f"{part}.labels"].astype(np.int64),
                {m.name: tensors[f"{part}.latent.{m.name}"] for m in spec.modalities},
                tensors["prototypes"],
            )
        )
    return parts[0], parts[1]
