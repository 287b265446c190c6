"""Stage 0 (InfoNCE surrogate pretraining), stage 1 (FARE), stage 2 (cross-modal alignment),
evaluation under attack, checkpoints and ablation grids."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcore as gc
from . import tensorio
from .attacks import AttackConfig, run_attack
from .config import ConfigError, ExperimentConfig, apply_overrides, format_epsilon
from .correspondence import Scorer, classify, make_scorer, score_against_anchors
from .encoders import (AnchorMatrix, Encoder, attach_lora, build_anchor_matrix, build_encoder,
                       snapshot_frozen)
from .losses import AlignmentSpec, Stage2Config, cross_entropy, fare_loss, infonce, stage2_objective
from .synthdata import Dataset, generate, sample_eval_subset, split

log = logging.getLogger(__name__)

CSV_HEADER = ["run_id", "stage", "modality", "scorer", "alignment", "lora", "lambda", "epsilon",
              "clean_acc", "robust_acc", "seed", "config_hash"]


class PipelineError(RuntimeError):
    pass


class TrainingError(PipelineError):
    """Divergence or failure to train."""


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------


@dataclass
class Model:
    encoders: dict[str, Encoder]
    anchors: AnchorMatrix
    scorers: dict[str, Scorer]
    tag: str = "init"

    @property
    def modalities(self) -> list[str]:
        return list(self.encoders)

    def parameters(self, modality: str) -> list[gc.Tensor]:
        return self.encoders[modality].parameters() + self.scorers[modality].parameters()


def save_checkpoint(model: Model, path: str | Path) -> None:
    tensors = {"anchors": model.anchors.matrix}
    meta = {
        "kind": "model", "tag": model.tag, "modalities": model.modalities,
        "class_names": model.anchors.class_names, "encoders": {}, "scorers": {},
    }
    for m in model.modalities:
        tensors.update(model.encoders[m].state(prefix=f"enc.{m}."))
        tensors.update({f"{m}.{k}": v for k, v in model.scorers[m].state().items()})
        meta["encoders"][m] = model.encoders[m].spec()
        meta["scorers"][m] = model.scorers[m].spec()
    tensorio.save(path, tensors, meta)


def load_checkpoint(path: str | Path) -> Model:
    try:
        tensors, meta = tensorio.load(path)
        if meta.get("kind") != "model":
            raise CheckpointError(f"{path}: not a model checkpoint")
        anchors = AnchorMatrix(tensors["anchors"], list(meta["class_names"]))
        encoders, scorers = {}, {}
        for m in meta["modalities"]:
            encoders[m] = Encoder.from_state(tensors, meta["encoders"][m], prefix=f"enc.{m}.")
            sub = {k[len(m) + 1:]: v for k, v in tensors.items() if k.startswith(f"{m}.scorer.")}
            scorers[m] = Scorer.from_state(sub, meta["scorers"][m])
            if encoders[m].embed_dim != anchors.dim:
                raise CheckpointError(f"{path}: encoder {m} embeds to {encoders[m].embed_dim}, anchors have d={anchors.dim}")
        return Model(encoders, anchors, scorers, meta["tag"])
    except CheckpointError:
        raise
    except FileNotFoundError:
        raise
    except (tensorio.ContainerError, KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


@dataclass
class MetricRow:
    stage: str
    modality: str
    scorer: str
    alignment: str
    lora: int
    lam: str
    epsilon: Fraction
    clean: Fraction
    robust: Fraction

    @property
    def clean_acc(self) -> float:
        return float(self.clean)

    @property
    def robust_acc(self) -> float:
        return float(self.robust)


@dataclass
class RunMetrics:
    run_id: str
    seed: int
    config_hash: str
    rows: list[MetricRow] = field(default_factory=list)
    losses: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    wall_clock: float = 0.0

    def select(self, stage: str | None = None, modality: str | None = None, epsilon=None) -> list[MetricRow]:
        return [
            r for r in self.rows
            if (stage is None or r.stage == stage)
            and (modality is None or r.modality == modality)
            and (epsilon is None or r.epsilon == Fraction(epsilon))
        ]

    def mean(self, attr: str, **filters) -> float:
        rows = self.select(**filters)
        if not rows:
            raise KeyError(f"no metric rows match {filters}")
        return float(np.mean([getattr(r, attr) for r in rows]))

    def csv_rows(self) -> list[list[str]]:
        return [
            [self.run_id, r.stage, r.modality, r.scorer, r.alignment, str(r.lora), r.lam,
             format_epsilon(r.epsilon), f"{float(r.clean):.6f}", f"{float(r.robust):.6f}",
             str(self.seed), self.config_hash]
            for r in self.rows
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.csv_rows())
        return buf.getvalue()


def write_text_atomic(path: Path, text: str) -> None:
    tensorio.atomic_write_bytes(path, text.encode("utf-8"))


def write_run_outputs(out_dir: str | Path, cfg: ExperimentConfig, metrics: RunMetrics, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / "metrics.csv", metrics.to_csv())
    manifest = {
        "library": "rlbind", "version": __version__, "config": cfg.to_dict(),
        "provenance": cfg.provenance, "config_hash": metrics.config_hash, "run_id": metrics.run_id,
        "seed": metrics.seed, "wall_clock_s": round(metrics.wall_clock, 3),
        "losses": metrics.losses, **(extra or {}),
    }
    write_text_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------
# data
# ----------------------------------------------------------------------


@dataclass
class Splits:
    train: Dataset
    test: Dataset


def build_data(cfg: ExperimentConfig) -> Splits:
    spec = cfg.data.dataset_spec()
    ds = generate(spec, cfg.data_seed)
    train, test = split(ds, spec.train_fraction, cfg.data_seed)
    return Splits(train, test)


def eval_set(cfg: ExperimentConfig, splits: Splits) -> Dataset:
    if cfg.eval.k_per_class > 0:
        return sample_eval_subset(splits.test, cfg.eval.k_per_class, cfg.seed)
    return splits.test


# ----------------------------------------------------------------------
# training helpers
# ----------------------------------------------------------------------


def _sgd(params: list[gc.Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
            p.grad = None


def _zero(params: list[gc.Tensor]) -> None:
    for p in params:
        p.grad = None


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([seed, *path])


def _guard(stage: str, losses: list[float], value: float) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{stage}: loss became non-finite")
    if losses and losses[0] > 0 and value > 10.0 * losses[0]:
        raise TrainingError(f"{stage}: loss {value:.4g} exceeds 10x the initial loss {losses[0]:.4g}")


def _attack_cfg(epsilon, mode: str, n_iter: int, seed: int, random_start: bool = False, restarts: int = 1) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, n_iter=n_iter, mode=mode, seed=seed,
                        random_start=random_start, restarts=restarts)


def _eps_tag(eps: Fraction) -> str:
    k = Fraction(eps) * 255
    return str(k.numerator) if k.denominator == 1 else format_epsilon(eps)


def ce_attack_loss(enc: Encoder, scorer: Scorer, anchors: AnchorMatrix, t):
    """Per-sample cross-entropy of the anchor scores, as a function of the input batch."""
    return lambda z: cross_entropy(score_against_anchors(scorer, enc(z), anchors), t)


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------


def init_model(cfg: ExperimentConfig, splits: Splits) -> Model:
    anchors = build_anchor_matrix(cfg.model.anchor_seed, cfg.data.n_classes, cfg.model.embed_dim,
                                  max_cosine=cfg.model.anchor_max_cosine)
    encoders, scorers = {}, {}
    for mi, m in enumerate(splits.train.modality_names):
        d_in = splits.train.inputs[m].shape[1]
        encoders[m] = build_encoder(d_in, tuple(cfg.model.hidden), cfg.model.embed_dim, seed=_rng(cfg.seed, 0, mi))
        scorers[m] = make_scorer("dot", cfg.model.embed_dim)
    return Model(encoders, anchors, scorers, tag="init")


def stage0_pretrain(model: Model, cfg: ExperimentConfig, train: Dataset) -> dict[str, list[float]]:
    """InfoNCE of each modality encoder against the frozen class anchors.

    Batches hold one sample of every class, so the positives inside a batch are
    distinct anchors and the loss can approach zero.
    """
    sc = cfg.stage0
    anchor_rows = model.anchors.matrix.T
    n_classes = model.anchors.n_classes
    history: dict[str, list[float]] = {}
    for mi, m in enumerate(model.modalities):
        enc = model.encoders[m]
        params = enc.parameters()
        rng = _rng(cfg.seed, 10, mi)
        x_all = train.inputs[m]
        by_class = [np.flatnonzero(train.labels == c) for c in range(n_classes)]
        steps = min(len(ix) for ix in by_class)
        losses: list[float] = []
        for _ in range(sc.epochs):
            perms = [rng.permutation(ix)[:steps] for ix in by_class]
            for s in range(steps):
                idx = np.array([p[s] for p in perms])
                try:
                    loss = infonce(enc(x_all[idx]), anchor_rows[train.labels[idx]], sc.tau)
                except gc.NonFiniteError as exc:
                    raise TrainingError(f"stage0/{m}: {exc}") from None
                _guard(f"stage0/{m}", losses, loss.item())
                losses.append(loss.item())
                gc.backward(loss)
                _sgd(params, sc.lr)
        if losses and sc.epochs > 0:
            tail = float(np.mean(losses[-steps:]))
            if tail > 0.5 * losses[0]:
                raise TrainingError(
                    f"stage0/{m}: loss fell only from {losses[0]:.4f} to {tail:.4f} (need a 50% drop)"
                )
        history[m] = losses
    model.tag = "stage0"
    return history


def stage1_fare(model: Model, cfg: ExperimentConfig, train: Dataset) -> dict[str, list[float]]:
    """Unsupervised FARE hardening; labels are never read."""
    sc = cfg.stage1
    history: dict[str, list[float]] = {}
    attack = _attack_cfg(sc.epsilon, sc.attack, sc.n_iter, cfg.seed, random_start=sc.random_start)
    eps = float(sc.epsilon)
    for mi, m in enumerate(model.modalities):
        original = snapshot_frozen(model.encoders[m])
        enc = model.encoders[m]
        if cfg.model.lora_rank and enc.lora_rank == 0:
            enc = model.encoders[m] = attach_lora(enc, cfg.model.lora_rank, seed=_rng(cfg.seed, 1, mi))
        params = enc.parameters()
        rng = _rng(cfg.seed, 11, mi)
        x_all = train.inputs[m]
        losses: list[float] = []
        for _ in range(sc.epochs):
            order = rng.permutation(len(x_all))
            for start in range(0, len(order), sc.batch_size):
                idx = order[start:start + sc.batch_size]
                x = x_all[idx]
                try:
                    z, _ = run_attack(lambda zt: fare_loss(enc, original, x, zt), x, attack, sample_ids=idx)
                    loss = gc.mean(fare_loss(enc, original, x, z, epsilon=eps))
                except gc.NonFiniteError as exc:
                    raise TrainingError(f"stage1/{m}: {exc}") from None
                _guard(f"stage1/{m}", losses, loss.item())
                losses.append(loss.item())
                _zero(params)
                gc.backward(loss)
                _sgd(params, sc.lr)
        history[m] = losses
    model.tag = f"FARE{_eps_tag(sc.epsilon)}"
    return history


def stage2_config(cfg: ExperimentConfig, scorer: Scorer) -> Stage2Config:
    s = cfg.stage2
    return Stage2Config(
        scorer=scorer, alignment=AlignmentSpec(s.alignment, s.tau_prime), lam=s.lam,
        include_clean_ce=s.clean_ce, include_adv_ce=s.adv_ce, include_cma=s.cma,
    )


def stage2_rlbind(model: Model, cfg: ExperimentConfig, train: Dataset) -> dict[str, list[float]]:
    """Supervised clean/adversarial CE plus cross-modal alignment against the frozen anchors."""
    sc = cfg.stage2
    history: dict[str, list[float]] = {}
    attack = _attack_cfg(sc.epsilon, sc.attack, sc.n_iter, cfg.seed)
    need_adv = sc.adv_ce or sc.cma
    for mi, m in enumerate(model.modalities):
        enc = model.encoders[m]
        if cfg.model.lora_rank and enc.lora_rank == 0:
            enc = model.encoders[m] = attach_lora(enc, cfg.model.lora_rank, seed=_rng(cfg.seed, 1, mi))
        scorer = model.scorers[m] = make_scorer(
            sc.scorer, cfg.model.embed_dim, seed=_rng(cfg.seed, 2, mi),
            trainable_alpha=sc.trainable_alpha, mlp_hidden=sc.mlp_hidden,
        )
        obj_cfg = stage2_config(cfg, scorer)
        params = enc.parameters() + scorer.parameters()
        rng = _rng(cfg.seed, 12, mi)
        x_all, y_all = train.inputs[m], train.labels
        losses: list[float] = []
        for _ in range(sc.epochs):
            order = rng.permutation(len(x_all))
            for start in range(0, len(order), sc.batch_size):
                idx = order[start:start + sc.batch_size]
                x, t = x_all[idx], y_all[idx]
                try:
                    if need_adv:
                        z, _ = run_attack(ce_attack_loss(enc, scorer, model.anchors, t), x, attack, sample_ids=idx)
                    else:
                        z = x
                    loss = stage2_objective(enc(x), enc(z), model.anchors, t, obj_cfg)
                except gc.NonFiniteError as exc:
                    raise TrainingError(f"stage2/{m}: {exc}") from None
                _guard(f"stage2/{m}", losses, loss.item())
                losses.append(loss.item())
                _zero(params)
                gc.backward(loss)
                _sgd(params, sc.lr)
        history[m] = losses
    model.tag = f"RLBind{_eps_tag(sc.epsilon)}"
    return history


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------


def evaluate_modality(model: Model, m: str, data: Dataset, attack: AttackConfig) -> tuple[Fraction, Fraction]:
    """(clean accuracy, robust accuracy) as exact fractions for one modality and one budget."""
    x, t = data.inputs[m], data.labels
    if len(t) == 0:
        raise PipelineError("evaluate: empty evaluation set")
    enc, scorer = model.encoders[m], model.scorers[m]
    with gc.no_grad():
        clean_pred = classify(scorer, enc(x), model.anchors)
    clean = Fraction(int((clean_pred == t).sum()), len(t))
    z, _ = run_attack(ce_attack_loss(enc, scorer, model.anchors, t), x, attack, sample_ids=np.arange(len(t)))
    if np.max(np.abs(z - x)) > attack.eps + 1e-12 or z.min() < 0.0 or z.max() > 1.0:
        raise PipelineError("evaluate: attack returned an infeasible point")
    with gc.no_grad():
        adv_pred = classify(scorer, enc(z), model.anchors)
    return clean, Fraction(int((adv_pred == t).sum()), len(t))


def evaluate(model: Model, data: Dataset, attacks: list[AttackConfig], stage: str = "eval",
             cfg: ExperimentConfig | None = None) -> list[MetricRow]:
    if len(data) == 0:
        raise PipelineError("evaluate: empty evaluation set")
    rows = []
    alignment = lam = "none"
    if cfg is not None and stage == "stage2":
        alignment = cfg.stage2.alignment if cfg.stage2.cma else "none"
        lam = repr(float(cfg.stage2.lam))
    for m in model.modalities:
        scorer = model.scorers[m].variant
        lora = model.encoders[m].lora_rank
        for atk in attacks:
            clean, robust = evaluate_modality(model, m, data, atk)
            rows.append(MetricRow(stage, m, scorer, alignment, lora, lam, Fraction(atk.epsilon), clean, robust))
    return rows


def eval_attacks(cfg: ExperimentConfig) -> list[AttackConfig]:
    e = cfg.eval
    return [_attack_cfg(eps, e.attack, e.n_iter, cfg.seed, e.random_start, e.restarts) for eps in e.epsilons]


# ----------------------------------------------------------------------
# full runs
# ----------------------------------------------------------------------


def _subset_hash(cfg: ExperimentConfig, keys: list[str]) -> str:
    d = cfg.to_dict()
    picked = {k: d[k.split(".")[0]] if "." not in k else d[k.split(".")[0]][k.split(".")[1]] for k in keys}
    picked["data_seed"] = cfg.data_seed
    return json.dumps(picked, sort_keys=True)


_PREFIX_KEYS = {
    "stage0": ["run.seed", "data", "model.hidden", "model.embed_dim", "model.anchor_seed",
               "model.anchor_max_cosine", "stage0", "eval"],
}
_PREFIX_KEYS["stage1"] = _PREFIX_KEYS["stage0"] + ["model.lora_rank", "stage1"]


def run_experiment(cfg: ExperimentConfig, splits: Splits | None = None, cache: dict | None = None,
                   init: Model | None = None) -> tuple[Model, RunMetrics]:
    """Run every enabled stage in order, evaluating after each one.

    ``cache`` (any dict) lets grids share identical stage-0/1 prefixes.
    """
    t0 = time.perf_counter()
    splits = splits or build_data(cfg)
    evset = eval_set(cfg, splits)
    attacks = eval_attacks(cfg)
    metrics = RunMetrics(run_id=cfg.config_hash()[:8], seed=cfg.seed, config_hash=cfg.config_hash())
    model = copy.deepcopy(init) if init is not None else None

    def cached(stage: str, fn):
        nonlocal model
        key = None
        if cache is not None and init is None:
            key = (stage, _subset_hash(cfg, _PREFIX_KEYS[stage]))
            if key in cache:
                saved, rows, losses = cache[key]
                model = copy.deepcopy(saved)
                metrics.rows += copy.deepcopy(rows)
                metrics.losses[stage] = copy.deepcopy(losses)
                return
        losses = fn()
        rows = evaluate(model, evset, attacks, stage, cfg)
        metrics.rows += rows
        metrics.losses[stage] = losses
        if key is not None:
            cache[key] = (copy.deepcopy(model), copy.deepcopy(rows), copy.deepcopy(losses))

    if model is None:
        model = init_model(cfg, splits)
        if cfg.stage0.enabled:
            cached("stage0", lambda: stage0_pretrain(model, cfg, splits.train))
    if cfg.stage1.enabled:
        if init is None and cfg.stage0.enabled:
            cached("stage1", lambda: stage1_fare(model, cfg, splits.train))
        else:
            metrics.losses["stage1"] = stage1_fare(model, cfg, splits.train)
            metrics.rows += evaluate(model, evset, attacks, "stage1", cfg)
    if cfg.stage2.enabled:
        metrics.losses["stage2"] = stage2_rlbind(model, cfg, splits.train)
        metrics.rows += evaluate(model, evset, attacks, "stage2", cfg)
    metrics.wall_clock = time.perf_counter() - t0
    return model, metrics


STAGES = {"stage0": stage0_pretrain, "stage1": stage1_fare, "stage2": stage2_rlbind}


def run_stage(stage: str, cfg: ExperimentConfig, splits: Splits, init: Model | None = None) -> tuple[Model, RunMetrics]:
    """One stage from ``init`` (or a fresh model), evaluated afterwards."""
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; accepted: {', '.join(STAGES)}")
    t0 = time.perf_counter()
    model = copy.deepcopy(init) if init is not None else init_model(cfg, splits)
    missing = set(splits.train.modality_names) ^ set(model.modalities)
    if missing:
        raise PipelineError(f"model modalities {model.modalities} do not match data {splits.train.modality_names}")
    metrics = RunMetrics(run_id=cfg.config_hash()[:8], seed=cfg.seed, config_hash=cfg.config_hash())
    metrics.losses[stage] = STAGES[stage](model, cfg, splits.train)
    metrics.rows += evaluate(model, eval_set(cfg, splits), eval_attacks(cfg), stage, cfg)
    metrics.wall_clock = time.perf_counter() - t0
    return model, metrics


# ----------------------------------------------------------------------
# ablation grids
# ----------------------------------------------------------------------

AXIS_ALIASES = {
    "scorer": "stage2.scorer",
    "alignment": "stage2.alignment",
    "lambda": "stage2.lam",
    "lam": "stage2.lam",
    "lora": "model.lora_rank",
    "seed": "run.seed",
    "clean_ce": "stage2.clean_ce",
    "adv_ce": "stage2.adv_ce",
    "cma": "stage2.cma",
}


@dataclass
class GridCell:
    overrides: dict
    config: ExperimentConfig
    metrics: RunMetrics | None = None
    error: str | None = None


def expand_grid(base: ExperimentConfig, axes: dict[str, list]) -> list[GridCell]:
    """Validate every cell's config up front; unknown names fail before any run starts."""
    names = [AXIS_ALIASES.get(k, k) for k in axes]
    cells = []
    for combo in itertools.product(*axes.values()):
        overrides = dict(zip(names, combo))
        cells.append(GridCell(overrides, apply_overrides(base, overrides, source="flag")))
    return cells


def run_ablation_grid(base: ExperimentConfig, axes: dict[str, list], splits: Splits | None = None,
                      cache: dict | None = None) -> list[GridCell]:
    cells = expand_grid(base, axes)
    cache = {} if cache is None else cache
    data_cache: dict[str, Splits] = {}
    for cell in cells:
        key = _subset_hash(cell.config, ["data"])
        try:
            if splits is not None:
                cell_splits = splits
            else:
                if key not in data_cache:
                    data_cache[key] = build_data(cell.config)
                cell_splits = data_cache[key]
            _, cell.metrics = run_experiment(cell.config, cell_splits, cache=cache)
        except (PipelineError, ConfigError, ValueError, FloatingPointError, RuntimeError) as exc:
            log.warning("grid cell %s failed: %s", cell.overrides, exc)
            cell.error = f"{type(exc).__name__}: {exc}"
    return cells


def grid_csv(cells: list[GridCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for cell in cells:
        if cell.metrics is not None:
            w.writerows(cell.metrics.csv_rows())
    return buf.getvalue()
