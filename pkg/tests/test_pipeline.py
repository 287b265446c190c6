import copy
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from rlbind import gradcore as gc
from rlbind import pipeline as pl
from rlbind.attacks import AttackConfig, run_attack
from rlbind.config import ConfigError, parse_config
from rlbind.encoders import snapshot_frozen
from rlbind.losses import fare_loss

TINY = [
    "data.n_classes=4", "data.samples_per_class=20", "data.latent_dim=8", "data.noise_std=0.15",
    'data.modalities=[{name="image",input_dim=12,mixing_seed=101,gain=1.25},'
    '{name="audio",input_dim=12,mixing_seed=202,nonlinearity=true,gain=1.25}]',
    "model.hidden=[16]", "model.embed_dim=8", "stage0.epochs=30",
    "stage1.n_iter=3", "stage2.n_iter=3", "stage1.batch_size=16", "stage2.batch_size=16",
    "eval.n_iter=5", 'eval.epsilons=["1/20","1/10"]',
]


def tiny(*extra):
    return parse_config(None, TINY + list(extra))


def params_of(model):
    out = {}
    for m in model.modalities:
        out.update({f"{m}.{k}": v.copy() for k, v in model.encoders[m].state().items()})
        out.update({f"{m}.{k}": v.copy() for k, v in model.scorers[m].state().items()})
    return out


def same_params(a, b):
    pa, pb = params_of(a), params_of(b)
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


@pytest.fixture(scope="module")
def splits():
    return pl.build_data(tiny())


@pytest.fixture(scope="module")
def stage0_model(splits):
    cfg = tiny()
    model = pl.init_model(cfg, splits)
    pl.stage0_pretrain(model, cfg, splits.train)
    return model


@pytest.fixture(scope="module")
def full_run(splits):
    return pl.run_experiment(tiny(), splits)


# --- stage 0 ---------------------------------------------------------------


def test_stage0_learns_above_chance(full_run):
    _, metrics = full_run
    n_classes = 4
    for m in ("image", "audio"):
        assert metrics.mean("clean_acc", stage="stage0", modality=m) > 3 / n_classes


def test_untrained_model_near_chance():
    cfg = parse_config(None, ["data.samples_per_class=100", "eval.n_iter=1", 'eval.epsilons=["0"]'])
    data = pl.build_data(cfg)
    model = pl.init_model(cfg, data)
    rows = pl.evaluate(model, data.test, pl.eval_attacks(cfg))
    n = len(data.test)
    sd = np.sqrt(1 / 8 * 7 / 8 / n)
    for r in rows:
        assert abs(r.clean_acc - 1 / 8) <= 4 * sd + 0.05


def test_stage0_untrainable_raises(splits):
    cfg = tiny("stage0.epochs=1", "stage0.lr=1e-6")
    model = pl.init_model(cfg, splits)
    with pytest.raises(pl.TrainingError, match="50% drop"):
        pl.stage0_pretrain(model, cfg, splits.train)


# --- stage 1 ---------------------------------------------------------------


def test_stage1_zero_epsilon_is_noop(stage0_model, splits):
    cfg = tiny('stage1.epsilon="0"')
    model = copy.deepcopy(stage0_model)
    hist = pl.stage1_fare(model, cfg, splits.train)
    assert all(h[0] == 0.0 for h in hist.values())
    assert same_params(model, stage0_model)


def test_stage1_never_reads_labels(stage0_model, splits):
    cfg = tiny()
    a, b = copy.deepcopy(stage0_model), copy.deepcopy(stage0_model)
    pl.stage1_fare(a, cfg, splits.train)
    scrambled = replace(splits.train, labels=np.random.default_rng(0).permutation(splits.train.labels))
    pl.stage1_fare(b, cfg, scrambled)
    assert same_params(a, b)


def test_stage1_leaves_anchors_and_tags(stage0_model, splits):
    cfg = tiny('stage1.epsilon="4/255"')
    model = copy.deepcopy(stage0_model)
    before = model.anchors.matrix.copy()
    pl.stage1_fare(model, cfg, splits.train)
    assert np.array_equal(model.anchors.matrix, before)
    assert model.tag == "FARE4"
    assert not same_params(model, stage0_model)


def test_stage1_reduces_heldout_fare_loss(stage0_model, splits):
    cfg = tiny('stage1.epsilon="1/10"', "stage1.epochs=20")
    model = copy.deepcopy(stage0_model)
    x = splits.test.inputs["image"]
    atk = AttackConfig(epsilon=Fraction(1, 10), n_iter=10, seed=3, random_start=True)
    original = snapshot_frozen(stage0_model.encoders["image"])

    def heldout(enc):
        z, _ = run_attack(lambda zt: fare_loss(enc, original, x, zt), x, atk)
        with gc.no_grad():
            return float(np.mean(fare_loss(enc, original, x, z).data))

    first = heldout(model.encoders["image"])
    hist = pl.stage1_fare(model, cfg, splits.train)
    assert heldout(model.encoders["image"]) < first
    assert hist["image"][-1] < hist["image"][0]


# --- stage 2 ---------------------------------------------------------------


def test_lambda_zero_matches_ce_only_trajectory(stage0_model, splits):
    a, b = copy.deepcopy(stage0_model), copy.deepcopy(stage0_model)
    ha = pl.stage2_rlbind(a, tiny("stage2.lam=0.0"), splits.train)
    hb = pl.stage2_rlbind(b, tiny("stage2.cma=false"), splits.train)
    assert ha == hb
    assert same_params(a, b)


def test_stage2_freezes_anchors(stage0_model, splits):
    model = copy.deepcopy(stage0_model)
    before = model.anchors.matrix.copy()
    pl.stage2_rlbind(model, tiny("stage2.scorer=bilinear"), splits.train)
    assert np.array_equal(model.anchors.matrix, before)
    assert model.scorers["image"].variant == "bilinear"
    assert model.tag == "RLBind4"


def test_stage2_all_flags_off_rejected():
    with pytest.raises(ConfigError):
        tiny("stage2.clean_ce=false", "stage2.adv_ce=false", "stage2.cma=false")


def test_divergence_is_reported(stage0_model, splits):
    model = copy.deepcopy(stage0_model)
    with pytest.raises(pl.TrainingError):
        pl.stage2_rlbind(model, tiny("stage2.lr=1e6", "stage2.epochs=3"), splits.train)


# --- evaluation ------------------------------------------------------------


def test_zero_epsilon_robust_equals_clean(stage0_model, splits):
    cfg = tiny('eval.epsilons=["0"]')
    for r in pl.evaluate(stage0_model, splits.test, pl.eval_attacks(cfg)):
        assert r.robust == r.clean


def test_accuracies_are_exact_fractions(full_run):
    _, metrics = full_run
    for r in metrics.rows:
        assert isinstance(r.clean, Fraction) and isinstance(r.robust, Fraction)
        assert r.clean.denominator <= 16 and r.robust <= r.clean


def test_budget_monotone(full_run):
    _, metrics = full_run
    for stage in ("stage0", "stage1", "stage2"):
        for m in ("image", "audio"):
            small = metrics.mean("robust_acc", stage=stage, modality=m, epsilon=Fraction(1, 20))
            big = metrics.mean("robust_acc", stage=stage, modality=m, epsilon=Fraction(1, 10))
            assert big <= small + 0.02


def test_empty_eval_set_rejected(stage0_model, splits):
    empty = splits.test.subset(np.array([], dtype=int))
    with pytest.raises(pl.PipelineError, match="empty"):
        pl.evaluate(stage0_model, empty, pl.eval_attacks(tiny()))


def test_csv_layout(full_run):
    _, metrics = full_run
    lines = metrics.to_csv().splitlines()
    assert lines[0] == ",".join(pl.CSV_HEADER)
    assert len(lines) == 1 + 3 * 2 * 2
    stage2 = [ln for ln in lines if ",stage2," in ln]
    assert all(",dot,l2,0,1.0," in ln for ln in stage2)


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip_bytes_and_metrics(full_run, splits, tmp_path):
    model, _ = full_run
    p1, p2 = tmp_path / "a.rlbd", tmp_path / "b.rlbd"
    pl.save_checkpoint(model, p1)
    loaded = pl.load_checkpoint(p1)
    pl.save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    atk = pl.eval_attacks(tiny())
    assert pl.evaluate(model, splits.test, atk) == pl.evaluate(loaded, splits.test, atk)


def test_checkpoint_lora_round_trip(stage0_model, splits, tmp_path):
    model = copy.deepcopy(stage0_model)
    pl.stage1_fare(model, tiny("model.lora_rank=2"), splits.train)
    pl.save_checkpoint(model, tmp_path / "m.rlbd")
    loaded = pl.load_checkpoint(tmp_path / "m.rlbd")
    assert loaded.encoders["image"].lora_rank == 2
    assert same_params(model, loaded)


def test_truncated_checkpoint_fails_cleanly(stage0_model, tmp_path):
    p = tmp_path / "m.rlbd"
    pl.save_checkpoint(stage0_model, p)
    data = p.read_bytes()
    for cut in (3, 20, len(data) - 8):
        bad = tmp_path / f"cut{cut}.rlbd"
        bad.write_bytes(data[:cut])
        with pytest.raises(pl.CheckpointError):
            pl.load_checkpoint(bad)


def test_version_mismatch_rejected(stage0_model, tmp_path):
    p = tmp_path / "m.rlbd"
    pl.save_checkpoint(stage0_model, p)
    data = bytearray(p.read_bytes())
    data[4:8] = (2).to_bytes(4, "little")
    p.write_bytes(bytes(data))
    with pytest.raises(pl.CheckpointError, match="version"):
        pl.load_checkpoint(p)


# --- full runs and grids ---------------------------------------------------


def test_run_is_deterministic(full_run, splits):
    _, again = pl.run_experiment(tiny(), splits)
    assert again.to_csv() == full_run[1].to_csv()


def test_stagewise_chain_matches_full_run(full_run, splits):
    cfg = tiny()
    model, m0 = pl.run_stage("stage0", cfg, splits)
    model, m1 = pl.run_stage("stage1", cfg, splits, model)
    model, m2 = pl.run_stage("stage2", cfg, splits, model)
    chained = m0.rows + m1.rows + m2.rows
    assert chained == full_run[1].rows
    assert same_params(model, full_run[0])


def test_run_stage_rejects_mismatched_modalities(stage0_model):
    cfg = parse_config(None, TINY[:4] + ['data.modalities=[{name="video",input_dim=12}]'])
    with pytest.raises(pl.PipelineError, match="modalities"):
        pl.run_stage("stage1", cfg, pl.build_data(cfg), stage0_model)


def test_grid_has_18_cells_and_validates_first():
    cells = pl.expand_grid(tiny(), {"scorer": ["dot", "scaled_dot", "cosine", "norm_euclid", "bilinear", "mlp"],
                                    "alignment": ["l1", "l2", "kl"]})
    assert len(cells) == 18
    assert len({c.config.config_hash() for c in cells}) == 18
    with pytest.raises(ConfigError, match="accepted values"):
        pl.expand_grid(tiny(), {"scorer": ["dot", "nope"]})


def test_single_cell_grid_equals_plain_run(full_run, splits):
    (cell,) = pl.run_ablation_grid(tiny(), {"scorer": ["dot"]}, splits=splits)
    assert cell.error is None
    assert cell.metrics.to_csv() == full_run[1].to_csv()


def test_grid_reruns_bitwise_and_records_failures(splits):
    axes = {"alignment": ["l1", "kl"], "stage2.lr": [0.01, 1e6], "stage2.epochs": [2]}
    first = pl.run_ablation_grid(tiny(), axes, splits=splits)
    second = pl.run_ablation_grid(tiny(), axes, splits=splits)
    assert pl.grid_csv(first) == pl.grid_csv(second)
    failed = [c for c in first if c.error]
    assert {c.overrides["stage2.lr"] for c in failed} == {1e6}
    assert all("TrainingError" in c.error for c in failed)
    assert sum(c.metrics is not None for c in first) == 2


def test_grid_cache_shares_prefix_exactly(splits):
    axes = {"lambda": [0.5]}
    cached = pl.run_ablation_grid(tiny(), axes, splits=splits)[0].metrics
    _, plain = pl.run_experiment(tiny("stage2.lam=0.5"), splits)
    assert cached.to_csv() == plain.to_csv()


def test_write_run_outputs(full_run, tmp_path):
    _, metrics = full_run
    pl.write_run_outputs(tmp_path, tiny(), metrics, {"command": "test"})
    assert (tmp_path / "metrics.csv").read_text() == metrics.to_csv()
    import json

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["library"] == "rlbind" and manifest["config"]["stage2"]["scorer"] == "dot"
    assert not list(tmp_path.glob("*.tmp*"))
