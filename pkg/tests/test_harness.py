import hashlib
import json
import os

import numpy as np
import pytest

from pointfill import data, harness
from pointfill.errors import ConfigError, DataError, NumericAbort
from pointfill.geometry import PointCloud
from pointfill.metrics import chamfer
from pointfill.net import denoiser, init_params, preset
from pointfill.nn import Tensor
from pointfill.schedule import build_accelerated, build_linear_schedule, oracle_eps


def _micro_manifest(tmp_path, seed=1, pairs=6, **overrides):
    ds = os.path.join(tmp_path, "ds")
    if not os.path.exists(ds):
        rng = np.random.default_rng(0)
        spec = data.DatasetSpec(n_pairs=pairs, complete_points=48, partial_points=24,
                                keep_fraction=(0.6, 0.75))
        data.save_pairs(ds, data.build_dataset(spec, rng))
    fields = dict(
        seed=seed, dataset=ds, out_dir=os.path.join(tmp_path, "run"),
        schedule=harness.ScheduleSpec(T=8, beta_1=1e-3, beta_T=0.3),
        net_preset="tiny",
        net_overrides={"denoise_levels": (48, 16, 8, 4, 2),
                       "cond_levels": (24, 12, 6, 4, 2),
                       "displacement_scale": 0.05},
        cgnet=harness.StageSpec(epochs=2, batch_size=2, eval_every=2),
        rfnet=harness.StageSpec(epochs=2, batch_size=2, eval_every=2),
        eval_pairs=2, coarse_per_pair=2, cache_accel_steps=4,
    )
    fields.update(overrides)
    return harness.RunManifest(**fields)


def _file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_manifest_json_roundtrip(tmp_path):
    m = _micro_manifest(tmp_path)
    back = harness.RunManifest.from_json(m.to_json())
    assert back == m
    sched = json.loads(m.to_json())["schedule"]
    assert set(sched) == {"T", "beta_1", "beta_T", "accel_steps", "accel_spacing"}
    with pytest.raises(ConfigError, match="manifest"):
        harness.RunManifest.from_json("{bad json")
    with pytest.raises(DataError):
        harness.load_manifest(tmp_path / "missing.json")


def test_best_checkpoint_is_argmin():
    records = [harness.CheckpointRecord(10, "a", 0.5),
               harness.CheckpointRecord(20, "b", 0.2),
               harness.CheckpointRecord(30, "c", 0.9)]
    assert harness.best_checkpoint(records).path == "b"
    with pytest.raises(ConfigError):
        harness.best_checkpoint([])


def test_generate_counts_denoiser_evaluations():
    cfg = preset("tiny")
    params = init_params(cfg, np.random.default_rng(0))
    cond = PointCloud(points=np.random.default_rng(1).uniform(-1, 1, (24, 3)))
    full = build_linear_schedule(T=100, beta_T=0.2)
    for view, expected in ((full, 100),
                           (build_accelerated(full, 50), 50),
                           (build_accelerated(full, 20), 20)):
        denoiser.reset_counters()
        _, evals = harness.generate_coarse(params, cfg, cond, view,
                                           np.random.default_rng(2))
        assert evals == expected
        assert denoiser.counters["denoise_forward"] == expected + 0


def test_generation_diverse_across_rngs():
    cfg = preset("tiny")
    params = init_params(cfg, np.random.default_rng(0))
    cond = PointCloud(points=np.random.default_rng(1).uniform(-1, 1, (24, 3)))
    view = build_accelerated(build_linear_schedule(T=50, beta_T=0.3), 10)
    a, _ = harness.generate_coarse(params, cfg, cond, view, np.random.default_rng(5))
    b, _ = harness.generate_coarse(params, cfg, cond, view, np.random.default_rng(6))
    assert chamfer(a, b) > 0.0


def test_generate_with_oracle_predictor_recovers_target():
    cfg = preset("tiny")
    params = init_params(cfg, np.random.default_rng(0))
    cond = PointCloud(points=np.random.default_rng(1).uniform(-1, 1, (24, 3)))
    full = build_linear_schedule(T=200, beta_T=0.1)
    x0 = np.random.default_rng(2).uniform(-1, 1, (cfg.denoise_levels[0], 3))
    for view, tol in ((full, 1e-8), (build_accelerated(full, 25), 1e-6)):
        abar = {view.model_step(i): view.alpha_bar_at(i) for i in range(1, view.n_steps + 1)}
        def oracle(x, t):
            return (x - np.sqrt(abar[t]) * x0) / np.sqrt(1.0 - abar[t])
        cloud, evals = harness.generate_coarse(params, cfg, cond, view,
                                               np.random.default_rng(3), predictor=oracle)
        assert evals == view.n_steps
        np.testing.assert_allclose(cloud.points, x0, atol=tol)


def test_train_cgnet_writes_records_and_best(tmp_path):
    m = _micro_manifest(tmp_path)
    records = harness.train_cgnet(m)
    assert [r.epoch for r in records] == [2]
    assert os.path.exists(os.path.join(m.out_dir, harness.CGNET_BEST))
    blob = json.load(open(os.path.join(m.out_dir, "cgnet_records.json")))
    assert len(blob["losses"]) == 2 * 2  # epochs * steps_per_epoch
    assert blob["records"][0]["eval_cd"] == records[0].eval_cd


def test_pipeline_keeps_generator_params_frozen(tmp_path):
    m = _micro_manifest(tmp_path)
    harness.train_cgnet(m)
    best = os.path.join(m.out_dir, harness.CGNET_BEST)
    digest_before = _file_hash(best)
    harness.cache_coarse(m)
    assert _file_hash(best) == digest_before
    harness.train_rfnet(m)
    assert _file_hash(best) == digest_before


def test_cache_counts_and_reproducibility(tmp_path):
    m = _micro_manifest(tmp_path)
    harness.train_cgnet(m)
    n = harness.cache_coarse(m)
    train_pairs = len(data.load_pairs(m.dataset)) - m.eval_pairs
    assert n == train_pairs * m.coarse_per_pair
    pairs = data.load_pairs(m.dataset)
    first = data.load_coarse(m.dataset, pairs[0])
    assert all(c.n == 48 for c in first)
    digests = [hashlib.sha256(c.points.tobytes()).hexdigest() for c in first]
    harness.cache_coarse(m)
    again = data.load_coarse(m.dataset, pairs[0])
    assert digests == [hashlib.sha256(c.points.tobytes()).hexdigest() for c in again]


def test_rfnet_requires_cache(tmp_path):
    m = _micro_manifest(tmp_path)
    harness.train_cgnet(m)
    with pytest.raises(DataError, match="cache"):
        harness.train_rfnet(m)


def test_training_stage_rerun_is_bit_identical(tmp_path):
    m1 = _micro_manifest(tmp_path, out_dir=os.path.join(tmp_path, "run_a"))
    m2 = _micro_manifest(tmp_path, out_dir=os.path.join(tmp_path, "run_b"))
    harness.train_cgnet(m1)
    harness.train_cgnet(m2)
    h1 = _file_hash(os.path.join(m1.out_dir, harness.CGNET_BEST))
    h2 = _file_hash(os.path.join(m2.out_dir, harness.CGNET_BEST))
    assert h1 == h2


def test_nan_loss_aborts_with_diagnostic(tmp_path, monkeypatch):
    m = _micro_manifest(tmp_path)

    def poisoned(eps_true, eps_pred):
        return Tensor(np.float64("nan"))

    monkeypatch.setattr(harness, "ddpm_loss", poisoned)
    with pytest.raises(NumericAbort, match="non-finite"):
        harness.train_cgnet(m)


def test_evaluate_produces_rows_and_jsonl(tmp_path):
    m = _micro_manifest(tmp_path)
    harness.train_cgnet(m)
    harness.cache_coarse(m)
    harness.train_rfnet(m)
    out = os.path.join(m.out_dir, "eval.jsonl")
    rows = harness.evaluate(m, variants=("full", 4), out_path=out)
    kinds = {(r["variant"], r["kind"]) for r in rows if r.get("aggregate")}
    assert kinds == {("full", "coarse"), ("full", "refined"),
                     ("accel-4", "coarse"), ("accel-4", "refined")}
    per_pair = [r for r in rows if not r.get("aggregate")]
    assert all(r["denoiser_evals"] == r["reverse_steps"] for r in per_pair)
    lines = [json.loads(line) for line in open(out)]
    assert len(lines) == len(rows)


def test_mirror_concat_pipeline_smoke(tmp_path):
    m = _micro_manifest(tmp_path, use_mirror_concat=True,
                        cgnet=harness.StageSpec(epochs=1, batch_size=2, eval_every=1))
    records = harness.train_cgnet(m)
    assert len(records) == 1
