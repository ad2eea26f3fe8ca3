"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end toy run (criteria 7 and 8) trains both networks once per
session; everything else is self-contained and fast.
"""

import itertools
import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from pointfill import data, harness
from pointfill.geometry import PointCloud, ball_query
from pointfill.metrics import chamfer, emd_approx, emd_exact, f1_score, fit_scale
from pointfill.net import (
    cgnet_forward,
    ft_forward,
    init_params,
    preset,
    sa_forward,
)
from pointfill.net.modules import with_coords
from pointfill.nn import Tape, backward, mse_loss
from pointfill.schedule import (
    build_accelerated,
    build_linear_schedule,
    chain_forward_step,
    oracle_eps,
    reverse_step,
)


@contextmanager
def criterion(number, label):
    try:
        yield
    except BaseException:
        print(f"criterion {number} ({label}): FAIL")
        raise
    print(f"criterion {number} ({label}): PASS")


# ---------------------------------------------------------------------------
# 1. schedule correctness
# ---------------------------------------------------------------------------


def test_criterion_1_schedule_correctness():
    with criterion(1, "schedule correctness"):
        start = time.monotonic()
        sched = build_linear_schedule(T=1000, beta_1=1e-4, beta_T=2e-2)
        assert sched.alpha_bar_at(1000) < 1e-4
        assert sched.sigma_at(1) == 0.0
        x0 = np.array([0.7, -0.4, 0.2])
        for t in (10, 100, 1000):
            gen = np.random.default_rng([1, t])
            x = np.broadcast_to(x0, (10_000, 3)).copy()
            for step in range(1, t + 1):
                x = chain_forward_step(x, step, gen.standard_normal((10_000, 3)), sched)
            abar = sched.alpha_bar_at(t)
            se = np.sqrt((1.0 - abar) / 10_000)
            assert (np.abs(x.mean(axis=0) - np.sqrt(abar) * x0) < 3.0 * se).all()
            assert abs(x.var(axis=0).mean() - (1.0 - abar)) < 0.05 * (1.0 - abar)
        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 2. oracle inversion
# ---------------------------------------------------------------------------


def test_criterion_2_oracle_inversion():
    with criterion(2, "oracle inversion"):
        start = time.monotonic()
        sched = build_linear_schedule()
        gen = np.random.default_rng(2)
        x0 = gen.uniform(-1, 1, (64, 3))
        for view, tol in ((sched, 1e-8),
                          (build_accelerated(sched, 50), 1e-6),
                          (build_accelerated(sched, 20), 1e-6),
                          (build_accelerated(sched, 10), 1e-6)):
            x = gen.standard_normal((64, 3))
            for i in range(view.n_steps, 0, -1):
                eps = oracle_eps(x, x0, i, view)
                z = gen.standard_normal((64, 3)) if i > 1 else None
                x = reverse_step(x, i, eps, z, view)
            assert np.abs(x - x0).max() <= tol
        elapsed = time.monotonic() - start
        assert elapsed < 5.0, f"took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 3. gradient fidelity
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_fidelity():
    with criterion(3, "end-to-end gradient fidelity"):
        start = time.monotonic()
        cfg = preset("tiny")
        params = init_params(cfg, np.random.default_rng(42))
        gen = np.random.default_rng(33)
        x = gen.standard_normal((32, 3))
        c = PointCloud(points=gen.uniform(-1, 1, (24, 3)))
        target = gen.standard_normal((32, 3))

        def loss_value():
            return float(mse_loss(cgnet_forward(x, c, 6, params, cfg), target).data)

        with Tape():
            loss = mse_loss(cgnet_forward(x, c, 6, params, cfg), target)
        backward(loss)
        analytic = {k: p.grad.copy() for k, p in params.items()}

        h = 1e-5
        worst = 0.0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for j in gen.choice(flat.size, size=min(2, flat.size), replace=False):
                orig = flat[j]
                flat[j] = orig + h
                fp = loss_value()
                flat[j] = orig - h
                fm = loss_value()
                flat[j] = orig
                fd = (fp - fm) / (2.0 * h)
                an = analytic[name].reshape(-1)[j]
                worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-6))
        assert worst < 1e-4, f"max relative gradient error {worst:.2e}"
        elapsed = time.monotonic() - start
        assert elapsed < 60.0, f"took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 4. equivariance
# ---------------------------------------------------------------------------


def test_criterion_4_equivariance():
    with criterion(4, "permutation equivariance/invariance"):
        cfg = preset("tiny")
        params = init_params(cfg, np.random.default_rng(4))
        for trial in range(20):
            gen = np.random.default_rng(4000 + trial)
            x = gen.standard_normal((32, 3))
            c = PointCloud(points=gen.uniform(-1, 1, (24, 3)))
            base = cgnet_forward(x, c, 5, params, cfg).data
            perm = gen.permutation(32)
            permuted = cgnet_forward(x[perm], c, 5, params, cfg).data
            assert np.abs(base[perm] - permuted).max() < 1e-9
            cperm = gen.permutation(24)
            shuffled = cgnet_forward(x, PointCloud(points=c.points[cperm]), 5,
                                     params, cfg).data
            assert np.abs(base - shuffled).max() < 1e-9


# ---------------------------------------------------------------------------
# 5. metric oracles
# ---------------------------------------------------------------------------


def test_criterion_5_metric_oracles():
    with criterion(5, "metric oracles"):
        gen = np.random.default_rng(5)
        for _ in range(100):
            n = int(gen.integers(1, 7))
            v = gen.uniform(-1, 1, (n, 3))
            x = gen.uniform(-1, 1, (n, 3))
            best = min(
                sum(np.linalg.norm(v[i] - x[p[i]]) for i in range(n))
                for p in itertools.permutations(range(n))
            )
            assert emd_exact(v, x) == pytest.approx(best, rel=1e-10)
        # hand values
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 2.0
        assert f1_score(np.array([[0.0, 0, 0], [1.0, 0, 0]]),
                        np.array([[0.0, 0, 0]]), rho=0.5) == pytest.approx(2 / 3)
        v = gen.uniform(-1, 1, (128, 3))
        x = gen.uniform(-1, 1, (128, 3))
        exact = emd_exact(v, x)
        approx = emd_approx(v, x)
        assert exact - 1e-9 <= approx <= 1.01 * exact


# ---------------------------------------------------------------------------
# 6. scale fix
# ---------------------------------------------------------------------------


def test_criterion_6_scale_fix():
    with criterion(6, "scale-consistency fix"):
        gen = np.random.default_rng(6)
        for trial in range(50):
            delta_true = 0.7 if trial % 2 == 0 else 1.3
            x = gen.uniform(-1, 1, (70, 3))
            subset = x[gen.choice(70, size=28, replace=False)]
            c = subset / delta_true
            delta, inconsistent = fit_scale(c, x)
            assert abs(delta - delta_true) <= 0.01 * delta_true, trial
            assert inconsistent is True


# ---------------------------------------------------------------------------
# 7 + 8. end-to-end toy completion and acceleration protocol
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Train both networks once on the synthetic dataset and evaluate the
    full / 50-step / 20-step samplers plus an untrained baseline."""
    root = tmp_path_factory.mktemp("toy")
    ds = os.path.join(root, "dataset")
    out = os.path.join(root, "run")
    manifest = harness.toy_manifest(ds, out, seed=7)
    start = time.monotonic()
    data.save_pairs(ds, data.build_dataset(data.DatasetSpec(n_pairs=26),
                                           np.random.default_rng(7)))
    harness.train_cgnet(manifest)
    harness.cache_coarse(manifest)
    harness.train_rfnet(manifest)
    rows = harness.evaluate(manifest, out_path=os.path.join(out, "eval.jsonl"))

    cfg = harness._net_config(manifest, refiner=False)
    untrained = init_params(cfg, np.random.default_rng(manifest.seed + 999))
    _, held = harness._load_split(manifest)
    view = manifest.schedule.build_view()
    base_cds = []
    for j, pair in enumerate(held):
        cloud, _ = harness.generate_coarse(untrained, cfg, pair.partial, view,
                                           harness._rng(manifest, 92, j),
                                           clip=manifest.sample_clip)
        base_cds.append(chamfer(cloud, pair.complete))
    losses = json.load(open(os.path.join(out, "cgnet_records.json")))["losses"]
    return {
        "manifest": manifest,
        "rows": rows,
        "agg": {(r["variant"], r["kind"]): r for r in rows if r.get("aggregate")},
        "untrained_cd": float(np.mean(base_cds)) * 1e4,
        "losses": losses,
        "elapsed": time.monotonic() - start,
    }


def test_criterion_7_end_to_end_toy_completion(toy_run):
    with criterion(7, "end-to-end toy completion"):
        agg = toy_run["agg"]
        coarse = agg[("full", "coarse")]
        refined = agg[("full", "refined")]
        assert coarse["cd"] <= 0.5 * toy_run["untrained_cd"], (
            f"coarse CD {coarse['cd']:.1f} vs untrained {toy_run['untrained_cd']:.1f}")
        assert refined["cd"] <= 0.7 * coarse["cd"], (
            f"refined CD {refined['cd']:.2f} vs coarse {coarse['cd']:.2f}")
        assert refined["emd"] < coarse["emd"], "EMD did not improve alongside"
        losses = toy_run["losses"]
        # a zero-initialized head predicts no noise at first: |eps|^2 / 3N ~= 1
        assert 0.8 <= losses[0] <= 1.2, f"init loss {losses[0]:.2f}"
        k = max(1, len(losses) // 10)
        drop = np.mean(losses[:k]) / np.mean(losses[-k:])
        assert drop >= 5.0, f"training loss only dropped {drop:.1f}x"
        assert toy_run["elapsed"] < 900.0, f"pipeline took {toy_run['elapsed']:.0f} s"


def test_criterion_8_acceleration_protocol(toy_run):
    with criterion(8, "acceleration protocol"):
        rows = toy_run["rows"]
        agg = toy_run["agg"]
        for steps in (50, 20):
            per_pair = [r for r in rows
                        if r.get("variant") == f"accel-{steps}" and not r.get("aggregate")]
            assert per_pair and all(r["denoiser_evals"] == steps for r in per_pair)
        full = [r for r in rows if r.get("variant") == "full" and not r.get("aggregate")]
        assert all(r["denoiser_evals"] == harness.TOY_T for r in full)
        cd_full = agg[("full", "coarse")]["cd"]
        cd_50 = agg[("accel-50", "coarse")]["cd"]
        cd_20 = agg[("accel-20", "coarse")]["cd"]
        assert cd_full < cd_50 < cd_20, f"coarse ordering broken: {cd_full:.1f}, "\
                                        f"{cd_50:.1f}, {cd_20:.1f}"
        rf_full = agg[("full", "refined")]["cd"]
        for steps in (50, 20):
            rf = agg[(f"accel-{steps}", "refined")]["cd"]
            assert rf <= 1.25 * rf_full, (
                f"refined CD after {steps}-step sampling {rf:.2f} "
                f"vs full {rf_full:.2f}")


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    with criterion(9, "bit-exact reruns"):
        ds = os.path.join(tmp_path, "ds")
        data.save_pairs(ds, data.build_dataset(
            data.DatasetSpec(n_pairs=6, complete_points=48, partial_points=24,
                             keep_fraction=(0.6, 0.75)),
            np.random.default_rng(0)))

        def manifest(out):
            return harness.RunManifest(
                seed=11, dataset=ds, out_dir=os.path.join(tmp_path, out),
                schedule=harness.ScheduleSpec(T=8, beta_1=1e-3, beta_T=0.3),
                net_preset="tiny",
                net_overrides={"denoise_levels": (48, 16, 8, 4, 2),
                               "cond_levels": (24, 12, 6, 4, 2),
                               "displacement_scale": 0.05},
                cgnet=harness.StageSpec(epochs=2, batch_size=2, eval_every=2),
                rfnet=harness.StageSpec(epochs=2, batch_size=2, eval_every=2),
                eval_pairs=2, coarse_per_pair=2, cache_accel_steps=4, threads=1,
            )

        blobs = {}
        for tag in ("a", "b"):
            m = manifest(f"run_{tag}")
            harness.train_cgnet(m)
            harness.cache_coarse(m)
            harness.train_rfnet(m)
            harness.evaluate(m, variants=("full", 4),
                             out_path=os.path.join(m.out_dir, "eval.jsonl"))
            blobs[tag] = {
                name: open(os.path.join(m.out_dir, name), "rb").read()
                for name in (harness.CGNET_BEST, harness.RFNET_BEST, "eval.jsonl")
            }
        assert blobs["a"] == blobs["b"]


# ---------------------------------------------------------------------------
# 10. dummy-neighbor semantics
# ---------------------------------------------------------------------------


def test_criterion_10_dummy_neighbor_semantics():
    with criterion(10, "dummy-neighbor attention semantics"):
        cfg = preset("tiny")
        params = init_params(cfg, np.random.default_rng(10))
        gen = np.random.default_rng(1010)
        checked_dummy_slots = 0
        for trial in range(1000):
            n = int(gen.integers(6, 20))
            pts = gen.uniform(-1, 1, (n, 3))
            radius = float(gen.uniform(0.05, 0.6))
            if trial % 2 == 0:
                out = sa_forward(pts, with_coords(None, pts), max(2, n // 2), radius,
                                 params, "cond.sa1", cfg, gen)
            else:
                den = gen.uniform(-1.5, 1.5, (int(gen.integers(4, 12)), 3))
                out = ft_forward(pts, with_coords(None, pts), den,
                                 with_coords(None, den), radius, params, "ft1",
                                 cfg, gen)
            w = out.att_weights.data
            dummy = out.table.dummy_mask
            assert (w[dummy] == 0.0).all()
            checked_dummy_slots += int(dummy.sum())
            sums = w.sum(axis=1)
            real_any = out.table.real_mask.any(axis=1)
            if real_any.any():
                assert np.abs(sums[real_any] - 1.0).max() <= 1e-12
            assert (sums[~real_any] == 0.0).all()
        assert checked_dummy_slots > 1000  # the randomization produced dummies
