import json
import os

import numpy as np
import pytest

from pointfill import cloudio, data, harness
from pointfill.cli import main
from pointfill.geometry import PointCloud


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + micro manifest + one trained generator/refiner, shared by
    the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = os.path.join(root, "ds")
    assert main(["gen-data", "--out", ds, "--pairs", "6",
                 "--complete-points", "48", "--partial-points", "24",
                 "--seed", "0"]) == 0
    manifest = harness.RunManifest(
        seed=3, dataset=ds, out_dir=os.path.join(root, "run"),
        schedule=harness.ScheduleSpec(T=8, beta_1=1e-3, beta_T=0.3),
        net_preset="tiny",
        net_overrides={"denoise_levels": (48, 16, 8, 4, 2),
                       "cond_levels": (24, 12, 6, 4, 2),
                       "displacement_scale": 0.05},
        cgnet=harness.StageSpec(epochs=1, batch_size=2, eval_every=1),
        rfnet=harness.StageSpec(epochs=1, batch_size=2, eval_every=1),
        eval_pairs=2, coarse_per_pair=2, cache_accel_steps=4,
    )
    mpath = os.path.join(root, "manifest.json")
    with open(mpath, "w") as f:
        f.write(manifest.to_json())
    assert main(["train-cgnet", "--manifest", mpath]) == 0
    assert main(["cache-coarse", "--manifest", mpath]) == 0
    assert main(["train-rfnet", "--manifest", mpath]) == 0
    return root, mpath, manifest


def test_gen_data_writes_dataset_and_template(tmp_path):
    out = os.path.join(tmp_path, "ds")
    assert main(["gen-data", "--out", out, "--pairs", "4",
                 "--complete-points", "48", "--partial-points", "24"]) == 0
    pairs = data.load_pairs(out)
    assert len(pairs) == 4
    assert os.path.exists(os.path.join(out, "toy_manifest.json"))


def test_sample_and_refine_roundtrip(workspace, tmp_path):
    root, mpath, manifest = workspace
    out = os.path.join(tmp_path, "samples")
    assert main(["sample", "--manifest", mpath, "--pair-index", "0",
                 "--accel-steps", "4", "--out", out, "--ply"]) == 0
    files = sorted(os.listdir(out))
    assert any(f.endswith(".pdrc") for f in files)
    assert any(f.endswith(".ply") for f in files)
    coarse_file = os.path.join(out, [f for f in files if f.endswith(".pdrc")][0])
    refined_dir = os.path.join(tmp_path, "refined")
    assert main(["refine", "--manifest", mpath, "--coarse", coarse_file,
                 "--pair-index", "0", "--out", refined_dir]) == 0
    refined_files = sorted(os.listdir(refined_dir))
    assert any("refined" in f for f in refined_files)
    assert any("dense" in f for f in refined_files)


def test_sample_is_seed_reproducible(workspace, tmp_path):
    root, mpath, _ = workspace
    out_a = os.path.join(tmp_path, "a")
    out_b = os.path.join(tmp_path, "b")
    for out in (out_a, out_b):
        assert main(["sample", "--manifest", mpath, "--pair-index", "1",
                     "--accel-steps", "4", "--out", out, "--seed", "9"]) == 0
    (fa,) = [f for f in os.listdir(out_a) if f.endswith(".pdrc")]
    a = open(os.path.join(out_a, fa), "rb").read()
    b = open(os.path.join(out_b, fa), "rb").read()
    assert a == b


def test_eval_emits_aggregate_rows(workspace, tmp_path):
    root, mpath, _ = workspace
    out = os.path.join(tmp_path, "eval.jsonl")
    assert main(["eval", "--manifest", mpath, "--out", out]) == 0
    rows = [json.loads(line) for line in open(out)]
    assert any(r.get("aggregate") for r in rows)


def test_fix_scale_command(tmp_path, rng):
    complete = PointCloud(points=rng.uniform(-1, 1, (60, 3)))
    partial = PointCloud(points=complete.points[:20] / 1.3)
    p1 = os.path.join(tmp_path, "partial.pdrc")
    p2 = os.path.join(tmp_path, "complete.pdrc")
    cloudio.write_pdrc(p1, partial)
    cloudio.write_pdrc(p2, complete)
    assert main(["fix-scale", "--partial", p1, "--complete", p2]) == 0


def test_box_sample_command(tmp_path):
    boxes = [{"center": [0, 0, 0], "half": [0.5, 0.5, 0.5]}]
    bpath = os.path.join(tmp_path, "boxes.json")
    with open(bpath, "w") as f:
        json.dump(boxes, f)
    out = os.path.join(tmp_path, "box")
    assert main(["box-sample", "--boxes", bpath, "--count", "120",
                 "--out", out, "--ply"]) == 0
    cloud = cloudio.read_pdrc(out + ".pdrc")
    assert cloud.n == 120


def test_exit_codes():
    # data error: missing manifest
    assert main(["train-cgnet", "--manifest", "/nonexistent/manifest.json"]) == 3
    # data error: eval without training artifacts comes back as 3 too
    # config error: malformed manifest
    import tempfile
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        f.write("{\"seed\": 1}")
        path = f.name
    assert main(["train-cgnet", "--manifest", path]) == 2
    os.unlink(path)


def test_numeric_abort_exit_code(tmp_path, monkeypatch):
    ds = os.path.join(tmp_path, "ds")
    assert main(["gen-data", "--out", ds, "--pairs", "4",
                 "--complete-points", "48", "--partial-points", "24"]) == 0
    manifest = harness.RunManifest(
        seed=3, dataset=ds, out_dir=os.path.join(tmp_path, "run"),
        schedule=harness.ScheduleSpec(T=8),
        net_preset="tiny",
        net_overrides={"denoise_levels": (48, 16, 8, 4, 2),
                       "cond_levels": (24, 12, 6, 4, 2)},
        cgnet=harness.StageSpec(epochs=1, batch_size=2, eval_every=1),
        eval_pairs=1,
    )
    mpath = os.path.join(tmp_path, "m.json")
    with open(mpath, "w") as f:
        f.write(manifest.to_json())
    from pointfill.nn import Tensor
    monkeypatch.setattr(harness, "ddpm_loss",
                        lambda a, b: Tensor(np.float64("nan")))
    assert main(["train-cgnet", "--manifest", mpath]) == 4
