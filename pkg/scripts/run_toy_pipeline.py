#!/usr/bin/env python3
"""Run the full toy completion experiment and print the quality summary.

Generates the synthetic dataset, trains the generator and the refiner,
caches coarse clouds, evaluates full / 50-step / 20-step sampling, and
compares everything against an untrained-generator baseline.
"""

import argparse
import json
import os
import sys
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np

from pointfill import data, harness
from pointfill.metrics import chamfer
from pointfill.net import init_params


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="toy_run")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--skip-existing", action="store_true",
                    help="reuse dataset/checkpoints already in workdir")
    args = ap.parse_args()

    ds = os.path.join(args.workdir, "dataset")
    out = os.path.join(args.workdir, "run")
    manifest = harness.toy_manifest(ds, out, seed=args.seed)

    stamps = {}

    def stage(name, fn, done_marker=None):
        if args.skip_existing and done_marker and os.path.exists(done_marker):
            print(f"[{name}] skipped (exists)")
            return None
        t0 = time.time()
        result = fn()
        stamps[name] = time.time() - t0
        print(f"[{name}] {stamps[name]:.1f} s")
        return result

    if not os.path.exists(os.path.join(ds, "manifest.json")):
        stage("gen-data", lambda: data.save_pairs(
            ds, data.build_dataset(data.DatasetSpec(n_pairs=26), np.random.default_rng(args.seed))))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(args.workdir, "manifest.json"), "w") as f:
        f.write(manifest.to_json())

    stage("train-cgnet", lambda: harness.train_cgnet(manifest),
          os.path.join(out, harness.CGNET_BEST))
    stage("cache-coarse", lambda: harness.cache_coarse(manifest))
    stage("train-rfnet", lambda: harness.train_rfnet(manifest),
          os.path.join(out, harness.RFNET_BEST))
    rows = stage("eval", lambda: harness.evaluate(
        manifest, out_path=os.path.join(out, "eval.jsonl")))

    # untrained-generator baseline on the same held-out pairs
    def untrained_cd():
        cfg = harness._net_config(manifest, refiner=False)
        params = init_params(cfg, np.random.default_rng(manifest.seed + 999))
        _, held = harness._load_split(manifest)
        view = manifest.schedule.build_view()
        cds = []
        for j, pair in enumerate(held):
            cloud, _ = harness.generate_coarse(
                params, cfg, pair.partial, view, harness._rng(manifest, 92, j),
                clip=manifest.sample_clip)
            cds.append(chamfer(cloud, pair.complete))
        return float(np.mean(cds)) * 1e4

    base_cd = stage("untrained-baseline", untrained_cd)

    agg = {(r["variant"], r["kind"]): r for r in rows if r.get("aggregate")}
    print("\n=== summary (CD x 1e4, EMD x 1e2) ===")
    print(f"untrained full-schedule coarse CD: {base_cd:.1f}")
    for key, row in agg.items():
        print(f"{key[0]:>9} {key[1]:>8}: CD {row['cd']:10.2f}  EMD {row['emd']:8.3f}  "
              f"F1 {row['f1']:.3f}")
    losses = json.load(open(os.path.join(out, "cgnet_records.json")))["losses"]
    k = max(1, len(losses) // 10)
    print(f"cgnet loss: first-10% mean {np.mean(losses[:k]):.3f} -> "
          f"last-10% mean {np.mean(losses[-k:]):.3f}")
    full_coarse = agg[("full", "coarse")]["cd"]
    full_refined = agg[("full", "refined")]["cd"]
    print(f"\ncoarse vs untrained: {full_coarse / base_cd:.3f} (want <= 0.5)")
    print(f"refined vs coarse:   {full_refined / full_coarse:.3f} (want <= 0.7)")
    for steps in (50, 20):
        row = agg.get((f"accel-{steps}", "refined"))
        if row:
            print(f"refined after {steps}-step vs full refined: "
                  f"{row['cd'] / full_refined:.3f} (want <= 1.25)")
    order = [agg[(v, "coarse")]["cd"] for v in ("full", "accel-50", "accel-20")
             if (v, "coarse") in agg]
    print(f"coarse CD ordering full < 50 < 20: {order} -> "
          f"{all(a < b for a, b in zip(order, order[1:]))}")
    print(f"\ntotal time: {sum(stamps.values()):.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
