#!/usr/bin/env python3
"""Step-skipping study on a trained toy run: quality vs reverse-step count.

Expects a workdir produced by run_toy_pipeline.py; prints a coarse/refined
CD-EMD-F1 table over a ladder of reverse-step budgets.
"""

import argparse
import os
import sys
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np

from pointfill import harness


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="toy_run")
    ap.add_argument("--steps", type=int, nargs="+", default=[100, 50, 20, 10])
    args = ap.parse_args()

    manifest = harness.load_manifest(os.path.join(args.workdir, "manifest.json"))
    variants = ["full" if s >= manifest.schedule.T else s for s in args.steps]
    t0 = time.time()
    rows = harness.evaluate(manifest, variants=tuple(dict.fromkeys(variants)))
    agg = {(r["variant"], r["kind"]): r for r in rows if r.get("aggregate")}
    evals = {r["variant"]: r["denoiser_evals"] for r in rows if not r.get("aggregate")}

    print(f"{'reverse steps':>13} | {'coarse CD':>10} {'refined CD':>10} | "
          f"{'coarse EMD':>10} {'refined EMD':>11} | {'coarse F1':>9} {'refined F1':>10}")
    for steps in args.steps:
        name = "full" if steps >= manifest.schedule.T else f"accel-{steps}"
        if (name, "coarse") not in agg:
            continue
        c, r = agg[(name, "coarse")], agg[(name, "refined")]
        print(f"{evals[name]:>13} | {c['cd']:>10.2f} {r['cd']:>10.2f} | "
              f"{c['emd']:>10.3f} {r['emd']:>11.3f} | {c['f1']:>9.3f} {r['f1']:>10.3f}")
    print(f"({time.time() - t0:.0f} s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
