"""Command-line interface.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
BLAS thread pinning must happen before numpy loads, so the heavy imports
live inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointfill",
                                description="point cloud completion toolkit")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS thread count (1 pins bit-reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset and a toy manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=32)
    g.add_argument("--complete-points", type=int, default=256)
    g.add_argument("--partial-points", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)

    for name, extra in (("train-cgnet", ()), ("train-rfnet", ()),
                        ("cache-coarse", ("accel",)), ("eval", ("out",))):
        q = sub.add_parser(name)
        q.add_argument("--manifest", required=True)
        q.add_argument("--seed", type=int, default=None, help="override the manifest seed")
        if "accel" in extra:
            q.add_argument("--accel-steps", type=int, default=None)
        if "out" in extra:
            q.add_argument("--out", default=None, help="JSON-lines output path")

    s = sub.add_parser("sample", help="generate coarse completions for one pair")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pair-index", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--accel-steps", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--ply", action="store_true")
    s.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("refine", help="refine a coarse cloud with the trained refiner")
    r.add_argument("--manifest", required=True)
    r.add_argument("--coarse", required=True, help="PDRC file with the coarse cloud")
    r.add_argument("--pair-index", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--ply", action="store_true")

    f = sub.add_parser("fix-scale", help="scale-consistency check of a partial/complete pair")
    f.add_argument("--partial", required=True)
    f.add_argument("--complete", required=True)

    b = sub.add_parser("box-sample", help="sample a bounding-box conditioner cloud")
    b.add_argument("--boxes", required=True, help="JSON list of {center, half, rotation?}")
    b.add_argument("--count", type=int, default=600)
    b.add_argument("--out", required=True)
    b.add_argument("--ply", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)

    from .errors import ConfigError, DataError, NumericAbort, PointfillError

    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4
    except PointfillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    import numpy as np

    from . import cloudio, data, harness, metrics
    from .geometry import PointCloud

    def write_cloud(path_base, cloud, ply):
        cloudio.write_pdrc(path_base + ".pdrc", cloud)
        if ply:
            cloudio.write_ply(path_base + ".ply", cloud)

    if args.command == "gen-data":
        rng = np.random.default_rng(args.seed)
        spec = data.DatasetSpec(n_pairs=args.pairs, complete_points=args.complete_points,
                                partial_points=args.partial_points)
        pairs = data.build_dataset(spec, rng)
        data.save_pairs(args.out, pairs)
        manifest = harness.RunManifest(seed=args.seed, dataset=args.out,
                                       out_dir=os.path.join(args.out, "run"))
        with open(os.path.join(args.out, "toy_manifest.json"), "w") as f:
            f.write(manifest.to_json())
        print(f"wrote {len(pairs)} pairs to {args.out}")
        return 0

    manifest = None
    if getattr(args, "manifest", None):
        manifest = harness.load_manifest(args.manifest)
        if getattr(args, "seed", None) is not None:
            manifest.seed = args.seed
        manifest.threads = args.threads

    if args.command == "train-cgnet":
        records = harness.train_cgnet(manifest)
        best = harness.best_checkpoint(records)
        print(f"best checkpoint epoch {best.epoch}: held-out CD {best.eval_cd:.6f}")
        return 0

    if args.command == "cache-coarse":
        if args.accel_steps is not None:
            manifest.cache_accel_steps = args.accel_steps
        n = harness.cache_coarse(manifest)
        print(f"cached {n} coarse clouds")
        return 0

    if args.command == "train-rfnet":
        records = harness.train_rfnet(manifest)
        best = harness.best_checkpoint(records)
        print(f"best checkpoint epoch {best.epoch}: refined held-out CD {best.eval_cd:.6f}")
        return 0

    if args.command == "sample":
        params, cfg = harness.load_cgnet(manifest)
        pairs = data.load_pairs(manifest.dataset)
        pair = pairs[args.pair_index]
        view = manifest.schedule.build_view(args.accel_steps)
        os.makedirs(args.out, exist_ok=True)
        seed = manifest.seed if args.seed is None else args.seed
        for k in range(args.count):
            rng = np.random.default_rng([seed, 7, args.pair_index, k])
            cloud, evals = harness.generate_coarse(
                params, cfg, harness._conditioner(manifest, pair.partial), view, rng)
            write_cloud(os.path.join(args.out, f"{pair.key}_sample{k:02d}"), cloud, args.ply)
        print(f"sampled {args.count} clouds ({evals} denoiser evaluations each)")
        return 0

    if args.command == "refine":
        coarse = cloudio.read_pdrc(args.coarse)
        pairs = data.load_pairs(manifest.dataset)
        pair = pairs[args.pair_index]
        refined, dense = harness.refine_cloud(manifest, coarse, pair.partial)
        os.makedirs(args.out, exist_ok=True)
        write_cloud(os.path.join(args.out, f"{pair.key}_refined"), refined, args.ply)
        write_cloud(os.path.join(args.out, f"{pair.key}_dense"), dense, args.ply)
        print(f"refined {coarse.n} points -> dense {dense.n}")
        return 0

    if args.command == "eval":
        out_path = args.out or os.path.join(manifest.out_dir, "eval.jsonl")
        rows = harness.evaluate(manifest, out_path=out_path)
        for row in rows:
            if row.get("aggregate"):
                print(f"{row['variant']:>9} {row['kind']:>8}: "
                      f"CD {row['cd']:8.3f}  EMD {row['emd']:7.3f}  F1 {row['f1']:.3f}")
        print(f"wrote {out_path}")
        return 0

    if args.command == "fix-scale":
        partial = _read_any(cloudio, args.partial)
        complete = _read_any(cloudio, args.complete)
        delta, inconsistent = metrics.fit_scale(partial, complete)
        print(json.dumps({"delta": delta, "inconsistent": inconsistent}))
        return 0

    if args.command == "box-sample":
        with open(args.boxes) as f:
            raw = json.load(f)
        boxes = [data.Box(center=np.array(b["center"], dtype=float),
                          half=np.array(b["half"], dtype=float),
                          rotation=None if "rotation" not in b
                          else np.array(b["rotation"], dtype=float))
                 for b in raw]
        rng = np.random.default_rng(args.seed)
        cloud = data.sample_box_conditioner(boxes, args.count, rng)
        base, ext = os.path.splitext(args.out)
        cloudio.write_pdrc(base + ".pdrc", cloud)
        if args.ply:
            cloudio.write_ply(base + ".ply", cloud)
        print(f"sampled {cloud.n} box-surface points")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _read_any(cloudio, path):
    if path.endswith(".ply"):
        return cloudio.read_ply(path)
    return cloudio.read_pdrc(path)


if __name__ == "__main__":
    sys.exit(main())
