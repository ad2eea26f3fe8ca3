"""End-to-end orchestration: training, sampling, caching, evaluation.

A RunManifest plus the dataset fully determines every stage; all randomness
flows from named substreams of the manifest seed, so any stage rerun with the
same manifest and single-threaded math is bit-reproducible.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as data_mod
from . import nn
from .errors import ConfigError, DataError, NumericAbort
from .geometry import PointCloud
from .metrics import chamfer, chamfer_loss, ddpm_loss, emd_approx, emd_exact, f1_score
from .metrics import EMD_EXACT_MAX, F1_RHO_DEFAULT
from .net import (
    DenoiserConfig,
    denoise_forward,
    encode_condition,
    init_params,
    params_from_arrays,
    preset,
    rfnet_forward,
)
from .net import cgnet_forward
from .nn import Adam, Tape, backward, load_params, save_params
from .schedule import (
    DiffusionSchedule,
    build_accelerated,
    build_linear_schedule,
    forward_sample,
    reverse_step,
)

CGNET_BEST = "cgnet_best.pdrk"
RFNET_BEST = "rfnet_best.pdrk"

TOY_T = 100
TOY_BETA_T = 0.15    # near-latent terminal marginal with tolerable per-step noise


@dataclass
class ScheduleSpec:
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 2e-2
    accel_steps: int | None = None
    accel_spacing: str = "linear"

    def build(self) -> DiffusionSchedule:
        return build_linear_schedule(self.T, self.beta_1, self.beta_T)

    def build_view(self, accel_steps=None) -> DiffusionSchedule:
        full = self.build()
        steps = accel_steps if accel_steps is not None else self.accel_steps
        if steps is None or steps >= self.T:
            return full
        return build_accelerated(full, steps, self.accel_spacing)


@dataclass
class OptimSpec:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class StageSpec:
    epochs: int = 100
    batch_size: int = 4
    eval_every: int = 50


@dataclass
class RunManifest:
    seed: int
    dataset: str
    out_dir: str
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    net_preset: str = "desk"
    net_overrides: dict = field(default_factory=dict)
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    cgnet: StageSpec = field(default_factory=StageSpec)
    rfnet: StageSpec = field(default_factory=StageSpec)
    augment_cgnet: str = "generator"
    augment_rfnet: str = "refiner"
    eval_pairs: int = 8
    coarse_per_pair: int = 10
    cache_accel_steps: int | None = None
    sample_clip: float | None = None   # clamp the implied clean cloud while sampling
    use_mirror_concat: bool = False
    threads: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        try:
            raw = json.loads(text)
            raw["schedule"] = ScheduleSpec(**raw.get("schedule", {}))
            raw["optimizer"] = OptimSpec(**raw.get("optimizer", {}))
            raw["cgnet"] = StageSpec(**raw.get("cgnet", {}))
            raw["rfnet"] = StageSpec(**raw.get("rfnet", {}))
            # JSON has no tuples; the net config wants them back
            raw["net_overrides"] = {
                k: tuple(v) if isinstance(v, list) else v
                for k, v in raw.get("net_overrides", {}).items()
            }
            return cls(**raw)
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ConfigError(f"malformed run manifest: {exc}") from exc


def load_manifest(path) -> RunManifest:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        return RunManifest.from_json(f.read())


def toy_manifest(dataset: str, out_dir: str, seed: int = 7) -> RunManifest:
    """The minutes-scale reference run: 256-point shapes, a shortened
    100-step schedule, the thin network preset, and a refinement scale large
    enough to matter at this coarse quality level."""
    return RunManifest(
        seed=seed,
        dataset=dataset,
        out_dir=out_dir,
        schedule=ScheduleSpec(T=TOY_T, beta_1=1e-4, beta_T=TOY_BETA_T),
        net_preset="desk-lite",
        net_overrides={"displacement_scale": 0.2},
        optimizer=OptimSpec(lr=2e-3),
        cgnet=StageSpec(epochs=120, batch_size=4, eval_every=60),
        rfnet=StageSpec(epochs=144, batch_size=4, eval_every=72),
        # at this budget underfitting, not overfitting, is the failure mode,
        # so the generator also trains with the mild magnitudes
        augment_cgnet="refiner",
        eval_pairs=6,
        coarse_per_pair=10,
        cache_accel_steps=10,
        sample_clip=1.0,
    )


@dataclass
class CheckpointRecord:
    epoch: int
    path: str
    eval_cd: float


def best_checkpoint(records: list[CheckpointRecord]) -> CheckpointRecord:
    """The recorded checkpoint with the lowest held-out CD."""
    if not records:
        raise ConfigError("no checkpoint records to choose from")
    return min(records, key=lambda r: r.eval_cd)


def _rng(manifest: RunManifest, *key: int) -> np.random.Generator:
    return np.random.default_rng([manifest.seed, *key])


def _net_config(manifest: RunManifest, refiner: bool) -> DenoiserConfig:
    overrides = dict(manifest.net_overrides)
    overrides["use_step_embedding"] = not refiner
    if manifest.use_mirror_concat:
        overrides["cond_label_channel"] = True
    return preset(manifest.net_preset, **overrides)


def _load_split(manifest: RunManifest):
    pairs = data_mod.load_pairs(manifest.dataset)
    if len(pairs) <= manifest.eval_pairs:
        raise DataError(
            f"dataset has {len(pairs)} pairs, need more than eval_pairs={manifest.eval_pairs}"
        )
    return pairs[: -manifest.eval_pairs], pairs[-manifest.eval_pairs:]


def _conditioner(manifest: RunManifest, partial: PointCloud) -> PointCloud:
    if manifest.use_mirror_concat:
        return data_mod.mirror_concat(partial)
    return partial


def _check_finite(loss_value: float, stage: str, where: str):
    if not math.isfinite(loss_value):
        raise NumericAbort(
            f"{stage}: non-finite loss ({loss_value}) at {where}; "
            "the last saved checkpoint is retained"
        )


def _zero_head(params):
    """Start training from a zero output head: the noise estimate (and the
    refinement displacement) begin at exactly zero instead of init noise."""
    for name in ("head.l2.w", "head.l2.b"):
        params[name].data[...] = 0.0


def _stratified_steps(rng, T: int, n: int) -> list[int]:
    """n diffusion steps, one per equal stratum of 1..T, in shuffled order.

    Marginally each sample's step is still uniform over 1..T; stratifying the
    batch just cuts the variance of the loss estimate.
    """
    u = (np.arange(n) + rng.uniform(size=n)) / n
    ts = np.minimum((u * T).astype(np.int64) + 1, T)
    return [int(t) for t in rng.permutation(ts)]


def train_cgnet(manifest: RunManifest) -> list[CheckpointRecord]:
    """Train the noise predictor; checkpoints plus held-out CD every
    eval_every epochs, best checkpoint copied to cgnet_best.pdrk."""
    train, held = _load_split(manifest)
    cfg = _net_config(manifest, refiner=False)
    sched = manifest.schedule.build()
    params = init_params(cfg, _rng(manifest, 1))
    _zero_head(params)
    adam = Adam(params, manifest.optimizer.lr, manifest.optimizer.beta1,
                manifest.optimizer.beta2, manifest.optimizer.eps)
    rng = _rng(manifest, 2)
    aug = data_mod.AUGMENT_PRESETS[manifest.augment_cgnet]
    os.makedirs(manifest.out_dir, exist_ok=True)

    records = []
    losses = []
    stage = manifest.cgnet
    n_complete = cfg.denoise_levels[0]
    for epoch in range(1, stage.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), stage.batch_size):
            chunk = order[start:start + stage.batch_size]
            adam.zero_grad()
            steps = _stratified_steps(rng, sched.T, len(chunk))
            with Tape():
                total = None
                for t, i in zip(steps, chunk):
                    pair = data_mod.augment(train[i], aug, rng)
                    cond = _conditioner(manifest, pair.partial)
                    eps = rng.standard_normal((n_complete, 3))
                    x_t = forward_sample(pair.complete.points, t, eps, sched)
                    pred = cgnet_forward(x_t, cond, t, params, cfg)
                    term = ddpm_loss(eps, pred)
                    total = term if total is None else nn.add(total, term)
                loss = nn.mul(total, 1.0 / len(chunk))
                value = float(loss.data)
                _check_finite(value, "train-cgnet", f"epoch {epoch}")
                backward(loss)
            adam.step()
            losses.append(value)
        if epoch % stage.eval_every == 0 or epoch == stage.epochs:
            path = os.path.join(manifest.out_dir, f"cgnet_epoch{epoch:04d}.pdrk")
            save_params(path, params)
            cd = _held_out_cd(manifest, params, cfg, held, epoch)
            records.append(CheckpointRecord(epoch=epoch, path=path, eval_cd=cd))
    _finish_stage(manifest, records, losses, "cgnet")
    return records


def _held_out_cd(manifest, params, cfg, held, epoch) -> float:
    """Mean CD of full-schedule completions on the held-out pairs."""
    view = manifest.schedule.build_view()
    cds = []
    for j, pair in enumerate(held):
        rng = _rng(manifest, 90, epoch, j)
        cloud, _ = generate_coarse(params, cfg, _conditioner(manifest, pair.partial),
                                   view, rng, clip=manifest.sample_clip)
        cds.append(chamfer(cloud, pair.complete))
    return float(np.mean(cds))


def _finish_stage(manifest, records, losses, tag):
    best = best_checkpoint(records)
    shutil.copyfile(best.path, os.path.join(manifest.out_dir, f"{tag}_best.pdrk"))
    with open(os.path.join(manifest.out_dir, f"{tag}_records.json"), "w") as f:
        json.dump({"records": [asdict(r) for r in records], "losses": losses}, f)


def generate_coarse(params, cfg: DenoiserConfig, cond: PointCloud,
                    view: DiffusionSchedule, rng: np.random.Generator,
                    predictor=None, clip: float | None = None):
    """Iterated reverse process from Gaussian noise.

    Returns (completion, denoiser_evaluations); the evaluation count always
    equals the number of reverse steps in the schedule view.  `predictor`
    overrides the network with a callable (x, model_step) -> noise estimate,
    which the tests use to drive the reverse pass with an analytic oracle.

    `clip` bounds the clean cloud implied by each noise estimate to
    [-clip, clip] before the reverse update.  Distributions whose mass lies
    inside the bounds are unaffected; for an imperfectly trained predictor it
    stops the prediction-error amplification along the chain.
    """
    n = cfg.denoise_levels[0]
    x = rng.standard_normal((n, 3))
    if predictor is None:
        ctx = encode_condition(cond, params, cfg)
        predictor = lambda xs, t: denoise_forward(xs, t, ctx, params, cfg).data
    evals = 0
    for i in range(view.n_steps, 0, -1):
        eps_hat = predictor(x, view.model_step(i))
        evals += 1
        if clip is not None:
            abar = view.alpha_bar_at(i)
            x0_hat = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
            np.clip(x0_hat, -clip, clip, out=x0_hat)
            eps_hat = (x - np.sqrt(abar) * x0_hat) / np.sqrt(1.0 - abar)
        z = rng.standard_normal((n, 3)) if i > 1 else None
        x = reverse_step(x, i, eps_hat, z, view)
    if not np.isfinite(x).all():
        raise NumericAbort("reverse process diverged to non-finite coordinates")
    return PointCloud(points=x), evals


def load_cgnet(manifest: RunManifest):
    path = os.path.join(manifest.out_dir, CGNET_BEST)
    if not os.path.exists(path):
        raise DataError(f"no trained noise predictor at {path}; run train-cgnet first")
    cfg = _net_config(manifest, refiner=False)
    return params_from_arrays(load_params(path), cfg), cfg


def load_rfnet(manifest: RunManifest):
    path = os.path.join(manifest.out_dir, RFNET_BEST)
    if not os.path.exists(path):
        raise DataError(f"no trained refiner at {path}; run train-rfnet first")
    cfg = _net_config(manifest, refiner=True)
    return params_from_arrays(load_params(path), cfg), cfg


def cache_coarse(manifest: RunManifest) -> int:
    """Persist coarse_per_pair completions per training pair for refiner
    training; the generator's parameters are read-only here."""
    params, cfg = load_cgnet(manifest)
    train, _ = _load_split(manifest)
    view = manifest.schedule.build_view(manifest.cache_accel_steps)
    count = 0
    for pair in train:
        rng = _rng(manifest, 3, pair.shape_id, pair.view_id)
        clouds = []
        for _ in range(manifest.coarse_per_pair):
            cloud, _ = generate_coarse(params, cfg, _conditioner(manifest, pair.partial),
                                       view, rng, clip=manifest.sample_clip)
            clouds.append(cloud)
        data_mod.save_coarse(manifest.dataset, pair, clouds)
        count += len(clouds)
    return count


def train_rfnet(manifest: RunManifest) -> list[CheckpointRecord]:
    """Train the refiner on cached coarse clouds with the Chamfer objective."""
    train, held = _load_split(manifest)
    coarse = {pair.key: data_mod.load_coarse(manifest.dataset, pair) for pair in train}
    if any(len(v) == 0 for v in coarse.values()):
        raise DataError("coarse store is empty for some pairs; run cache-coarse first")
    cfg = _net_config(manifest, refiner=True)
    params = init_params(cfg, _rng(manifest, 4))
    _zero_head(params)
    adam = Adam(params, manifest.optimizer.lr, manifest.optimizer.beta1,
                manifest.optimizer.beta2, manifest.optimizer.eps)
    rng = _rng(manifest, 5)
    aug = data_mod.AUGMENT_PRESETS[manifest.augment_rfnet]
    cg_params, cg_cfg = load_cgnet(manifest)
    os.makedirs(manifest.out_dir, exist_ok=True)

    records = []
    losses = []
    stage = manifest.rfnet
    steps_per_epoch = max(1, len(train) // stage.batch_size)
    for epoch in range(1, stage.epochs + 1):
        for _ in range(steps_per_epoch):
            adam.zero_grad()
            with Tape():
                total = None
                for _ in range(stage.batch_size):
                    pair = train[int(rng.integers(len(train)))]
                    u = coarse[pair.key][int(rng.integers(len(coarse[pair.key])))]
                    tf = data_mod.draw_transform(aug, rng)
                    u_t = tf.apply(u.points)
                    cond = _conditioner(manifest, tf.apply_cloud(pair.partial))
                    x0_t = tf.apply(pair.complete.points)
                    out = rfnet_forward(u_t, cond, params, cfg)
                    term = chamfer_loss(out.refined, x0_t)
                    if cfg.upsample_factor > 1:
                        term = nn.add(term, chamfer_loss(out.dense, x0_t))
                    total = term if total is None else nn.add(total, term)
                loss = nn.mul(total, 1.0 / stage.batch_size)
                value = float(loss.data)
                _check_finite(value, "train-rfnet", f"epoch {epoch}")
                backward(loss)
            adam.step()
            losses.append(value)
        if epoch % stage.eval_every == 0 or epoch == stage.epochs:
            path = os.path.join(manifest.out_dir, f"rfnet_epoch{epoch:04d}.pdrk")
            save_params(path, params)
            cd = _refined_held_out_cd(manifest, cg_params, cg_cfg, params, cfg, held, epoch)
            records.append(CheckpointRecord(epoch=epoch, path=path, eval_cd=cd))
    _finish_stage(manifest, records, losses, "rfnet")
    return records


def _refined_held_out_cd(manifest, cg_params, cg_cfg, rf_params, rf_cfg, held, epoch,
                         accel: int | None = 20) -> float:
    view = manifest.schedule.build_view(accel)
    cds = []
    for j, pair in enumerate(held):
        rng = _rng(manifest, 91, epoch, j)
        cond = _conditioner(manifest, pair.partial)
        coarse, _ = generate_coarse(cg_params, cg_cfg, cond, view, rng,
                                    clip=manifest.sample_clip)
        refined = rfnet_forward(coarse.points, cond, rf_params, rf_cfg).refined.data
        cds.append(chamfer(refined, pair.complete))
    return float(np.mean(cds))


def refine_cloud(manifest: RunManifest, coarse: PointCloud, partial: PointCloud):
    params, cfg = load_rfnet(manifest)
    out = rfnet_forward(coarse.points, _conditioner(manifest, partial), params, cfg)
    return PointCloud(points=out.refined.data), PointCloud(points=out.dense.data)


def _pair_metrics(pred: PointCloud, truth: PointCloud) -> dict:
    n = pred.n
    if n == truth.n and n <= EMD_EXACT_MAX:
        emd = emd_exact(pred, truth) / n
    else:
        emd = emd_approx(pred, truth) / n
    return {
        "cd": chamfer(pred, truth) * 1e4,
        "emd": emd * 1e2,
        "f1": f1_score(pred, truth, F1_RHO_DEFAULT),
    }


def evaluate(manifest: RunManifest, variants=("full", 50, 20), out_path=None) -> list[dict]:
    """Coarse and refined metrics per held-out pair for each schedule variant.

    Emits one JSON line per (variant, pair, stage) plus per-variant aggregate
    rows; returns all rows.
    """
    cg_params, cg_cfg = load_cgnet(manifest)
    rf_params, rf_cfg = load_rfnet(manifest)
    _, held = _load_split(manifest)
    rows = []
    for variant in variants:
        accel = None if variant == "full" else int(variant)
        if accel is not None and accel >= manifest.schedule.T:
            continue
        view = manifest.schedule.build_view(accel)
        name = "full" if accel is None else f"accel-{accel}"
        coarse_rows, refined_rows = [], []
        for j, pair in enumerate(held):
            # keyed per pair only: every variant starts its reverse pass from
            # the same latent draw, which stabilizes cross-variant comparisons
            rng = _rng(manifest, 92, j)
            cond = _conditioner(manifest, pair.partial)
            coarse, evals = generate_coarse(cg_params, cg_cfg, cond, view, rng,
                                            clip=manifest.sample_clip)
            refined = rfnet_forward(coarse.points, cond, rf_params, rf_cfg).refined.data
            refined = PointCloud(points=refined)
            for kind, cloud, bucket in (("coarse", coarse, coarse_rows),
                                        ("refined", refined, refined_rows)):
                row = {"variant": name, "pair": pair.key, "kind": kind,
                       "reverse_steps": view.n_steps, "denoiser_evals": evals}
                row.update(_pair_metrics(cloud, pair.complete))
                bucket.append(row)
                rows.append(row)
        for kind, bucket in (("coarse", coarse_rows), ("refined", refined_rows)):
            rows.append({
                "variant": name, "kind": kind, "aggregate": True,
                "cd": float(np.mean([r["cd"] for r in bucket])),
                "emd": float(np.mean([r["emd"] for r in bucket])),
                "f1": float(np.mean([r["f1"] for r in bucket])),
            })
    if out_path:
        with open(out_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
    return rows
