"""Dual-path forward passes: noise prediction (CGNet) and refinement (RFNet).

The condition path encodes the partial cloud through four abstraction stages
and one global-feature network; the denoise path runs the same encoder plus a
four-stage decoder over the noisy (or coarse) cloud, receiving a feature
transfer from the matching condition level before every stage.  Encoding the
condition once and reusing it across reverse steps is what makes iterative
sampling affordable, so the two halves are exposed separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..errors import ArgumentError, ConfigError
from ..geometry import PointCloud
from .config import DenoiserConfig
from .modules import (
    encode_step,
    extract_global_feature,
    fp_forward,
    ft_forward,
    sa_forward,
    with_coords,
)

# forward-invocation counters, for instrumentation in tests and the sampler
counters = {"denoise_forward": 0}


def reset_counters():
    counters["denoise_forward"] = 0


@dataclass
class CondContext:
    """Condition-path activations reused across reverse steps."""

    positions: list          # 5 levels of (S_l, 3) arrays
    features: list           # matching [semantic || coords] tensors
    global_feat: nn.Tensor


@dataclass
class RefineOut:
    refined: nn.Tensor       # (N, 3) displaced cloud
    dense: nn.Tensor         # (lambda * N, 3) upsampled cloud
    head: nn.Tensor          # (N, 3 * (1 + lambda)) raw head output


def _points_of(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def encode_condition(c, params, cfg: DenoiserConfig, rng=None) -> CondContext:
    """Run the condition path: four abstraction levels plus the global feature."""
    rng = rng or np.random.default_rng(cfg.neighbor_seed)
    pos = _points_of(c)
    if pos.shape[0] < cfg.cond_levels[1]:
        raise ConfigError(
            f"conditioner has {pos.shape[0]} points, fewer than level-1 count "
            f"{cfg.cond_levels[1]}"
        )
    sem = None
    if cfg.cond_label_channel:
        if not isinstance(c, PointCloud) or c.labels is None:
            raise ConfigError("config expects a label channel but the conditioner has none")
        sem = nn.as_const(c.labels.reshape(-1, 1))
    full0 = with_coords(sem, pos)
    positions = [pos]
    features = [full0]
    for i in range(4):
        out = sa_forward(
            positions[-1], features[-1], cfg.cond_levels[i + 1], cfg.sa_radii[i],
            params, f"cond.sa{i + 1}", cfg, rng,
        )
        positions.append(out.positions)
        features.append(with_coords(out.features, out.positions))
    return CondContext(
        positions=positions,
        features=features,
        global_feat=extract_global_feature(full0, params, cfg),
    )


def denoise_forward(x, t, ctx: CondContext, params, cfg: DenoiserConfig, rng=None) -> nn.Tensor:
    """Denoise-path forward over one cloud, given an encoded condition.

    Input:
        x: (N, 3) noisy or coarse cloud; t: diffusion step (None for the refiner)
    Return:
        (N, head_out) tensor: the per-point noise estimate, or the refiner's
        displacement plus upsampling offsets.
    """
    counters["denoise_forward"] += 1
    rng = rng or np.random.default_rng(cfg.neighbor_seed + 1)
    pos = _points_of(x)
    if pos.shape[0] < cfg.denoise_levels[1]:
        raise ConfigError(
            f"input has {pos.shape[0]} points, fewer than level-1 count "
            f"{cfg.denoise_levels[1]}"
        )
    if cfg.use_step_embedding:
        if t is None:
            raise ArgumentError("this config wants a diffusion step")
        step_emb = encode_step(t, params, cfg)
    else:
        step_emb = None
    glob = ctx.global_feat

    positions = [pos]
    feats = None
    full = with_coords(None, pos)
    skips = []
    for level in range(4):
        ft = ft_forward(
            ctx.positions[level], ctx.features[level], positions[-1], full,
            cfg.ft_radii[level], params, f"ft{level + 1}", cfg, rng,
        )
        merged = ft.features if feats is None else nn.concat_lastdim([feats, ft.features])
        full = with_coords(merged, positions[-1])
        skips.append(full)
        out = sa_forward(
            positions[-1], full, cfg.denoise_levels[level + 1], cfg.sa_radii[level],
            params, f"den.sa{level + 1}", cfg, rng, step_emb, glob,
        )
        feats = out.features
        positions.append(out.positions)
        full = with_coords(feats, out.positions)
    ft = ft_forward(
        ctx.positions[4], ctx.features[4], positions[4], full,
        cfg.ft_radii[4], params, "ft5", cfg, rng,
    )
    full = with_coords(nn.concat_lastdim([feats, ft.features]), positions[4])

    for j, level in enumerate((3, 2, 1, 0)):
        out = fp_forward(
            positions[level + 1], full, positions[level], skips[level],
            params, f"den.fp{level}", cfg, step_emb, glob,
        )
        dec_full = with_coords(out.features, positions[level])
        ft = ft_forward(
            ctx.positions[level], ctx.features[level], positions[level], dec_full,
            cfg.ft_radii[5 + j], params, f"ft{6 + j}", cfg, rng,
        )
        full = with_coords(nn.concat_lastdim([out.features, ft.features]), positions[level])

    h = nn.swish(nn.linear(full, params["head.l1.w"], params["head.l1.b"]))
    return nn.linear(h, params["head.l2.w"], params["head.l2.b"])


def cgnet_forward(x, c, t: int, params, cfg: DenoiserConfig) -> nn.Tensor:
    """Full conditional noise prediction: (x_t, c, t) -> (N, 3)."""
    if not cfg.use_step_embedding:
        raise ConfigError("cgnet_forward needs a config with use_step_embedding=True")
    ctx = encode_condition(c, params, cfg)
    return denoise_forward(x, t, ctx, params, cfg)


def rfnet_forward(u, c, params, cfg: DenoiserConfig, ctx: CondContext | None = None) -> RefineOut:
    """Refine a coarse cloud: v = u + gamma * displacement, plus a dense cloud
    of lambda offset points grouped around every refined point."""
    if cfg.use_step_embedding:
        raise ConfigError("rfnet_forward needs a config with use_step_embedding=False")
    if ctx is None:
        ctx = encode_condition(c, params, cfg)
    head = denoise_forward(u, None, ctx, params, cfg)
    u_pts = _points_of(u)
    n = u_pts.shape[0]
    lam = cfg.upsample_factor
    disp = nn.slice_lastdim(head, 0, 3)
    refined = nn.add(nn.mul(disp, cfg.displacement_scale), u_pts)
    offsets = nn.reshape(nn.slice_lastdim(head, 3, 3 * (1 + lam)), (n, lam, 3))
    dense = nn.reshape(nn.add(nn.tile_axis1(refined, lam), offsets), (n * lam, 3))
    return RefineOut(refined=refined, dense=dense, head=head)
