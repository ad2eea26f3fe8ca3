"""Building blocks of the dual-path point networks.

Feature matrices flowing between modules always carry the absolute point
coordinates in their last 3 columns; grouped neighborhoods append the
relative offset (source - center) on top, and dummy slots are all-zero rows
that attention weights to exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..geometry import NeighborTable, ball_query, farthest_point_sample, knn_query
from .config import DenoiserConfig


@dataclass
class ModuleOut:
    """One module application: new level state plus attention diagnostics."""

    positions: np.ndarray
    features: nn.Tensor          # semantic features, coordinates not included
    att_weights: nn.Tensor       # (M, K, d) neighbor weights
    table: NeighborTable


def with_coords(features: nn.Tensor | None, positions: np.ndarray) -> nn.Tensor:
    """Materialize [semantic features || absolute coordinates]."""
    coords = nn.as_const(positions)
    if features is None:
        return coords
    return nn.concat_lastdim([features, coords])


def group_tensor(
    feats: nn.Tensor,
    table: NeighborTable,
    center_positions: np.ndarray,
    source_positions: np.ndarray,
) -> nn.Tensor:
    """Differentiable grouping: (N, w) -> (M, K, w + 3) with zeroed dummies."""
    real = table.real_mask
    gathered = nn.group_slots(feats, table.indices, real)
    safe = np.where(real, table.indices, 0)
    offsets = (source_positions[safe] - center_positions[:, None, :]) * real[:, :, None]
    return nn.concat_lastdim([gathered, nn.as_const(offsets)])


def shared_mlp(g, params, prefix, n_layers, injections=None, final_swish=True):
    """Stack of shared linear layers with optional per-layer vector injections.

    Projected injection vectors are folded into the layer bias before the
    broadcast, so they cost one small add instead of a full-size pass.
    """
    h = g
    for i in range(1, n_layers + 1):
        bias = params[f"{prefix}{i}.b"]
        if injections is not None:
            for vec in injections[i - 1]:
                bias = nn.add(bias, vec)
        h = nn.bias_add(nn.matmul(h, params[f"{prefix}{i}.w"]), bias)
        if final_swish or i < n_layers:
            h = nn.swish(h)
    return h


def project_injections(params, prefix, n_layers, step_emb, global_feat):
    """Project the step embedding / global feature to each layer's width."""
    out = []
    for i in range(1, n_layers + 1):
        vecs = []
        if step_emb is not None:
            vecs.append(_project_vec(step_emb, params[f"{prefix}{i}.tproj"]))
        if global_feat is not None:
            vecs.append(_project_vec(global_feat, params[f"{prefix}{i}.gproj"]))
        out.append(vecs)
    return out


def _project_vec(vec: nn.Tensor, w: nn.Tensor) -> nn.Tensor:
    width = w.shape[1]
    return nn.reshape(nn.matmul(nn.reshape(vec, (1, w.shape[0])), w), (width,))


def attention_aggregate(q_feats, g_in, g_out, real_mask, params, prefix):
    """Adaptive neighbor aggregation.

    Input:
        q_feats: (M, q_in) center features acting as queries
        g_in: (M, K, key_in) grouped neighborhoods acting as keys
        g_out: (M, K, d) transformed neighborhoods acting as values
        real_mask: (M, K) bool marking non-dummy slots
    Return:
        ((M, d) aggregated features, (M, K, d) weights)

    Scores get one softmax per output channel along the neighbor axis; dummy
    slots carry exactly zero weight and all-dummy centers aggregate to zeros.
    """
    # the query MLP is per point, so it commutes with the K-fold repeat; the
    # score layer over [query || key] is applied as its two column blocks,
    # which avoids materializing the repeated concatenation
    q = nn.swish(nn.linear(q_feats, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]))
    keys = nn.swish(nn.linear(g_in, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]))
    scores = nn.add_rows(
        nn.matmul(keys, params[f"{prefix}.sk.w"]),
        nn.linear(q, params[f"{prefix}.sq.w"], params[f"{prefix}.sq.b"]),
    )
    weights = nn.masked_softmax_neighbors(scores, real_mask)
    return nn.weighted_sum(g_out, weights, axis=1), weights


def sa_forward(
    positions: np.ndarray,
    full: nn.Tensor,
    n_out: int,
    radius: float,
    params,
    prefix: str,
    cfg: DenoiserConfig,
    rng: np.random.Generator,
    step_emb: nn.Tensor | None = None,
    global_feat: nn.Tensor | None = None,
) -> ModuleOut:
    """Set abstraction: subsample by FPS, group a ball neighborhood, transform,
    aggregate by attention.

    Input:
        positions: (N, 3); full: (N, w) features with coords attached
    Return:
        ModuleOut with (n_out, 3) positions and (n_out, d_out) features
    """
    idx = farthest_point_sample(positions, n_out)
    centers = positions[idx]
    table = ball_query(positions, centers, radius, cfg.k_sa, rng)
    g_in = group_tensor(full, table, centers, positions)
    injections = None
    if step_emb is not None or global_feat is not None:
        injections = project_injections(params, f"{prefix}.mlp", 2, step_emb, global_feat)
    g_out = shared_mlp(g_in, params, f"{prefix}.mlp", 2, injections)
    queries = nn.take_rows(full, idx)
    agg, weights = attention_aggregate(
        queries, g_in, g_out, table.real_mask, params, f"{prefix}.att"
    )
    return ModuleOut(positions=centers, features=agg, att_weights=weights, table=table)


def ft_forward(
    cond_positions: np.ndarray,
    cond_full: nn.Tensor,
    den_positions: np.ndarray,
    den_full: nn.Tensor,
    radius: float,
    params,
    prefix: str,
    cfg: DenoiserConfig,
    rng: np.random.Generator,
) -> ModuleOut:
    """Feature transfer from conditioner points onto same-level denoise points.

    A denoise point farther than `radius` from every conditioner point gets an
    all-dummy neighborhood and therefore an exactly-zero transferred feature.
    """
    table = ball_query(cond_positions, den_positions, radius, cfg.k_sa, rng)
    g_in = group_tensor(cond_full, table, den_positions, cond_positions)
    g_out = shared_mlp(g_in, params, f"{prefix}.mlp", 1)
    agg, weights = attention_aggregate(
        den_full, g_in, g_out, table.real_mask, params, f"{prefix}.att"
    )
    return ModuleOut(positions=den_positions, features=agg, att_weights=weights, table=table)


def fp_forward(
    coarse_positions: np.ndarray,
    coarse_full: nn.Tensor,
    fine_positions: np.ndarray,
    skip_full: nn.Tensor,
    params,
    prefix: str,
    cfg: DenoiserConfig,
    step_emb: nn.Tensor | None = None,
    global_feat: nn.Tensor | None = None,
) -> ModuleOut:
    """Adaptive deconvolution: per fine point, query its k nearest coarse
    points, transform and attention-aggregate them, then fuse with the skip
    link through a per-point network."""
    table = knn_query(coarse_positions, fine_positions, cfg.k_fp)
    g_in = group_tensor(coarse_full, table, fine_positions, coarse_positions)
    injections = None
    if step_emb is not None or global_feat is not None:
        injections = project_injections(params, f"{prefix}.mlp", 2, step_emb, global_feat)
    g_out = shared_mlp(g_in, params, f"{prefix}.mlp", 2, injections)
    agg, weights = attention_aggregate(
        skip_full, g_in, g_out, table.real_mask, params, f"{prefix}.att"
    )
    fused = nn.concat_lastdim([agg, skip_full])
    fused = shared_mlp(fused, params, f"{prefix}.unit", 2)
    return ModuleOut(positions=fine_positions, features=fused, att_weights=weights, table=table)


def positional_step_code(t: int, d_t: int) -> np.ndarray:
    """Raw sinusoidal code [sin(psi), cos(psi)], psi_i = t * 10^(4 i / d_t)."""
    freq = 10.0 ** (4.0 * np.arange(d_t) / d_t)
    psi = float(t) * freq
    return np.concatenate([np.sin(psi), np.cos(psi)])


def encode_step(t: int, params, cfg: DenoiserConfig) -> nn.Tensor:
    """Diffusion step -> (step_embed_dim,) embedding via two FC + swish layers."""
    raw = nn.as_const(positional_step_code(t, cfg.d_t).reshape(1, -1))
    h = nn.swish(nn.linear(raw, params["step.fc1.w"], params["step.fc1.b"]))
    h = nn.swish(nn.linear(h, params["step.fc2.w"], params["step.fc2.b"]))
    return nn.reshape(h, (cfg.step_embed_dim,))


def extract_global_feature(cond_input: nn.Tensor, params, cfg: DenoiserConfig) -> nn.Tensor:
    """Two-stage point network pooling the conditioner into one global vector.

    Stage one pools a per-point code into an intermediate summary that is
    re-attached to every point; stage two pools again to global_feat_dim.
    Max pooling keeps the result invariant to point order.
    """
    n = cond_input.shape[0]
    h = nn.swish(nn.linear(cond_input, params["glob.s1l1.w"], params["glob.s1l1.b"]))
    h = nn.swish(nn.linear(h, params["glob.s1l2.w"], params["glob.s1l2.b"]))
    pooled = nn.max_lastdim(nn.transpose_last2(h))
    tiled = nn.reshape(nn.tile_axis1(nn.reshape(pooled, (1, -1)), n), (n, pooled.shape[0]))
    h2 = nn.concat_lastdim([h, tiled])
    h2 = nn.swish(nn.linear(h2, params["glob.s2l1.w"], params["glob.s2l1.b"]))
    h2 = nn.linear(h2, params["glob.s2l2.w"], params["glob.s2l2.b"])
    return nn.max_lastdim(nn.transpose_last2(h2))
