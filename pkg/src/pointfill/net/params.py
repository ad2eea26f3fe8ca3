"""Flat named parameter store for the dual-path networks.

`param_shapes` walks the architecture once and fixes the name -> shape map;
`init_params` fills it with seeded uniform values in [-1/sqrt(fan_in),
+1/sqrt(fan_in)].  The forward pass in `modules`/`denoiser` must consume
parameters in exactly this structure, so a checkpoint/config mismatch is
detected by comparing against this map.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import ConfigError
from ..nn import Tensor
from .config import FT_LEVELS, DenoiserConfig


def cond_input_width(cfg: DenoiserConfig) -> int:
    return (1 if cfg.cond_label_channel else 0) + 3


def param_shapes(cfg: DenoiserConfig) -> "OrderedDict[str, tuple]":
    shapes: "OrderedDict[str, tuple]" = OrderedDict()

    def lin(prefix, n_in, n_out):
        shapes[f"{prefix}.w"] = (n_in, n_out)
        shapes[f"{prefix}.b"] = (n_out,)

    def attention(prefix, q_in, key_in, out):
        lin(f"{prefix}.q", q_in, cfg.d_query)
        lin(f"{prefix}.k", key_in, cfg.d_key)
        # score layer over [query || key], stored as its two column blocks
        lin(f"{prefix}.sq", cfg.d_query, out)
        shapes[f"{prefix}.sk.w"] = (cfg.d_key, out)

    def inject(prefix, width):
        if cfg.use_step_embedding:
            shapes[f"{prefix}.tproj"] = (cfg.step_embed_dim, width)
        shapes[f"{prefix}.gproj"] = (cfg.global_feat_dim, width)

    def sa(prefix, w_in, d_out, injected):
        lin(f"{prefix}.mlp1", w_in + 3, d_out)
        if injected:
            inject(f"{prefix}.mlp1", d_out)
        lin(f"{prefix}.mlp2", d_out, d_out)
        if injected:
            inject(f"{prefix}.mlp2", d_out)
        attention(f"{prefix}.att", w_in, w_in + 3, d_out)

    def ft(prefix, src_w, q_in, out):
        lin(f"{prefix}.mlp1", src_w + 3, out)
        attention(f"{prefix}.att", q_in, src_w + 3, out)

    def fp(prefix, coarse_w, skip_w, out):
        lin(f"{prefix}.mlp1", coarse_w + 3, out)
        inject(f"{prefix}.mlp1", out)
        lin(f"{prefix}.mlp2", out, out)
        inject(f"{prefix}.mlp2", out)
        attention(f"{prefix}.att", skip_w, coarse_w + 3, out)
        lin(f"{prefix}.unit1", out + skip_w, out)
        lin(f"{prefix}.unit2", out, out)

    if cfg.use_step_embedding:
        lin("step.fc1", 2 * cfg.d_t, cfg.step_embed_dim)
        lin("step.fc2", cfg.step_embed_dim, cfg.step_embed_dim)

    w0c = cond_input_width(cfg)
    gh1, gh2, gh3 = cfg.global_hidden
    lin("glob.s1l1", w0c, gh1)
    lin("glob.s1l2", gh1, gh2)
    lin("glob.s2l1", 2 * gh2, gh3)
    lin("glob.s2l2", gh3, cfg.global_feat_dim)

    dims = cfg.feat_dims
    cond_w = [w0c]
    for i in range(4):
        sa(f"cond.sa{i + 1}", cond_w[-1], dims[i], injected=False)
        cond_w.append(dims[i] + 3)

    # encoder side of the denoise path: transfer then abstract, four times
    dw = 3
    skip_w = []
    for level in range(4):
        ft(f"ft{level + 1}", cond_w[level], dw, cfg.ft_dims[level])
        dw += cfg.ft_dims[level]
        skip_w.append(dw)
        sa(f"den.sa{level + 1}", dw, dims[level], injected=True)
        dw = dims[level] + 3
    ft("ft5", cond_w[4], dw, cfg.ft_dims[4])
    dw += cfg.ft_dims[4]

    # decoder side: propagate then transfer, back to the input level
    fp_out = {3: dims[2], 2: dims[1], 1: dims[0], 0: dims[0]}
    for j, level in enumerate((3, 2, 1, 0)):
        fp(f"den.fp{level}", dw, skip_w[level], fp_out[level])
        dw = fp_out[level] + 3
        ft(f"ft{6 + j}", cond_w[level], dw, cfg.ft_dims[level])
        dw += cfg.ft_dims[level]

    lin("head.l1", dw, dims[0])
    lin("head.l2", dims[0], cfg.head_out)
    return shapes


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> "OrderedDict[str, Tensor]":
    """Seeded fan-in uniform initialization of every parameter tensor."""
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        fan_in = shape[0] if len(shape) > 1 else _bias_fan_in(params, name)
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return params


def _bias_fan_in(params, bias_name: str) -> int:
    weight = params[bias_name[:-2] + ".w"]
    return weight.shape[0]


def params_from_arrays(arrays, cfg: DenoiserConfig) -> "OrderedDict[str, Tensor]":
    """Wrap loaded arrays as trainable tensors, validating against the config."""
    expected = param_shapes(cfg)
    if list(arrays.keys()) != list(expected.keys()):
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        raise ConfigError(
            f"checkpoint does not match config {cfg.name!r}: "
            f"missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
        )
    out: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, arr in arrays.items():
        if tuple(arr.shape) != expected[name]:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {arr.shape}, config wants {expected[name]}"
            )
        out[name] = Tensor(arr, requires_grad=True)
    return out
