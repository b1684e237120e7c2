"""Ablation captioners sharing one plain LSTM decoder.

``PIX_DIFF`` reads the downsampled RGB difference next to both feature
grids, ``REP_DIFF`` reads the feature difference, ``ATT`` pools both grids
under one shared attention map and ``DUAL_ATT`` reuses the Dual Attention
localiser without the Dynamic Speaker.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .duda import (AttentionOutputs, _caption_step, _check_tokens, _param, _zero_state, _zeros,
                   dual_attention, greedy_loop, init_dual_attention, init_lstm, init_word_output)
from .numkernel import functional as F
from .numkernel.tensor import Tensor, no_tape


class BaselineKind(str, Enum):
    PIX_DIFF = "capt-pix-diff"
    REP_DIFF = "capt-rep-diff"
    ATT = "capt-att"
    DUAL_ATT = "capt-dual-att"


def pyramid_reduce(diff, grid):
    """Iterated 2x2 average pooling of an (N, 3, S, S) plane down to ``grid`` x ``grid``."""
    x = np.asarray(diff, dtype=np.float64)
    ratio = x.shape[-1] // grid
    if x.shape[-1] != x.shape[-2] or x.shape[-1] % grid or ratio & (ratio - 1):
        raise ValueError(f"image size {x.shape[-2:]} must be square and a power-of-two "
                         f"multiple of the grid {grid}")
    while x.shape[-1] > grid:
        n, c, h, w = x.shape
        x = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return x


def pixel_difference(before, after, grid):
    """``|after - before|`` of uint8 (N, S, S, 3) images, reduced to the feature grid."""
    b = np.asarray(before, dtype=np.float64) / 255.0
    a = np.asarray(after, dtype=np.float64) / 255.0
    return pyramid_reduce(np.abs(a - b).transpose(0, 3, 1, 2), grid)


def context_size(kind, cfg):
    kind = BaselineKind(kind)
    if kind in (BaselineKind.PIX_DIFF, BaselineKind.REP_DIFF):
        return cfg.conv_width2
    if kind is BaselineKind.ATT:
        return cfg.channels
    return 3 * cfg.channels


def init_baseline(kind, cfg, vocab_size, rng):
    kind = BaselineKind(kind)
    c, f = cfg.channels, cfg.att_channels
    params = {}
    if kind in (BaselineKind.PIX_DIFF, BaselineKind.REP_DIFF):
        c_in = 2 * c + 3 if kind is BaselineKind.PIX_DIFF else c
        w1, w2 = cfg.conv_width1, cfg.conv_width2
        params.update({
            "cnn.conv1.k": _param(rng, (w1, c_in, 3, 3), c_in * 9, "cnn.conv1.k"),
            "cnn.conv1.b": _zeros((w1,), "cnn.conv1.b"),
            "cnn.conv2.k": _param(rng, (w2, w1, 3, 3), w1 * 9, "cnn.conv2.k"),
            "cnn.conv2.b": _zeros((w2,), "cnn.conv2.b"),
        })
    elif kind is BaselineKind.ATT:
        params.update({
            "att.conv1.k": _param(rng, (f, 3 * c, 3, 3), 3 * c * 9, "att.conv1.k"),
            "att.conv1.b": _zeros((f,), "att.conv1.b"),
            "att.conv2.k": _param(rng, (1, f, 3, 3), f * 9, "att.conv2.k"),
            "att.conv2.b": _zeros((1,), "att.conv2.b"),
        })
    else:
        params.update(init_dual_attention(cfg, rng))
    params.update(init_lstm("cap.lstm", cfg.d_embed + context_size(kind, cfg), cfg.d_hidden, rng))
    params.update(init_word_output(cfg, vocab_size, rng))
    return params


def conv_stack(x, params):
    """Two conv+ReLU+2x2 max-pool stages, then a global max-pool: (N, C, H, W) -> (N, W2)."""
    h = F.max_pool2d(F.relu(F.conv2d(x, params["cnn.conv1.k"], params["cnn.conv1.b"], padding=1)))
    h = F.max_pool2d(F.relu(F.conv2d(h, params["cnn.conv2.k"], params["cnn.conv2.b"], padding=1)))
    return F.global_max_pool(h)


def single_attention(x_bef, x_aft, params):
    """One sigmoid map from ``[X_bef; X_aft; X_diff]`` applied to both grids."""
    x_bef, x_aft = F.as_tensor(x_bef), F.as_tensor(x_aft)
    if x_bef.shape != x_aft.shape or x_bef.ndim != 4:
        raise F.ShapeError(f"single_attention: grids {x_bef.shape} and {x_aft.shape} must match")
    x = F.concat([x_bef, x_aft, F.sub(x_aft, x_bef)], axis=1)
    h = F.relu(F.conv2d(x, params["att.conv1.k"], params["att.conv1.b"], padding=1))
    a = F.sigmoid(F.conv2d(h, params["att.conv2.k"], params["att.conv2.b"], padding=1))
    l_bef = F.spatial_pool(a, x_bef)
    l_aft = F.spatial_pool(a, x_aft)
    return AttentionOutputs(a, a, l_bef, F.sub(l_aft, l_bef), l_aft)


@dataclass
class BaselineContext:
    vector: Tensor                       # (N, D_ctx) fed to the decoder at every step
    attention: AttentionOutputs | None   # maps for the attention baselines


def baseline_context(kind, x_bef, x_aft, params, pix=None):
    kind = BaselineKind(kind)
    if kind is BaselineKind.PIX_DIFF:
        if pix is None:
            raise ValueError("capt-pix-diff needs the reduced pixel-difference plane")
        x = F.concat([F.as_tensor(x_bef), F.as_tensor(x_aft), F.as_tensor(pix)], axis=1)
        return BaselineContext(conv_stack(x, params), None)
    if kind is BaselineKind.REP_DIFF:
        return BaselineContext(conv_stack(F.sub(x_aft, x_bef), params), None)
    if kind is BaselineKind.ATT:
        att = single_attention(x_bef, x_aft, params)
        return BaselineContext(att.l_diff, att)
    att = dual_attention(x_bef, x_aft, params)
    return BaselineContext(F.concat([att.l_bef, att.l_diff, att.l_aft], axis=1), att)


def decoder_plain(context, tokens, params):
    """Teacher-forced LSTM decoder reading ``[embedding; context]`` at every step."""
    context = F.as_tensor(context)
    tokens = _check_tokens(tokens, params["embed"].shape[0])
    n, t_len = tokens.shape
    state = _zero_state(n, params["cap.lstm.w_hh"].shape[1])
    logits = []
    for t in range(t_len - 1):
        step_logits, state = _caption_step(tokens[:, t], context, state, params)
        logits.append(step_logits)
    return F.stack(logits, axis=1)


def decode_plain(context, params, max_len):
    context = F.as_tensor(context)
    with no_tape():
        box = {"state": _zero_state(context.shape[0], params["cap.lstm.w_hh"].shape[1])}

        def step(prev):
            logits, box["state"] = _caption_step(prev, context, box["state"], params)
            return logits.data, None

        words, _ = greedy_loop(context.shape[0], max_len, step)
    return words


def baseline_forward(kind, x_bef, x_aft, params, tokens, pix=None):
    """Teacher-forced logits and (for attention kinds) the attention outputs."""
    ctx = baseline_context(kind, x_bef, x_aft, params, pix)
    return decoder_plain(ctx.vector, tokens, params), ctx.attention
