"""Double-precision mirror of the fixed-point backbone, used as the accuracy
oracle.  It dequantizes the packed weights and repeats the architecture in
plain float64: pre-norm residual blocks, unscaled-dot-product attention,
erf-based GELU, and top-k expert routing with softmax-over-selected weights
(ties toward the lower expert id)."""

import math

import numpy as np
from scipy.special import erf

from fxmoe.model import LAYERNORM_EPS, ModelWeights


def _linear(x, w):
    weights = w.matrix() * w.weight_fmt.ulp
    bias = w.bias_raw * w.bias_fmt.ulp
    return x @ weights.T + bias


def _gelu(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def _layer_norm(x, params):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    norm = (x - mean) / np.sqrt(var + LAYERNORM_EPS)
    return norm * (params.gamma.to_real()) + params.beta.to_real()


def _softmax_rows(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x, attn):
    d = attn.wq.out_dim
    dh = d // attn.n_heads
    q, k, v = (_linear(x, w) for w in (attn.wq, attn.wk, attn.wv))
    heads = []
    for h in range(attn.n_heads):
        s = slice(h * dh, (h + 1) * dh)
        weights = _softmax_rows(q[:, s] @ k[:, s].T)
        heads.append(weights @ v[:, s])
    return _linear(np.concatenate(heads, axis=1), attn.wo)


def _moe(x, experts, gate, top_k):
    logits = _linear(x, gate)
    order = np.argsort(-logits, axis=1, kind="stable")
    ids = order[:, :top_k]
    selected = np.take_along_axis(logits, ids, axis=1)
    gate_w = _softmax_rows(selected)
    out = np.zeros_like(x)
    n = x.shape[0]
    for e in range(len(experts.experts)):
        mask = ids == e
        rows = np.flatnonzero(mask.any(axis=1))
        if rows.size == 0:
            continue
        ex = experts.experts[e]
        hidden = _gelu(_linear(x[rows], ex.w1))
        y = _linear(hidden, ex.w2)
        w = gate_w[mask.any(axis=1)][np.arange(rows.size), mask[rows].argmax(axis=1)]
        out[rows] += w[:, None] * y
    return out


def reference_forward(weights: ModelWeights, image: np.ndarray, task: int):
    """Float64 features for the same (weights, image, task)."""
    cfg = weights.config
    act = cfg.formats.activation
    # mirror the input quantization so only datapath rounding differs
    img_q = np.floor(image * 2.0 ** act.frac_bits) * act.ulp
    p = cfg.patch_size
    grid_h, grid_w = cfg.image_h // p, cfg.image_w // p
    patches = (
        img_q.reshape(grid_h, p, grid_w, p)
        .transpose(0, 2, 1, 3)
        .reshape(cfg.n_tokens, cfg.patch_dim)
    )
    x = _linear(patches, weights.patch_proj) + weights.pos_embed.to_real()
    for i, bw in enumerate(weights.blocks):
        x = x + _attention(_layer_norm(x, bw.ln1), bw.attn)
        normed = _layer_norm(x, bw.ln2)
        if cfg.block_is_moe(i):
            x = x + _moe(normed, bw.mlp, weights.gates[task], cfg.top_k)
        else:
            hidden = _gelu(_linear(normed, bw.mlp.w1))
            x = x + _linear(hidden, bw.mlp.w2)
    return _layer_norm(x, weights.final_ln)
