"""Shared Transformer blocks: ALiBi attention, pre-norm residual blocks,
convolutional positional embedding, and U-Net style skip combination.

Weights live in flat dicts mapping dotted names to Tensors so the same
machinery serves the representation encoder, its EMA teacher, and the
generative decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class BlockConfig:
    """Architecture of one Transformer stack."""

    d: int = 64
    heads: int = 4
    ffn: int = 256
    layers: int = 4
    use_alibi: bool = True
    use_unet_skips: bool = False
    conv_kernel: int = 15
    conv_groups: int = 4
    attn_dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.ffn < self.d:
            raise ValueError(f"feed-forward size {self.ffn} must be >= hidden size {self.d}")
        if self.use_unet_skips and self.layers % 2 != 0:
            raise ValueError("u-net skip connections require an even layer count")


def alibi_slopes(heads: int) -> np.ndarray:
    """Geometric per-head slopes 2^(-8h/H), h = 1..H."""
    return np.array([2.0 ** (-8.0 * h / heads) for h in range(1, heads + 1)])


_BIAS_CACHE: dict = {}


def alibi_bias(heads: int, n: int, dtype=np.float64) -> np.ndarray:
    """Bidirectional ALiBi bias over n positions: bias[h, i, j] = -slope_h * |i - j|."""
    key = (heads, n, np.dtype(dtype).str)
    cached = _BIAS_CACHE.get(key)
    if cached is None:
        pos = np.arange(n)
        dist = np.abs(pos[:, None] - pos[None, :]).astype(dtype)
        cached = -alibi_slopes(heads)[:, None, None].astype(dtype) * dist
        _BIAS_CACHE[key] = cached
    return cached


# ---------------------------------------------------------------------------
# parameter initialization


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _linear(rng, fan_in, fan_out, dtype) -> Tensor:
    return _param(rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out)).astype(dtype))


def init_block(cfg: BlockConfig, rng, dtype, prefix: str) -> dict:
    d, f = cfg.d, cfg.ffn
    p = {
        f"{prefix}.ln1.g": _param(np.ones(d, dtype=dtype)),
        f"{prefix}.ln1.b": _param(np.zeros(d, dtype=dtype)),
        f"{prefix}.attn.wq": _linear(rng, d, d, dtype),
        f"{prefix}.attn.bq": _param(np.zeros(d, dtype=dtype)),
        f"{prefix}.attn.wk": _linear(rng, d, d, dtype),
        f"{prefix}.attn.bk": _param(np.zeros(d, dtype=dtype)),
        f"{prefix}.attn.wv": _linear(rng, d, d, dtype),
        f"{prefix}.attn.bv": _param(np.zeros(d, dtype=dtype)),
        f"{prefix}.attn.wo": _linear(rng, d, d, dtype),
        f"{prefix}.attn.bo": _param(np.zeros(d, dtype=dtype)),
        f"{prefix}.ln2.g": _param(np.ones(d, dtype=dtype)),
        f"{prefix}.ln2.b": _param(np.zeros(d, dtype=dtype)),
        f"{prefix}.ffn.w1": _linear(rng, d, f, dtype),
        f"{prefix}.ffn.b1": _param(np.zeros(f, dtype=dtype)),
        f"{prefix}.ffn.w2": _linear(rng, f, d, dtype),
        f"{prefix}.ffn.b2": _param(np.zeros(d, dtype=dtype)),
    }
    return p


def init_stack(cfg: BlockConfig, rng, dtype, prefix: str) -> dict:
    """Parameters for a full stack: blocks, final layer norm, skip projections."""
    p = {}
    for i in range(cfg.layers):
        p.update(init_block(cfg, rng, dtype, f"{prefix}.block{i}"))
    if cfg.use_unet_skips:
        for i in range(cfg.layers // 2, cfg.layers):
            p[f"{prefix}.skip{i}.w"] = _linear(rng, 2 * cfg.d, cfg.d, dtype)
    p[f"{prefix}.lnf.g"] = _param(np.ones(cfg.d, dtype=dtype))
    p[f"{prefix}.lnf.b"] = _param(np.zeros(cfg.d, dtype=dtype))
    return p


def init_conv_positional(cfg: BlockConfig, rng, dtype, name: str) -> dict:
    k, g = cfg.conv_kernel, cfg.conv_groups
    if cfg.d % g != 0:
        raise ValueError(f"conv groups {g} do not divide hidden size {cfg.d}")
    cpg = cfg.d // g
    scale = (k * cpg) ** -0.5
    return {name: _param(rng.normal(0.0, scale, size=(k, g, cpg, cpg)).astype(dtype))}


# ---------------------------------------------------------------------------
# forward passes


def _attention(x: Tensor, params: dict, cfg: BlockConfig, prefix: str, bias, rng=None) -> Tensor:
    L = x.shape[0]
    d, H = cfg.d, cfg.heads
    dh = d // H
    q = ad.matmul(x, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"]
    k = ad.matmul(x, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"]
    v = ad.matmul(x, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"]
    q = ad.transpose(ad.reshape(q, (L, H, dh)), (1, 0, 2))
    k = ad.transpose(ad.reshape(k, (L, H, dh)), (1, 0, 2))
    v = ad.transpose(ad.reshape(v, (L, H, dh)), (1, 0, 2))
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (dh**-0.5)
    if bias is not None:
        scores = scores + Tensor(bias.astype(x.data.dtype))
    probs = ad.softmax(scores, axis=-1)
    if cfg.attn_dropout > 0.0 and rng is not None:
        keep = (rng.random(probs.shape) >= cfg.attn_dropout).astype(x.data.dtype)
        probs = probs * Tensor(keep / (1.0 - cfg.attn_dropout))
    ctx = ad.matmul(probs, v)
    ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (L, d))
    return ad.matmul(ctx, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _block(x: Tensor, params: dict, cfg: BlockConfig, prefix: str, bias, rng=None) -> Tensor:
    h = x + _attention(
        ad.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]),
        params,
        cfg,
        f"{prefix}.attn",
        bias,
        rng,
    )
    inner = ad.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    inner = ad.matmul(inner, params[f"{prefix}.ffn.w1"]) + params[f"{prefix}.ffn.b1"]
    inner = ad.gelu(inner)
    inner = ad.matmul(inner, params[f"{prefix}.ffn.w2"]) + params[f"{prefix}.ffn.b2"]
    return h + inner


def unet_combine(early: Tensor, late: Tensor, w_skip: Tensor) -> Tensor:
    """Concatenate two streams along features and project back to width d."""
    if early.shape != late.shape:
        raise ShapeError(f"unet_combine: shapes {early.shape} and {late.shape} differ")
    return ad.matmul(ad.concat([early, late], axis=-1), w_skip)


def encode_stack(x: Tensor, params: dict, cfg: BlockConfig, prefix: str, rng=None) -> list:
    """Run the block stack and return every layer's output.

    The returned list has one entry per layer; the last entry is the
    final representation (after the closing layer norm).  Skip
    combination, when enabled, feeds layer i the projected concatenation
    of layer (n-1-i)'s output and the running stream, for i >= n/2.
    """
    if x.shape[-1] != cfg.d:
        raise ShapeError(f"encode_stack: input width {x.shape[-1]} != configured d {cfg.d}")
    L = x.shape[0]
    bias = alibi_bias(cfg.heads, L, x.data.dtype) if cfg.use_alibi else None
    outputs = []
    stream = x
    for i in range(cfg.layers):
        if cfg.use_unet_skips and i >= cfg.layers // 2:
            stream = unet_combine(outputs[cfg.layers - 1 - i], stream, params[f"{prefix}.skip{i}.w"])
        stream = _block(stream, params, cfg, f"{prefix}.block{i}", bias, rng)
        outputs.append(stream)
    outputs[-1] = ad.layer_norm(outputs[-1], params[f"{prefix}.lnf.g"], params[f"{prefix}.lnf.b"])
    return outputs


def conv_positional(x: Tensor, w: Tensor, groups: int) -> Tensor:
    """Positional embedding: grouped same-length convolution followed by GELU.

    The caller adds the result to the input before the first block.
    """
    return ad.gelu(ad.conv1d_grouped(x, w, groups))
