"""Flow-matching decoder: optimal-transport conditional paths, the
regression target, timestep conditioning, and the weighted-sum encoder
conditioning that couples the decoder to the representation encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transformer as tfm
from .autodiff import ShapeError, Tensor

TIME_MODES = ("uniform", "logit-normal")


@dataclass
class FlowSample:
    """One conditional-path draw: endpoints, time, interpolant and target field."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    phi: np.ndarray
    u: np.ndarray


def ot_path(x0: np.ndarray, x1: np.ndarray, t: float, sigma_min: float) -> FlowSample:
    """Linear-in-time interpolation between noise and data.

    phi_t = (1 - (1 - sigma_min) t) x0 + t x1, with constant target field
    u = x1 - (1 - sigma_min) x0.
    """
    if x0.shape != x1.shape:
        raise ShapeError(f"ot_path: endpoint shapes differ, {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"ot_path: t must lie in [0, 1], got {t}")
    if sigma_min <= 0.0:
        raise ValueError(f"ot_path: sigma_min must be positive, got {sigma_min}")
    shrink = 1.0 - (1.0 - sigma_min) * t
    phi = shrink * x0 + t * x1
    u = x1 - (1.0 - sigma_min) * x0
    return FlowSample(x0=x0, x1=x1, t=float(t), phi=phi, u=u)


def sample_time(rng, mode: str = "uniform") -> float:
    """Draw a path time in the open interval (0, 1).

    Pre-training uses the uniform mode; conditional fine-tuning uses
    logit-normal(0, 1), i.e. the sigmoid of a standard normal draw.
    """
    if mode == "uniform":
        t = float(rng.random())
    elif mode == "logit-normal":
        t = float(1.0 / (1.0 + np.exp(-rng.normal())))
    else:
        raise ValueError(f"unknown time sampling mode {mode!r} (expected one of {TIME_MODES})")
    tiny = 1e-12
    return min(max(t, tiny), 1.0 - tiny)


def timestep_embedding(t: float, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of the path time, frequencies geometric in [1, 1e4]."""
    half = dim // 2
    freqs = np.geomspace(1.0, 1e4, half)
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)]).astype(dtype)


def init_decoder(cfg: tfm.BlockConfig, d_x: int, n_enc_layers: int, rng, dtype) -> dict:
    """Decoder stack plus the input/output projections and one conditioning
    projection per encoder layer (the raw input embedding is excluded)."""
    p = tfm.init_stack(cfg, rng, dtype, "dec")
    p["dec.in.w0"] = tfm._linear(rng, d_x, cfg.d, dtype)
    p["dec.out.w"] = tfm._linear(rng, cfg.d, d_x, dtype)
    p["dec.out.b"] = Tensor(np.zeros(d_x, dtype=dtype), requires_grad=True)
    for i in range(n_enc_layers):
        p[f"cond.w{i}"] = tfm._linear(rng, cfg.d, cfg.d, dtype)
    return p


def condition_from_layers(layer_outputs: list, params: dict) -> Tensor:
    """Learned weighted sum of encoder layers: z = sum_i W_i z_i."""
    z = None
    for i, layer in enumerate(layer_outputs):
        w = params.get(f"cond.w{i}")
        if w is None:
            raise KeyError(f"conditioning projection cond.w{i} missing for layer {i}")
        term = ad.matmul(layer, w)
        z = term if z is None else z + term
    return z


def decoder_forward(phi_t, t: float, z, params: dict, cfg: tfm.BlockConfig) -> Tensor:
    """Predict the vector field for the noisy frames ``phi_t`` at time ``t``.

    The token sequence is the timestep embedding prepended to the
    projected noisy frames plus the conditioning ``z`` (pass None for the
    unconditional path).  The timestep token's output is discarded and
    frames are projected back to input width.
    """
    phi_t = phi_t if isinstance(phi_t, Tensor) else Tensor(np.asarray(phi_t))
    L = phi_t.shape[0]
    frames = ad.matmul(phi_t, params["dec.in.w0"])
    if z is not None:
        if z.shape != frames.shape:
            raise ShapeError(f"decoder_forward: conditioning {z.shape} != frames {frames.shape}")
        frames = frames + z
    token = Tensor(timestep_embedding(t, cfg.d, phi_t.data.dtype).reshape(1, cfg.d))
    stream = ad.concat([token, frames], axis=0)
    final = tfm.encode_stack(stream, params, cfg, "dec")[-1]
    out = ad.take_rows(final, np.arange(1, L + 1))
    return ad.matmul(out, params["dec.out.w"]) + params["dec.out.b"]


def cfm_loss(v_pred: Tensor, sample: FlowSample, mask) -> Tensor:
    """Mean squared field error over masked frames and feature dimensions."""
    if len(mask) == 0:
        raise ValueError("cfm_loss: empty mask")
    idx = mask.indices
    target = Tensor(np.ascontiguousarray(sample.u[idx], dtype=v_pred.data.dtype))
    diff = ad.take_rows(v_pred, idx) - target
    return ad.sumsq(diff) * (1.0 / (idx.size * v_pred.shape[1]))
