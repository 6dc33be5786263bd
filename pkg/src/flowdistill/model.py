"""Joint model container: encoder, EMA teacher, prediction heads,
flow-matching decoder and the conditioning projections, all as one flat
named-parameter dict plus the non-gradient state (codebooks, teacher,
normalization statistics).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from . import transformer as tfm
from .autodiff import Tensor


@dataclass
class ModelConfig:
    d_x: int = 8
    encoder: tfm.BlockConfig = field(default_factory=lambda: tfm.BlockConfig(layers=4))
    decoder: tfm.BlockConfig = field(
        default_factory=lambda: tfm.BlockConfig(layers=2, use_unet_skips=True)
    )
    vocab: int = 32
    n_targets: int = 2
    code_decay: float = 0.9
    teacher_start: float = 0.9997
    teacher_end: float = 1.0
    teacher_ramp: int = 1333
    mask_prob: float = 0.08
    mask_span: int = 10
    sigma_min: float = 1e-5
    n_phones: int = 12
    precision: str = "f32"

    def __post_init__(self):
        if self.encoder.d != self.decoder.d:
            raise ValueError("encoder and decoder hidden sizes must match")
        if self.n_targets > self.encoder.layers:
            raise ValueError("cannot target more teacher layers than the encoder has")

    @property
    def dtype(self):
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        return np.float32 if self.precision == "f32" else np.float64


class JointModel:
    """Parameters plus teacher/codebook state for the full framework.

    Creation draws from a single generator in a fixed order (input
    projection, mask embedding, positional conv, encoder stack, heads,
    decoder, conditioning projections, codebooks) so runs are
    reproducible from the seed alone.
    """

    def __init__(self, cfg: ModelConfig, params, teacher, codebooks, extras=None):
        self.cfg = cfg
        self.params = params
        self.teacher = teacher
        self.codebooks = codebooks
        self.norm_mean = None
        self.norm_std = None
        self.extras = extras or {}

    @classmethod
    def create(cls, cfg: ModelConfig, rng) -> "JointModel":
        dt = cfg.dtype
        d, d_x = cfg.encoder.d, cfg.d_x
        p = {}
        p["enc.in.w"] = tfm._linear(rng, d_x, d, dt)
        p["enc.in.b"] = Tensor(np.zeros(d, dtype=dt), requires_grad=True)
        p["enc.mask_emb"] = Tensor(
            rng.normal(0.0, d_x**-0.5, size=d_x).astype(dt), requires_grad=True
        )
        p.update(tfm.init_conv_positional(cfg.encoder, rng, dt, "enc.pos.w"))
        p.update(tfm.init_stack(cfg.encoder, rng, dt, "enc"))
        for k, (w, b) in enumerate(enc.init_heads(cfg.n_targets, d, cfg.vocab, rng, dt)):
            p[f"head{k}.w"], p[f"head{k}.b"] = w, b
        p.update(dec.init_decoder(cfg.decoder, d_x, cfg.encoder.layers, rng, dt))
        codebooks = [
            enc.Codebook.init(cfg.vocab, d, cfg.code_decay, rng, dt) for _ in range(cfg.n_targets)
        ]
        teacher = enc.TeacherState.from_student(
            {k: v for k, v in p.items() if k.startswith("enc.")},
            cfg.teacher_start,
            cfg.teacher_end,
            cfg.teacher_ramp,
        )
        return cls(cfg, p, teacher, codebooks)

    # -- conditional fine-tuning parameters, added lazily -------------------

    def add_conditioning_params(self, rng) -> None:
        """Learned null conditioning row and phone embedding table (fine-tune)."""
        dt = self.cfg.dtype
        d = self.cfg.encoder.d
        if "ft.null_cond" not in self.params:
            self.params["ft.null_cond"] = Tensor(
                rng.normal(0.0, d**-0.5, size=d).astype(dt), requires_grad=True
            )
            self.params["ft.phone_emb"] = Tensor(
                rng.normal(0.0, d**-0.5, size=(self.cfg.n_phones, d)).astype(dt),
                requires_grad=True,
            )

    # -- forward passes ------------------------------------------------------

    def _embed(self, x: Tensor, params: dict) -> Tensor:
        h = ad.matmul(x, params["enc.in.w"]) + params["enc.in.b"]
        return h + tfm.conv_positional(h, params["enc.pos.w"], self.cfg.encoder.conv_groups)

    def student_layers(self, features: np.ndarray, mask=None, rng=None) -> list:
        """Per-layer student outputs; masked frames are replaced before embedding."""
        x = Tensor(np.ascontiguousarray(features, dtype=self.cfg.dtype))
        if mask is not None:
            x = enc.apply_mask(x, mask, self.params["enc.mask_emb"])
        h = self._embed(x, self.params)
        return tfm.encode_stack(h, self.params, self.cfg.encoder, "enc", rng=rng)

    def teacher_layers(self, features: np.ndarray) -> list:
        """Teacher outputs on unmasked input, as plain arrays (no graph)."""
        tp = self.teacher.params
        with ad.no_grad():
            x = Tensor(np.ascontiguousarray(features, dtype=self.cfg.dtype))
            h = self._embed(x, tp)
            outs = tfm.encode_stack(h, tp, self.cfg.encoder, "enc")
        return [o.data for o in outs]

    def target_layers(self, teacher_outputs: list) -> list:
        """The top-K teacher layers used for pseudo-labels, shallow to deep."""
        return teacher_outputs[-self.cfg.n_targets :]

    def heads(self) -> list:
        return [
            (self.params[f"head{k}.w"], self.params[f"head{k}.b"])
            for k in range(self.cfg.n_targets)
        ]

    def condition(self, layer_outputs: list) -> Tensor:
        return dec.condition_from_layers(layer_outputs, self.params)

    def decoder_field(self, x: np.ndarray, t: float, z) -> np.ndarray:
        """Gradient-free decoder evaluation for sampling."""
        with ad.no_grad():
            zt = None if z is None else (z if isinstance(z, Tensor) else Tensor(z))
            v = dec.decoder_forward(
                Tensor(np.ascontiguousarray(x, dtype=self.cfg.dtype)),
                t,
                zt,
                self.params,
                self.cfg.decoder,
            )
        return v.data

    # -- parameter bookkeeping ----------------------------------------------

    def trainable(self, scope: str = "full") -> dict:
        """Named parameters to optimize.

        ``full`` is everything; ``decoder`` restricts to the decoder stack,
        its projections, the conditioning projections and any fine-tune
        embeddings (the encoder, heads and mask embedding stay fixed).
        """
        if scope == "full":
            return dict(self.params)
        if scope == "decoder":
            return {
                k: v
                for k, v in self.params.items()
                if k.startswith(("dec.", "cond.", "ft."))
            }
        raise ValueError(f"unknown trainable scope {scope!r}")

    def normalize(self, features: np.ndarray) -> np.ndarray:
        if self.norm_mean is None:
            return features
        return (features - self.norm_mean) / self.norm_std

    def denormalize(self, features: np.ndarray) -> np.ndarray:
        if self.norm_mean is None:
            return features
        return features * self.norm_std + self.norm_mean
