"""Student encoder machinery: span masking, the EMA teacher, per-layer
online-clustered codebooks, pseudo-label prediction and the encoder loss.

The student sees masked input and predicts, from its final layer, the
codebook index that each masked frame's teacher embedding falls into.
Codebooks follow the teacher through decayed sums and counts, so the
codeword invariant e = s / n holds after every update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor


@dataclass
class MaskSpec:
    """The set of masked frame indices plus the span process that produced it."""

    indices: np.ndarray
    starts: np.ndarray
    prob: float
    span: int

    def __len__(self):
        return int(self.indices.size)


def sample_mask(length: int, prob: float, span: int, rng) -> MaskSpec:
    """Draw span starts independently per frame, union the spans.

    Each frame is a span start with probability ``prob``; a span covers
    ``span`` consecutive frames, clipped at the sequence end.  An empty
    draw forces a single span at a random start, so training always has
    at least one masked frame.  Draw order: one uniform per frame, then
    (only if empty) one integer.
    """
    if not 0.0 < prob < 1.0:
        raise ValueError(f"mask start probability must be in (0, 1), got {prob}")
    if span < 1:
        raise ValueError(f"span length must be >= 1, got {span}")
    starts = np.flatnonzero(rng.random(length) < prob)
    if starts.size == 0:
        starts = np.array([int(rng.integers(length))])
    covered = np.zeros(length, dtype=bool)
    for s in starts:
        covered[s : s + span] = True
    return MaskSpec(indices=np.flatnonzero(covered), starts=starts, prob=prob, span=span)


def apply_mask(x: Tensor, mask: MaskSpec, mask_embedding: Tensor) -> Tensor:
    """Replace masked frames with the learned mask embedding (input space)."""
    L, d = x.shape
    if mask_embedding.shape != (d,):
        raise ad.ShapeError(f"apply_mask: embedding {mask_embedding.shape} != frame width {d}")
    hole = np.zeros((L, 1), dtype=x.data.dtype)
    hole[mask.indices] = 1.0
    keep = Tensor(1.0 - hole)
    return x * keep + ad.reshape(mask_embedding, (1, d)) * Tensor(hole)


@dataclass
class Codebook:
    """EMA-clustered codewords for one teacher layer (decayed sums and counts)."""

    sums: np.ndarray
    counts: np.ndarray
    codes: np.ndarray
    decay: float

    @classmethod
    def init(cls, size: int, dim: int, decay: float, rng, dtype=np.float32) -> "Codebook":
        sums = rng.normal(0.0, dim**-0.5, size=(size, dim)).astype(dtype)
        counts = np.ones(size, dtype=dtype)
        return cls(sums=sums, counts=counts, codes=sums / counts[:, None], decay=decay)

    @property
    def size(self) -> int:
        return self.sums.shape[0]

    def assign(self, points: np.ndarray) -> np.ndarray:
        """Nearest codeword index per point; ties break to the lowest index."""
        return kernels.nearest_codes(
            np.ascontiguousarray(points, dtype=self.codes.dtype), self.codes
        )

    def update(self, points: np.ndarray, labels: np.ndarray) -> None:
        """Decay sums and counts toward this batch of assigned embeddings.

        Codewords with no assignments decay sum and count by the same
        factor, leaving their position unchanged.
        """
        g = self.decay
        add_s, add_n = kernels.cluster_sums(
            np.ascontiguousarray(points, dtype=self.sums.dtype), labels, self.size
        )
        self.sums = g * self.sums + (1.0 - g) * add_s
        self.counts = g * self.counts + (1.0 - g) * add_n.astype(self.counts.dtype)
        self.codes = self.sums / self.counts[:, None]

    def perplexity(self, labels: np.ndarray) -> float:
        """exp(entropy) of this batch's codeword usage distribution."""
        if labels.size == 0:
            return 0.0
        p = np.bincount(labels, minlength=self.size) / labels.size
        nz = p[p > 0]
        return float(np.exp(-(nz * np.log(nz)).sum()))


def teacher_labels(teacher_outputs: list, codebooks: list) -> list:
    """Pseudo-labels: nearest codeword per frame, one stream per target layer.

    ``teacher_outputs`` are the teacher's top-K layer outputs (as numpy
    arrays, gradient-free by construction), aligned with ``codebooks``.
    """
    return [cb.assign(z) for z, cb in zip(teacher_outputs, codebooks)]


def init_heads(n_heads: int, dim: int, vocab: int, rng, dtype=np.float32) -> list:
    """One linear + softmax head per target layer, mapping R^d to the label simplex."""
    heads = []
    for _ in range(n_heads):
        w = Tensor(rng.normal(0.0, dim**-0.5, size=(dim, vocab)).astype(dtype), requires_grad=True)
        b = Tensor(np.zeros(vocab, dtype=dtype), requires_grad=True)
        heads.append((w, b))
    return heads


def encoder_loss(z_final: Tensor, heads: list, labels: list, mask: MaskSpec) -> Tensor:
    """Masked-frame cross entropy averaged over target layers and masked frames.

    Predictions always come from the final student layer, whatever the
    target layer; only masked positions contribute.
    """
    if len(mask) == 0:
        raise ValueError("encoder_loss: empty mask (sample_mask guarantees at least one frame)")
    if len(heads) != len(labels):
        raise ValueError(f"encoder_loss: {len(heads)} heads but {len(labels)} label streams")
    zm = ad.take_rows(z_final, mask.indices)
    total = None
    for (w, b), y in zip(heads, labels):
        logp = ad.log_softmax(ad.matmul(zm, w) + b, axis=-1)
        picked = ad.gather(logp, y[mask.indices]).sum()
        total = picked if total is None else total + picked
    return total * (-1.0 / (len(heads) * len(mask)))


@dataclass
class TeacherState:
    """EMA copy of the student with a linearly ramped decay factor."""

    params: dict
    decay_start: float = 0.9997
    decay_end: float = 1.0
    ramp_steps: int = 1

    @classmethod
    def from_student(cls, student: dict, decay_start, decay_end, ramp_steps) -> "TeacherState":
        frozen = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in student.items()}
        return cls(frozen, decay_start, decay_end, ramp_steps)

    def gamma(self, step: int) -> float:
        frac = min(1.0, step / self.ramp_steps) if self.ramp_steps > 0 else 1.0
        return self.decay_start + (self.decay_end - self.decay_start) * frac


def ema_update(teacher: TeacherState, student: dict, step: int) -> None:
    """teacher <- gamma * teacher + (1 - gamma) * student, elementwise."""
    g = teacher.gamma(step)
    for name, tparam in teacher.params.items():
        sdata = student[name].data
        tparam.data = g * tparam.data + (1.0 - g) * sdata
