"""Synthetic feature corpus: generation, normalization, cropping and
batching, plus the binary corpus container.

Each utterance is a concatenation of variable-length segments; a segment
carries one phone-like label and its frames are the phone's prototype
vector plus a per-speaker offset plus Gaussian noise.  Labels are exact
by construction, which is what makes the layer-wise MI analysis
meaningful on synthetic data.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .encoder import MaskSpec, sample_mask

MAGIC = b"FDCORPUS"
VERSION = 1


@dataclass
class CorpusParams:
    n_utterances: int = 256
    d_x: int = 8
    n_phones: int = 12
    n_speakers: int = 6
    min_len: int = 40
    max_len: int = 120
    segment_mean: float = 8.0
    noise_scale: float = 0.3
    speaker_scale: float = 0.5

    def validate(self):
        if self.n_phones < 2:
            raise ValueError(f"need at least 2 phone labels, got {self.n_phones}")
        if self.n_speakers < 1:
            raise ValueError(f"need at least 1 speaker, got {self.n_speakers}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.segment_mean < 1.0:
            raise ValueError(f"segment mean must be >= 1 frame, got {self.segment_mean}")
        if self.noise_scale < 0 or self.speaker_scale < 0:
            raise ValueError("noise and speaker scales must be non-negative")
        if self.n_utterances < 1 or self.d_x < 1:
            raise ValueError("corpus must have at least one utterance and one dimension")


@dataclass
class Utterance:
    features: np.ndarray
    phones: np.ndarray
    speaker: int

    def __len__(self):
        return self.features.shape[0]


@dataclass
class SyntheticCorpus:
    utterances: list
    d_x: int
    n_phones: int
    n_speakers: int
    params: Optional[CorpusParams] = None

    def __len__(self):
        return len(self.utterances)

    def all_frames(self) -> np.ndarray:
        return np.concatenate([u.features for u in self.utterances])


def generate_corpus(params: CorpusParams, rng) -> SyntheticCorpus:
    """Deterministic synthetic corpus from a single generator.

    Draw order: phone prototypes, speaker offsets, then per utterance:
    length, speaker, segment labels/lengths, frame noise.
    """
    params.validate()
    prototypes = rng.normal(0.0, 1.0, size=(params.n_phones, params.d_x))
    offsets = rng.normal(0.0, params.speaker_scale, size=(params.n_speakers, params.d_x))
    utts = []
    for _ in range(params.n_utterances):
        L = int(rng.integers(params.min_len, params.max_len + 1))
        speaker = int(rng.integers(params.n_speakers))
        phones = np.empty(L, dtype=np.int64)
        pos = 0
        while pos < L:
            label = int(rng.integers(params.n_phones))
            seg = int(rng.geometric(1.0 / params.segment_mean))
            phones[pos : pos + seg] = label
            pos += seg
        noise = params.noise_scale * rng.standard_normal((L, params.d_x))
        feats = (prototypes[phones] + offsets[speaker] + noise).astype(np.float32)
        utts.append(Utterance(features=feats, phones=phones, speaker=speaker))
    return SyntheticCorpus(
        utterances=utts,
        d_x=params.d_x,
        n_phones=params.n_phones,
        n_speakers=params.n_speakers,
        params=params,
    )


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    floored_dims: list = field(default_factory=list)


def normalize(corpus: SyntheticCorpus):
    """Scale the whole corpus to zero mean, unit variance per dimension.

    Zero-variance dimensions are floored at 1e-8 (with a warning) and
    come out constant zero.  Returns the normalized corpus and the stats
    needed to undo the transform after generation.
    """
    if len(corpus) == 0:
        raise ValueError("normalize: empty corpus")
    frames = corpus.all_frames().astype(np.float64)
    mean = frames.mean(axis=0)
    var = frames.var(axis=0)
    floored = np.flatnonzero(var < 1e-8).tolist()
    if floored:
        warnings.warn(f"normalize: variance floored at 1e-8 in dimensions {floored}")
    std = np.sqrt(np.maximum(var, 1e-8))
    stats = NormStats(mean=mean, std=std, floored_dims=floored)
    utts = [
        Utterance(
            features=((u.features - mean) / std).astype(np.float32),
            phones=u.phones,
            speaker=u.speaker,
        )
        for u in corpus.utterances
    ]
    out = SyntheticCorpus(
        utterances=utts,
        d_x=corpus.d_x,
        n_phones=corpus.n_phones,
        n_speakers=corpus.n_speakers,
        params=corpus.params,
    )
    return out, stats


def denormalize(features: np.ndarray, stats: NormStats) -> np.ndarray:
    return features * stats.std + stats.mean


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchItem:
    features: np.ndarray
    phones: np.ndarray
    speaker: int
    mask: MaskSpec
    length: int


@dataclass
class Batch:
    """Equal-length stacked view plus per-item true lengths and masks.

    Frames at index >= lengths[i] are padding; masks are sampled over the
    real frames only, so padding never contributes to any loss.
    """

    features: np.ndarray
    lengths: np.ndarray
    masks: list
    phones: np.ndarray
    speakers: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def item(self, i: int) -> BatchItem:
        n = int(self.lengths[i])
        return BatchItem(
            features=self.features[i, :n],
            phones=self.phones[i, :n],
            speaker=int(self.speakers[i]),
            mask=self.masks[i],
            length=n,
        )


def make_batch(
    corpus: SyntheticCorpus,
    batch_size: int,
    crop_len: int,
    mask_prob: float,
    mask_span: int,
    rng,
) -> Batch:
    """Sample utterances with replacement, crop to the frame cap, pad, mask.

    Draw order per item: utterance index, crop offset (only when longer
    than the cap), then the mask over the kept frames.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    items = []
    for _ in range(batch_size):
        utt = corpus.utterances[int(rng.integers(len(corpus)))]
        L = len(utt)
        if L > crop_len:
            start = int(rng.integers(L - crop_len + 1))
            feats = utt.features[start : start + crop_len]
            phones = utt.phones[start : start + crop_len]
        else:
            feats, phones = utt.features, utt.phones
        mask = sample_mask(feats.shape[0], mask_prob, mask_span, rng)
        items.append((feats, phones, utt.speaker, mask))
    l_max = max(f.shape[0] for f, _, _, _ in items)
    B = len(items)
    features = np.zeros((B, l_max, corpus.d_x), dtype=np.float32)
    phones = np.zeros((B, l_max), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    speakers = np.zeros(B, dtype=np.int64)
    masks = []
    for i, (f, p, s, m) in enumerate(items):
        n = f.shape[0]
        features[i, :n] = f
        phones[i, :n] = p
        lengths[i] = n
        speakers[i] = s
        masks.append(m)
    return Batch(features=features, lengths=lengths, masks=masks, phones=phones, speakers=speakers)


# ---------------------------------------------------------------------------
# corpus container I/O


def write_corpus(path, corpus: SyntheticCorpus) -> None:
    """Binary container: header (magic, version, d_x, counts), then per
    utterance the length, float32 little-endian frames row-major, int16
    phone labels and an int16 speaker id."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            struct.pack(
                "<IIIII", VERSION, corpus.d_x, len(corpus), corpus.n_phones, corpus.n_speakers
            )
        )
        for u in corpus.utterances:
            L = len(u)
            f.write(struct.pack("<I", L))
            f.write(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(u.phones, dtype="<i2").tobytes())
            f.write(struct.pack("<h", u.speaker))


def read_corpus(path) -> SyntheticCorpus:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a corpus file (bad magic {magic!r})")
        version, d_x, n_utts, n_phones, n_speakers = struct.unpack("<IIIII", f.read(20))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported corpus version {version}")
        utts = []
        for _ in range(n_utts):
            (L,) = struct.unpack("<I", f.read(4))
            feats = np.frombuffer(f.read(4 * L * d_x), dtype="<f4").reshape(L, d_x).copy()
            phones = np.frombuffer(f.read(2 * L), dtype="<i2").astype(np.int64)
            (speaker,) = struct.unpack("<h", f.read(2))
            utts.append(Utterance(features=feats, phones=phones, speaker=int(speaker)))
    return SyntheticCorpus(utterances=utts, d_x=d_x, n_phones=n_phones, n_speakers=n_speakers)
