"""Discrete bottleneck and analysis tools: k-means tokenization of encoder
layers with optional residual quantization, bitrate accounting, and
layer-wise mutual information against frame labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels


@dataclass
class KMeansModel:
    """Lloyd's-algorithm centroids for one representation space."""

    centroids: np.ndarray
    layer_index: Optional[int] = None
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, points: np.ndarray) -> np.ndarray:
        """Nearest-centroid index per point, ties to the lowest index."""
        return kernels.nearest_codes(
            np.ascontiguousarray(points, dtype=self.centroids.dtype), self.centroids
        )


def _plusplus_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding: D^2-weighted sampling of initial centroids."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = points[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(points: np.ndarray, k: int, rng, max_iter: int = 100) -> KMeansModel:
    """Lloyd's algorithm with k-means++ init.

    Empty clusters are re-seeded to the point farthest from its centroid.
    Stops when assignments are stable or after ``max_iter`` sweeps; the
    recorded inertia sequence is non-increasing.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"kmeans_fit: need at least k={k} points, got {n}")
    centroids = _plusplus_init(points, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new_labels = kernels.nearest_codes(points, centroids)
        sums, counts = kernels.cluster_sums(points, new_labels, k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            diff = points - centroids[new_labels]
            far = np.argsort(-np.einsum("nd,nd->n", diff, diff))
            for slot, c in enumerate(empty):
                centroids[c] = points[far[slot]]
            new_labels = kernels.nearest_codes(points, centroids)
            sums, counts = kernels.cluster_sums(points, new_labels, k)
        resid = points - centroids[new_labels]
        history.append(float(np.einsum("nd,nd->", resid, resid)))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        nonzero = counts > 0
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
    return KMeansModel(centroids=centroids, n_iter=it, inertia_history=history)


# ---------------------------------------------------------------------------
# discrete bottleneck (semantic + optional residual quantization)


def quantize_condition(
    layer_outputs: list,
    cond_weights: list,
    semantic_layer: int,
    semantic_model: KMeansModel,
    residual_model: Optional[KMeansModel] = None,
):
    """Quantized decoder conditioning.

    The semantic layer's representation is snapped to its nearest
    centroid and projected; optionally the projected sum of the remaining
    layers is snapped to a second codebook and added.  Returns the
    conditioning array plus the semantic (and residual, if any) token
    streams.
    """
    if semantic_model is None:
        raise ValueError("quantize_condition: semantic k-means model is not fitted")
    z_i = np.asarray(layer_outputs[semantic_layer])
    sem_tokens = semantic_model.assign(z_i)
    zbar = semantic_model.centroids[sem_tokens].astype(z_i.dtype) @ np.asarray(
        cond_weights[semantic_layer]
    )
    res_tokens = None
    if residual_model is not None:
        rest = residual_sum(layer_outputs, cond_weights, semantic_layer)
        res_tokens = residual_model.assign(rest)
        zbar = zbar + residual_model.centroids[res_tokens].astype(z_i.dtype)
    return zbar, sem_tokens, res_tokens


def residual_sum(layer_outputs: list, cond_weights: list, semantic_layer: int) -> np.ndarray:
    """Projected sum of every non-semantic layer (the residual-codebook input)."""
    total = None
    for j, z in enumerate(layer_outputs):
        if j == semantic_layer:
            continue
        term = np.asarray(z) @ np.asarray(cond_weights[j])
        total = term if total is None else total + term
    if total is None:
        raise ValueError("residual_sum: no non-semantic layers")
    return total


# ---------------------------------------------------------------------------
# token streams and bitrate


@dataclass
class TokenStream:
    """Discrete tokens for one utterance at a fixed frame rate."""

    semantic: np.ndarray
    residual: Optional[np.ndarray]
    frame_rate: float
    codebook_sizes: list

    def streams(self) -> list:
        out = [self.semantic]
        if self.residual is not None:
            out.append(self.residual)
        return out


def bitrate(stream: TokenStream) -> float:
    """Bits per second: ceil(log2 k) per codebook, times the frame rate."""
    if any(k < 1 for k in stream.codebook_sizes):
        raise ValueError(f"invalid codebook sizes {stream.codebook_sizes}")
    return float(sum(math.ceil(math.log2(k)) for k in stream.codebook_sizes) * stream.frame_rate)


def write_tokens(path, streams: list) -> None:
    """Token file: '#' header lines (codebook sizes, frame rate), then one
    line of space-separated integers per utterance (streams interleaved
    as separate lines when a residual codebook is present)."""
    if not streams:
        raise ValueError("write_tokens: no streams")
    sizes = streams[0].codebook_sizes
    with open(path, "w") as f:
        f.write("# flowdistill tokens v1\n")
        f.write(f"# codebooks: {','.join(str(s) for s in sizes)}\n")
        f.write(f"# frame_rate_hz: {streams[0].frame_rate}\n")
        for ts in streams:
            for seq in ts.streams():
                f.write(" ".join(str(int(v)) for v in seq) + "\n")


def read_tokens(path):
    """Parse a token file; returns (codebook sizes, frame rate, list of lines)."""
    sizes, rate, lines = None, None, []
    with open(path) as f:
        for raw in f:
            raw = raw.strip()
            if not raw:
                continue
            if raw.startswith("#"):
                if raw.startswith("# codebooks:"):
                    sizes = [int(s) for s in raw.split(":", 1)[1].split(",")]
                elif raw.startswith("# frame_rate_hz:"):
                    rate = float(raw.split(":", 1)[1])
                continue
            lines.append(np.array([int(v) for v in raw.split()], dtype=np.int64))
    if sizes is None or rate is None:
        raise ValueError(f"{path}: missing token header")
    return sizes, rate, lines


# ---------------------------------------------------------------------------
# mutual information


def mutual_information(units, labels) -> float:
    """Empirical mutual information of two aligned discrete streams, in bits.

    Zero-count cells are skipped; the summation uses fsum so the result
    is exactly symmetric in its arguments.
    """
    u = np.asarray(units).ravel()
    l = np.asarray(labels).ravel()
    if u.shape[0] != l.shape[0]:
        raise ValueError(f"mutual_information: lengths differ, {u.shape[0]} vs {l.shape[0]}")
    if u.shape[0] == 0:
        raise ValueError("mutual_information: empty streams")
    _, ui = np.unique(u, return_inverse=True)
    _, li = np.unique(l, return_inverse=True)
    ka, kb = int(ui.max()) + 1, int(li.max()) + 1
    n = u.shape[0]
    counts = kernels.joint_counts(
        np.ascontiguousarray(ui, dtype=np.int64), np.ascontiguousarray(li, dtype=np.int64), ka, kb
    )
    # marginals from integer sums, so exact dependence structure (constant
    # or identical streams) yields exact probability ratios
    pu = counts.sum(axis=1) / n
    pl = counts.sum(axis=0) / n
    joint = counts / n
    terms = []
    for a in range(ka):
        for b in range(kb):
            p = joint[a, b]
            if p > 0.0:
                terms.append(p * math.log2(p / (pu[a] * pl[b])))
    return math.fsum(terms)


def entropy_bits(labels) -> float:
    """Empirical entropy of a discrete stream, in bits."""
    _, counts = np.unique(np.asarray(labels).ravel(), return_counts=True)
    p = counts / counts.sum()
    return float(math.fsum(-pi * math.log2(pi) for pi in p))


# ---------------------------------------------------------------------------
# layer-wise analysis


@dataclass
class MIRow:
    layer: str
    mi_phone: float
    mi_speaker: float


@dataclass
class MIReport:
    rows: list
    k: int

    def best_phone_layer(self) -> int:
        """Index (0-based) of the encoder layer with the highest phone MI.

        Ties go to the shallower layer; the raw-input row is excluded.
        """
        best, best_mi = None, -1.0
        for row in self.rows:
            if row.layer == "input":
                continue
            idx = int(row.layer)
            if row.mi_phone > best_mi:
                best, best_mi = idx, row.mi_phone
        return best


def layer_mi_report(model, corpus, k: int, rng, max_iter: int = 100) -> MIReport:
    """Quantize the raw input and every encoder layer, then measure MI
    against the corpus's phone and speaker frame labels."""
    feats, layer_frames, phones, speakers = collect_layer_frames(model, corpus)
    rows = []
    spaces = [("input", feats)] + [(str(i), z) for i, z in enumerate(layer_frames)]
    for name, pts in spaces:
        km = kmeans_fit(pts, k, rng, max_iter=max_iter)
        units = km.assign(pts)
        rows.append(
            MIRow(
                layer=name,
                mi_phone=mutual_information(units, phones),
                mi_speaker=mutual_information(units, speakers),
            )
        )
    return MIReport(rows=rows, k=k)


def collect_layer_frames(model, corpus):
    """Stack normalized input frames, per-layer encoder outputs and labels
    over a whole corpus (teacher-free student forward, no masking)."""
    from . import autodiff as ad

    feats, phones, speakers = [], [], []
    per_layer = [[] for _ in range(model.cfg.encoder.layers)]
    for utt in corpus.utterances:
        x = model.normalize(utt.features.astype(np.float64)).astype(model.cfg.dtype)
        with ad.no_grad():
            layers = model.student_layers(x)
        for i, z in enumerate(layers):
            per_layer[i].append(z.data)
        feats.append(x)
        phones.append(utt.phones)
        speakers.append(np.full(len(utt.phones), utt.speaker, dtype=np.int64))
    return (
        np.concatenate(feats),
        [np.concatenate(chunks) for chunks in per_layer],
        np.concatenate(phones),
        np.concatenate(speakers),
    )
