"""Grouping per-frame embeddings into contiguous temporal events.

The primary segmenter streams frames in order and starts a new event
whenever a frame's cosine similarity to the current event's running center
drops below a threshold. The running center is the halving update
``mu <- (mu + f) / 2`` — an exponentially weighted average that favors
recent frames — applied exactly as stated, not replaced by an arithmetic
mean. Two baselines (fixed equal division and k-means over frames) exist
for comparison runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CoverageMismatchError,
    DegenerateVectorError,
    IngestionError,
    ParameterError,
)

NORM_FLOOR = 1e-12


@dataclass
class EventSegmentation:
    """Ordered contiguous frame spans with one center vector per span.

    Spans are (start, end) pairs with both endpoints inclusive; together
    they partition [0, n_frames-1] in order. ``centers`` is a (n_spans, d)
    matrix, or None for segmentations parsed from text without a centers
    sidecar.
    """

    video_id: str
    spans: list[tuple[int, int]]
    centers: Optional[np.ndarray]

    @property
    def n_frames(self) -> int:
        return self.spans[-1][1] + 1 if self.spans else 0

    def cut_positions(self) -> set[int]:
        """Start indices of every span after the first (the internal cuts)."""
        return {start for start, _ in self.spans[1:]}


def validate_segmentation(seg: EventSegmentation, n_frames: Optional[int] = None) -> None:
    """Raise if spans fail to partition [0, n-1] in order, or centers mismatch."""
    if not seg.spans:
        raise IngestionError(f"segmentation of '{seg.video_id}' has no spans")
    expect = 0
    for start, end in seg.spans:
        if start != expect or end < start:
            raise IngestionError(
                f"segmentation of '{seg.video_id}' has bad span ({start},{end}) at frame {expect}"
            )
        expect = end + 1
    if n_frames is not None and expect != n_frames:
        raise CoverageMismatchError(
            f"segmentation of '{seg.video_id}' covers {expect} frames, expected {n_frames}"
        )
    if seg.centers is not None and len(seg.centers) != len(seg.spans):
        raise CoverageMismatchError(
            f"segmentation of '{seg.video_id}' has {len(seg.centers)} centers for {len(seg.spans)} spans"
        )


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    raw = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, raw))


def pgvs_segment(frames: np.ndarray, epsilon: float, video_id: str = "") -> EventSegmentation:
    """Stream frames into events by thresholded similarity to a running center.

    The first frame opens the first event with center f_0. Each later frame
    joins the current event iff cosine(f_i, center) >= epsilon (ties join);
    joining updates the center to (center + f_i) / 2, otherwise a new event
    opens with center f_i. Runs in one pass, so event count and lengths are
    free to vary per video.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ParameterError(f"need a nonempty (n, d) frame matrix, got shape {frames.shape}")
    norms = np.sqrt((frames * frames).sum(axis=1))
    bad = np.nonzero(norms <= NORM_FLOOR)[0]
    if bad.size:
        raise DegenerateVectorError(f"frame {int(bad[0])} of '{video_id}' has near-zero norm")

    epsilon = float(epsilon)
    spans: list[tuple[int, int]] = []
    centers: list[np.ndarray] = []
    start = 0
    mu = frames[0].copy()
    for i in range(1, frames.shape[0]):
        f = frames[i]
        if _cosine(f, mu) >= epsilon:
            mu = (mu + f) / 2.0
        else:
            spans.append((start, i - 1))
            centers.append(mu)
            start = i
            mu = f.copy()
    spans.append((start, frames.shape[0] - 1))
    centers.append(mu)
    return EventSegmentation(video_id=video_id, spans=spans, centers=np.stack(centers))


def equal_division_segment(frames: np.ndarray, k: int, video_id: str = "") -> EventSegmentation:
    """Split frames into min(k, n) contiguous spans of near-equal size.

    When n is not divisible, the leftover frames go to the earliest spans,
    so sizes differ by at most one with longer spans first. Centers are the
    arithmetic means of each span's frames.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ParameterError(f"need a nonempty (n, d) frame matrix, got shape {frames.shape}")
    if k < 1:
        raise ParameterError(f"span count must be positive, got {k}")
    n = frames.shape[0]
    m = min(k, n)
    base, rem = divmod(n, m)
    spans: list[tuple[int, int]] = []
    centers: list[np.ndarray] = []
    start = 0
    for i in range(m):
        size = base + (1 if i < rem else 0)
        end = start + size - 1
        spans.append((start, end))
        centers.append(frames[start:end + 1].mean(axis=0))
        start = end + 1
    return EventSegmentation(video_id=video_id, spans=spans, centers=np.stack(centers))


def kmeans_segment(frames: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
                   video_id: str = "") -> EventSegmentation:
    """Cluster frames with seeded k-means, then cut the label sequence into runs.

    Clustering ignores time, so one cluster interrupted by another becomes
    several spans — the temporal-fragmentation failure mode this baseline
    exists to demonstrate. Each span's center is the final centroid of its
    label.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ParameterError(f"need a nonempty (n, d) frame matrix, got shape {frames.shape}")
    n = frames.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"cluster count {k} must lie in [1, {n}]")

    rng = np.random.default_rng(seed)
    # k-means++ seeding: spread initial centroids proportionally to squared distance
    centroids = np.empty((k, frames.shape[1]))
    centroids[0] = frames[rng.integers(n)]
    d2 = ((frames - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = frames[idx]
        d2 = np.minimum(d2, ((frames - centroids[j]) ** 2).sum(axis=1))

    labels = np.full(n, -1)
    for _ in range(max_iters):
        dists = ((frames[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = frames[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    # label by nearest *final* centroid
    dists = ((frames[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)

    spans: list[tuple[int, int]] = []
    centers: list[np.ndarray] = []
    start = 0
    for i in range(1, n + 1):
        if i == n or labels[i] != labels[start]:
            spans.append((start, i - 1))
            centers.append(centroids[labels[start]].copy())
            start = i
    return EventSegmentation(video_id=video_id, spans=spans, centers=np.stack(centers))


def boundary_f1(predicted: EventSegmentation, truth: Sequence[tuple[int, int]]) -> float:
    """F1 between the internal cut sets of a predicted and a true segmentation.

    A cut is the start index of every span after the first. Two empty cut
    sets (both sides see one event) count as perfect agreement.
    """
    truth_seg = EventSegmentation(video_id=predicted.video_id, spans=list(truth), centers=None)
    validate_segmentation(truth_seg)
    validate_segmentation(predicted)
    if predicted.n_frames != truth_seg.n_frames:
        raise CoverageMismatchError(
            f"predicted covers {predicted.n_frames} frames, truth covers {truth_seg.n_frames}"
        )
    pred_cuts = predicted.cut_positions()
    true_cuts = truth_seg.cut_positions()
    if not pred_cuts and not true_cuts:
        return 1.0
    if not pred_cuts or not true_cuts:
        return 0.0
    hits = len(pred_cuts & true_cuts)
    precision = hits / len(pred_cuts)
    recall = hits / len(true_cuts)
    if hits == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# --- text serialization ----------------------------------------------------------

def format_segmentation(seg: EventSegmentation) -> str:
    """One text record: video_id, a tab, then comma-separated start-end spans."""
    if "\t" in seg.video_id or "\n" in seg.video_id:
        raise IngestionError(f"video id {seg.video_id!r} contains a tab or newline")
    return seg.video_id + "\t" + ",".join(f"{s}-{e}" for s, e in seg.spans)


def parse_segmentation(line: str) -> EventSegmentation:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise IngestionError(f"bad segmentation record: {line!r}")
    video_id, span_text = parts
    spans = []
    for chunk in span_text.split(","):
        bits = chunk.split("-")
        if len(bits) != 2:
            raise IngestionError(f"bad span {chunk!r} in record for '{video_id}'")
        try:
            spans.append((int(bits[0]), int(bits[1])))
        except ValueError:
            raise IngestionError(f"non-integer span {chunk!r} in record for '{video_id}'") from None
    seg = EventSegmentation(video_id=video_id, spans=spans, centers=None)
    validate_segmentation(seg)
    return seg


def write_segmentation_file(path, segs: Sequence[EventSegmentation],
                            centers_path=None) -> None:
    """Write one record per video; optionally a binary sidecar of all centers.

    The sidecar stacks every video's center rows in file order, so it can be
    re-split on read using each record's span count.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for seg in segs:
            fh.write(format_segmentation(seg) + "\n")
    if centers_path is not None:
        from .data_io import write_uemf

        rows = [seg.centers for seg in segs if seg.centers is not None]
        if len(rows) != len(segs):
            raise IngestionError("cannot write a centers sidecar: some segmentations lack centers")
        write_uemf(centers_path, np.concatenate(rows, axis=0))


def read_segmentation_file(path, centers_path=None) -> list[EventSegmentation]:
    segs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                segs.append(parse_segmentation(line))
    if centers_path is not None:
        from .data_io import read_uemf

        centers = read_uemf(centers_path)
        total = sum(len(s.spans) for s in segs)
        if centers.shape[0] != total:
            raise CoverageMismatchError(
                f"centers sidecar has {centers.shape[0]} rows, segmentations have {total} spans"
            )
        offset = 0
        for seg in segs:
            k = len(seg.spans)
            seg.centers = np.asarray(centers[offset:offset + k], dtype=np.float64)
            offset += k
    return segs
