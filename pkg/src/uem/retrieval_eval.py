"""Corpus ranking, recall metrics, and the comparison harnesses.

Evaluation is corpus-level: every query scores every video (segmentations
are query-independent, so they are computed once per video and reused),
rankings break score ties by video id so results never depend on iteration
order, and recalls are reported in percent with their sum as the headline
number.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data_io import Dataset
from .encoders import FrameSequence, TokenSequence, encode_text, encode_video
from .errors import DanglingReferenceError, EmptyCorpusError
from .matching import score_pair, segment_encoded_frames
from .model import ModelParams
from .segmentation import (
    EventSegmentation,
    boundary_f1,
    equal_division_segment,
    kmeans_segment,
    pgvs_segment,
)

SegmentFn = Callable[[np.ndarray, str], EventSegmentation]


@dataclass
class RankingResult:
    """One query's full ordering of the corpus, best first."""

    text_id: str
    ranking: list[tuple[str, float]]

    def rank_of(self, video_id: str) -> int:
        """1-based position of a video; raises if it is not in the corpus."""
        for pos, (vid, _) in enumerate(self.ranking, start=1):
            if vid == video_id:
                return pos
        raise DanglingReferenceError(
            f"video {video_id!r} not in the ranked corpus for text {self.text_id!r}"
        )


@dataclass(frozen=True)
class MetricsReport:
    r1: float
    r5: float
    r10: float
    r100: float
    sumr: float
    query_count: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PreparedVideo:
    video_id: str
    frame_emb: "object"  # encoded frames (tensor)
    seg: EventSegmentation


def prepare_corpus(model: ModelParams, dataset: Dataset,
                   segment_fn: Optional[SegmentFn] = None) -> list[PreparedVideo]:
    """Encode and segment every video once; queries reuse this index."""
    ids = dataset.video_ids()
    if not ids:
        raise EmptyCorpusError(f"dataset {dataset.name!r} has no videos")
    corpus = []
    for vid in ids:
        emb = encode_video(model.video_encoder, model.config,
                           FrameSequence(vid, dataset.video_features(vid)))
        if segment_fn is not None:
            seg = segment_fn(emb.data, vid)
        else:
            seg = segment_encoded_frames(emb.data, model.config, vid)
        corpus.append(PreparedVideo(video_id=vid, frame_emb=emb, seg=seg))
    return corpus


def ranking_from_scores(text_id: str, scores: Sequence[tuple[str, float]]) -> RankingResult:
    """Order (video_id, score) pairs best first; ties by ascending video id.

    The id tie-break makes rankings independent of corpus iteration order.
    """
    if not scores:
        raise EmptyCorpusError("cannot rank an empty corpus")
    ordered = sorted(scores, key=lambda pair: (-pair[1], pair[0]))
    return RankingResult(text_id=text_id, ranking=ordered)


def rank_corpus(model: ModelParams, query: TokenSequence,
                corpus: Sequence[PreparedVideo]) -> RankingResult:
    """Score the query against every prepared video, best score first."""
    if not corpus:
        raise EmptyCorpusError("cannot rank an empty corpus")
    query_emb = encode_text(model.text_encoder, model.config, query)
    scored = []
    for item in corpus:
        s = score_pair(item.frame_emb, item.seg, query_emb, model).similarity
        scored.append((item.video_id, float(s.data)))
    return ranking_from_scores(query.text_id, scored)


def recall_at_k(rankings: Sequence[RankingResult], ground_truth: dict[str, str],
                k: int) -> float:
    """Percent of queries whose true video ranks within the top k."""
    if not rankings:
        raise EmptyCorpusError("no rankings to score")
    hits = 0
    for result in rankings:
        if result.text_id not in ground_truth:
            raise DanglingReferenceError(f"no ground truth for query {result.text_id!r}")
        if result.rank_of(ground_truth[result.text_id]) <= k:
            hits += 1
    return 100.0 * hits / len(rankings)


def metrics_from_rankings(rankings: Sequence[RankingResult],
                          ground_truth: dict[str, str]) -> MetricsReport:
    r1 = recall_at_k(rankings, ground_truth, 1)
    r5 = recall_at_k(rankings, ground_truth, 5)
    r10 = recall_at_k(rankings, ground_truth, 10)
    r100 = recall_at_k(rankings, ground_truth, 100)
    return MetricsReport(r1=r1, r5=r5, r10=r10, r100=r100,
                         sumr=r1 + r5 + r10 + r100, query_count=len(rankings))


def evaluate(model: ModelParams, dataset: Dataset,
             segment_fn: Optional[SegmentFn] = None, threads: int = 1) -> MetricsReport:
    """Full evaluation of one split: every text queries the whole corpus.

    Queries are independent of each other once the corpus index exists, so
    they may fan out across threads; results are collected in query order,
    keeping the report identical to a serial run.
    """
    text_ids = dataset.text_ids()
    if not text_ids:
        raise EmptyCorpusError(f"dataset {dataset.name!r} has no queries")
    corpus = prepare_corpus(model, dataset, segment_fn)
    queries = [TokenSequence(tid, dataset.text_features(tid)) for tid in text_ids]
    if threads > 1 and len(queries) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rankings = list(pool.map(lambda q: rank_corpus(model, q, corpus), queries))
    else:
        rankings = [rank_corpus(model, q, corpus) for q in queries]
    return metrics_from_rankings(rankings, dataset.ground_truth())


# --- threshold sweep -----------------------------------------------------------------

def sweep_epsilon(dataset: Dataset, grid: Sequence[float],
                  model: Optional[ModelParams] = None,
                  boundaries: Optional[dict[str, list]] = None) -> list[dict]:
    """One row per threshold: segmentation statistics, optionally metrics.

    Event counts and boundary agreement are measured by segmenting the
    stored features directly — the space where planted structure lives.
    When a model is given, each row additionally carries retrieval metrics
    evaluated with that threshold patched into the model's config.
    """
    if not grid:
        raise EmptyCorpusError("threshold grid is empty")
    ids = dataset.video_ids()
    if not ids:
        raise EmptyCorpusError(f"dataset {dataset.name!r} has no videos")
    rows = []
    for eps in grid:
        segs = {vid: pgvs_segment(dataset.video_features(vid), eps, video_id=vid)
                for vid in ids}
        row: dict = {
            "epsilon": float(eps),
            "mean_event_count": float(np.mean([len(s.spans) for s in segs.values()])),
        }
        if boundaries is not None:
            scores = [boundary_f1(segs[vid], [tuple(s) for s in boundaries[vid]])
                      for vid in ids if vid in boundaries]
            row["boundary_f1"] = float(np.mean(scores)) if scores else math.nan
        if model is not None:
            patched = dataclasses.replace(model.config, epsilon=float(min(max(eps, -1.0), 1.0)),
                                          use_event_segmentation=True)
            variant = ModelParams(config=patched, text_encoder=model.text_encoder,
                                  video_encoder=model.video_encoder, refiner=model.refiner)
            if eps > 1.0:  # per-frame events: outside the config's legal range, pass through
                report = evaluate(variant, dataset,
                                  segment_fn=lambda vals, vid: pgvs_segment(vals, eps, vid))
            else:
                report = evaluate(variant, dataset)
            row.update(report.to_dict())
        rows.append(row)
    return rows


# --- component / method comparison ------------------------------------------------------

def ablation_matrix(model: ModelParams, dataset: Dataset,
                    boundaries: Optional[dict[str, list]] = None) -> dict[str, list[dict]]:
    """Two comparison tables from one trained model.

    ``components``: the four on/off combinations of event segmentation and
    event refinement (off-segmentation = 32 equal spans; off-refinement =
    the selected event's mean pooling scored directly). ``methods``: the
    three segmentation strategies (equal division, k-means, threshold
    streaming), all scored without refinement so only the grouping differs.
    """
    components = []
    for use_seg in (True, False):
        for use_ref in (True, False):
            cfg = dataclasses.replace(model.config, use_event_segmentation=use_seg,
                                      use_event_refinement=use_ref)
            variant = ModelParams(config=cfg, text_encoder=model.text_encoder,
                                  video_encoder=model.video_encoder,
                                  refiner=model.refiner if use_ref else None)
            row = {"event_segmentation": use_seg, "event_refinement": use_ref}
            row.update(evaluate(variant, dataset).to_dict())
            components.append(row)

    k = model.config.equal_events
    method_fns: dict[str, SegmentFn] = {
        "equal_division": lambda vals, vid: equal_division_segment(vals, k, video_id=vid),
        "kmeans": lambda vals, vid: kmeans_segment(vals, min(k, len(vals)), seed=0, video_id=vid),
        "streaming_threshold": lambda vals, vid: pgvs_segment(vals, model.config.epsilon,
                                                              video_id=vid),
    }
    no_ref = ModelParams(
        config=dataclasses.replace(model.config, use_event_refinement=False),
        text_encoder=model.text_encoder, video_encoder=model.video_encoder, refiner=None,
    )
    methods = []
    for name, fn in method_fns.items():
        row = {"method": name}
        row.update(evaluate(no_ref, dataset, segment_fn=fn).to_dict())
        if boundaries is not None:
            scores = []
            for vid in dataset.video_ids():
                if vid in boundaries:
                    seg = fn(dataset.video_features(vid), vid)
                    scores.append(boundary_f1(seg, [tuple(s) for s in boundaries[vid]]))
            row["boundary_f1"] = float(np.mean(scores)) if scores else math.nan
        methods.append(row)
    return {"components": components, "methods": methods}


# --- table emission ------------------------------------------------------------------

def write_rows_csv(path, rows: Sequence[dict]) -> None:
    """CSV with the union of row keys as columns, first-seen order."""
    if not rows:
        raise EmptyCorpusError("no rows to write")
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def format_table(rows: Sequence[dict]) -> str:
    """Plain-text aligned table of the same rows the CSV would hold."""
    if not rows:
        return "(no rows)\n"
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)

    def fmt(value) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    cells = [[fmt(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(c), *(len(line[i]) for line in cells)) for i, c in enumerate(columns)]
    out = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    out += ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)) for line in cells]
    return "\n".join(out) + "\n"
