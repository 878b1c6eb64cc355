"""The export pipeline: videos + captions in, engine-ready directory out.

Layout written under the output directory::

    features/<video_id>.uemf   one matrix per video, n_frames x 512
    features/<text_id>.uemf    one matrix per caption, n_tokens x 512
    manifest.jsonl             video rows first, then caption rows
    splits.json                train/val/test, each listing every video
    checksums.json             sha256 of every feature file, for re-runs

Videos are processed by a pool of workers; the manifest and the other
top-level files are written by the main thread once all workers have
reported back, so ordering is deterministic and appends never race.

A re-run consults ``checksums.json``: any feature file that already
exists with the recorded digest is reused untouched, so running the
exporter twice leaves the directory byte-identical.
"""

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .backends import FEATURE_DIM, make_backend
from .uemf import write_uemf

log = logging.getLogger("uem_exporter")


class ExportUsageError(ValueError):
    """The job description itself is unusable (bad paths, ids, rates)."""


class MediaError(RuntimeError):
    """One input item cannot be decoded; callers skip and move on."""


@dataclass
class ExportJob:
    videos: list[str]          # paths to video files; the stem becomes the id
    captions: str              # JSON-lines: {"text_id", "video_id", "caption"}
    out_dir: str
    fps: float = 1.0           # frame sampling rate
    backend: str = "hash"      # "hash" (offline) or "clip"
    device: str = "cpu"
    workers: int = 4


@dataclass
class ExportReport:
    exported: list[str] = field(default_factory=list)   # ids written this run
    reused: list[str] = field(default_factory=list)     # ids kept via checksum
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (id, reason)

    @property
    def n_ok(self) -> int:
        return len(self.exported) + len(self.reused)


def sample_frames(path: str, fps: float) -> list[np.ndarray]:
    """Decode frames at timestamps 0, 1/fps, 2/fps, ... < duration.

    A 10-second clip sampled at 1 fps therefore yields exactly 10 frames.
    Sampled timestamps map to the nearest native frame; the decoder runs
    sequentially, which is reliable across containers where seeking isn't.
    """
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise MediaError(f"{path}: cannot open")
        native_fps = cap.get(cv2.CAP_PROP_FPS)
        n_frames = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        if native_fps <= 0 or n_frames <= 0:
            raise MediaError(f"{path}: no decodable frames")
        duration = n_frames / native_fps
        n_samples = max(1, math.ceil(duration * fps - 1e-9))
        slots_for: dict[int, list[int]] = {}
        for i in range(n_samples):
            idx = min(n_frames - 1, round(i / fps * native_fps))
            slots_for.setdefault(idx, []).append(i)
        frames: list = [None] * n_samples
        idx = 0
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            for slot in slots_for.get(idx, ()):
                frames[slot] = frame
            idx += 1
    finally:
        cap.release()
    while frames and frames[-1] is None:   # container lied about frame count
        frames.pop()
    if not frames or any(f is None for f in frames):
        raise MediaError(f"{path}: decoding stopped mid-stream")
    return frames


def read_captions(path: str) -> list[dict]:
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportUsageError(f"{path}:{lineno}: bad JSON ({exc})") from None
            if not isinstance(row, dict) or set(row) != {"text_id", "video_id", "caption"}:
                raise ExportUsageError(
                    f"{path}:{lineno}: caption rows need exactly text_id/video_id/caption"
                )
            if row["text_id"] in seen:
                raise ExportUsageError(f"{path}:{lineno}: duplicate text id {row['text_id']!r}")
            seen.add(row["text_id"])
            records.append(row)
    return records


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _plan(job: ExportJob) -> tuple[list[tuple[str, str, list[dict]]], list[dict]]:
    """Pair every video with its captions; validate ids up front.

    Returns (work items, orphan captions) — orphans name a video that is
    not in the input listing at all and can only be skipped.
    """
    if job.fps <= 0:
        raise ExportUsageError(f"sampling rate must be positive, got {job.fps}")
    if not job.videos:
        raise ExportUsageError("no input videos given")
    by_id: dict[str, str] = {}
    for path in job.videos:
        vid = Path(path).stem
        if vid in by_id:
            raise ExportUsageError(f"two inputs share the video id {vid!r}")
        by_id[vid] = path
    captions = read_captions(job.captions)
    for row in captions:
        if row["text_id"] in by_id:
            raise ExportUsageError(
                f"text id {row['text_id']!r} collides with a video id"
            )
    per_video: dict[str, list[dict]] = {vid: [] for vid in by_id}
    orphans = []
    for row in captions:
        if row["video_id"] in per_video:
            per_video[row["video_id"]].append(row)
        else:
            log.warning("skipping caption %r: unknown video %r",
                        row["text_id"], row["video_id"])
            orphans.append(row)
    return [(vid, by_id[vid], per_video[vid]) for vid in sorted(by_id)], orphans


def _export_one(vid: str, path: str, caption_rows: list[dict], backend,
                feat_dir: Path, fps: float, old_sums: dict) -> dict:
    """Worker body: one video plus its captions. Never raises for media."""
    result = {"video_row": None, "text_rows": [], "sums": {},
              "exported": [], "reused": [], "skipped": []}

    def emit(item_id: str, compute) -> bool:
        """Write features/<id>.uemf unless a checksummed copy already exists."""
        rel = f"features/{item_id}.uemf"
        target = feat_dir / f"{item_id}.uemf"
        if target.is_file() and old_sums.get(rel) == _sha256(target):
            result["sums"][rel] = old_sums[rel]
            result["reused"].append(item_id)
            return True
        matrix = compute()
        write_uemf(target, matrix)
        result["sums"][rel] = _sha256(target)
        result["exported"].append(item_id)
        return True

    try:
        frames = sample_frames(path, fps)
        emit(vid, lambda: backend.frame_features(frames))
    except MediaError as exc:
        log.warning("skipping video %r: %s", vid, exc)
        result["skipped"].append((vid, str(exc)))
        for row in caption_rows:
            reason = f"its video {vid!r} was skipped"
            log.warning("skipping caption %r: %s", row["text_id"], reason)
            result["skipped"].append((row["text_id"], reason))
        return result

    result["video_row"] = {"video_id": vid, "features": f"features/{vid}.uemf"}
    for row in caption_rows:
        tokens, feats = backend.text_features(row["caption"])
        if not tokens:
            reason = "caption has no tokens"
            log.warning("skipping caption %r: %s", row["text_id"], reason)
            result["skipped"].append((row["text_id"], reason))
            continue
        assert feats.shape == (len(tokens), FEATURE_DIM)
        emit(row["text_id"], lambda f=feats: f)
        result["text_rows"].append({
            "text_id": row["text_id"], "video_id": vid,
            "features": f"features/{row['text_id']}.uemf",
        })
    return result


def export(job: ExportJob) -> ExportReport:
    """Run the whole job; returns a tally of written/reused/skipped items."""
    plan, orphans = _plan(job)
    out = Path(job.out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    sums_path = out / "checksums.json"
    old_sums: dict = {}
    if sums_path.is_file():
        with open(sums_path, "r", encoding="utf-8") as fh:
            old_sums = json.load(fh)

    backend = make_backend(job.backend, device=job.device)
    report = ExportReport()
    for row in orphans:
        report.skipped.append((row["text_id"], f"unknown video {row['video_id']!r}"))

    workers = max(1, int(job.workers))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_export_one, vid, path, rows, backend,
                               feat_dir, job.fps, old_sums)
                   for vid, path, rows in plan]
        results = [f.result() for f in futures]   # submission order, not finish order

    video_rows, text_rows, new_sums = [], [], {}
    for res in results:
        if res["video_row"] is not None:
            video_rows.append(res["video_row"])
            text_rows.extend(res["text_rows"])
        new_sums.update(res["sums"])
        report.exported.extend(res["exported"])
        report.reused.extend(res["reused"])
        report.skipped.extend(res["skipped"])

    if report.n_ok:
        with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for row in video_rows + text_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        ids = [row["video_id"] for row in video_rows]
        with open(out / "splits.json", "w", encoding="utf-8") as fh:
            json.dump({"train": ids, "val": ids, "test": ids}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(sums_path, "w", encoding="utf-8") as fh:
            json.dump(new_sums, fh, indent=2, sort_keys=True)
            fh.write("\n")

    log.info("exported %d, reused %d, skipped %d",
             len(report.exported), len(report.reused), len(report.skipped))
    return report
