"""Feature files, dataset manifests, and synthetic dataset generation.

The on-disk feature format is a fixed little-endian layout (magic, version,
rows, cols, dtype tag, row-major float32 payload) so that other tools — in
any language — can write it with a few lines of code. Values widen to
float64 in memory. Manifests are JSON-lines; splits are a single JSON
object of id lists.

The synthetic generator plants videos with known event boundaries by
drawing per-event anchor directions that are exactly orthogonal and
sampling frames inside a narrow cone around each anchor, which bounds
within-event and between-event cosines by construction. Captions are token
sequences drawn from the same cone as their event's anchor.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    BadMagicError,
    CoverageMismatchError,
    DanglingReferenceError,
    DataError,
    DimensionMismatchError,
    DuplicateIdError,
    EmptyCorpusError,
    InfeasibleSpecError,
    IngestionError,
    MissingFeatureFileError,
    NonFiniteValueError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

_MAGIC = b"UEMF"
_VERSION = 1
_DTYPE_F32 = 1
_HEADER_LEN = 4 + 4 + 4 + 4 + 1


# --- binary feature matrices ---------------------------------------------------------

def write_uemf_stream(fh, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise IngestionError(f"feature matrices are 2-D, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteValueError("refusing to write non-finite values")
    rows, cols = matrix.shape
    fh.write(_MAGIC)
    fh.write(_VERSION.to_bytes(4, "little"))
    fh.write(int(rows).to_bytes(4, "little"))
    fh.write(int(cols).to_bytes(4, "little"))
    fh.write(_DTYPE_F32.to_bytes(1, "little"))
    fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def write_uemf(path, matrix: np.ndarray) -> None:
    """Write one feature matrix; float32 on disk regardless of input dtype."""
    with open(path, "wb") as fh:
        write_uemf_stream(fh, matrix)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"{what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_header(fh) -> tuple[int, int]:
    magic = _read_exact(fh, 4, "magic")
    if magic != _MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    version = int.from_bytes(_read_exact(fh, 4, "version"), "little")
    if version != _VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    rows = int.from_bytes(_read_exact(fh, 4, "rows"), "little")
    cols = int.from_bytes(_read_exact(fh, 4, "cols"), "little")
    dtype = int.from_bytes(_read_exact(fh, 1, "dtype"), "little")
    if dtype != _DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype tag {dtype}")
    return rows, cols


def read_uemf_stream(fh) -> np.ndarray:
    rows, cols = _read_header(fh)
    payload = _read_exact(fh, rows * cols * 4, "payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError("file contains non-finite values")
    return values


def read_uemf(path) -> np.ndarray:
    """Load one matrix, widened to float64. A 0-row file is legal."""
    with open(path, "rb") as fh:
        values = read_uemf_stream(fh)
        trailing = fh.read(1)
        if trailing:
            raise TruncatedPayloadError(f"{path}: trailing bytes after payload")
    return values


def peek_uemf(path) -> tuple[int, int]:
    """Read only the header; (rows, cols) without touching the payload."""
    with open(path, "rb") as fh:
        return _read_header(fh)


# --- manifests and datasets ----------------------------------------------------------

FeatureSource = Union[str, np.ndarray]  # a file path, or an in-memory matrix


@dataclass
class Dataset:
    """A split's worth of videos and caption records.

    Feature sources are either file paths (loaded lazily, cached) or
    in-memory arrays (the synthetic path, no disk involved). Ordering
    follows the manifest, so iteration is deterministic.
    """

    name: str
    _videos: dict[str, FeatureSource]
    _texts: dict[str, tuple[str, FeatureSource]]  # text_id -> (video_id, source)
    _cache: dict = field(default_factory=dict)

    def video_ids(self) -> list[str]:
        return list(self._videos.keys())

    def text_ids(self) -> list[str]:
        return list(self._texts.keys())

    def texts_of(self, video_id: str) -> list["TextEntry"]:
        return [TextEntry(tid, vid) for tid, (vid, _) in self._texts.items() if vid == video_id]

    def video_of(self, text_id: str) -> str:
        return self._texts[text_id][0]

    def _load(self, key: str, source: FeatureSource) -> np.ndarray:
        if key not in self._cache:
            self._cache[key] = source if isinstance(source, np.ndarray) else read_uemf(source)
        return self._cache[key]

    def video_features(self, video_id: str) -> np.ndarray:
        if video_id not in self._videos:
            raise DanglingReferenceError(f"unknown video id {video_id!r}")
        return self._load(video_id, self._videos[video_id])

    def text_features(self, text_id: str) -> np.ndarray:
        if text_id not in self._texts:
            raise DanglingReferenceError(f"unknown text id {text_id!r}")
        return self._load(text_id, self._texts[text_id][1])

    def ground_truth(self) -> dict[str, str]:
        """text_id -> its source video_id."""
        return {tid: vid for tid, (vid, _) in self._texts.items()}


@dataclass(frozen=True)
class TextEntry:
    text_id: str
    video_id: str


def read_manifest(path) -> tuple[list[dict], list[dict]]:
    """Parse JSON-lines records into (video rows, text rows), validated.

    Video rows carry video_id + features path; text rows additionally name
    their video. Duplicate ids and texts pointing at absent videos are
    rejected here, before any feature file is opened.
    """
    videos: list[dict] = []
    texts: list[dict] = []
    seen_videos: set[str] = set()
    seen_texts: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: bad JSON ({exc})") from None
            if not isinstance(row, dict) or "features" not in row:
                raise IngestionError(f"{path}:{lineno}: record needs a 'features' field")
            if "text_id" in row:
                if set(row) != {"text_id", "video_id", "features"}:
                    raise IngestionError(f"{path}:{lineno}: bad text record fields {sorted(row)}")
                if row["text_id"] in seen_texts:
                    raise DuplicateIdError(f"duplicate text id {row['text_id']!r}")
                seen_texts.add(row["text_id"])
                texts.append(row)
            elif "video_id" in row:
                if set(row) != {"video_id", "features"}:
                    raise IngestionError(f"{path}:{lineno}: bad video record fields {sorted(row)}")
                if row["video_id"] in seen_videos:
                    raise DuplicateIdError(f"duplicate video id {row['video_id']!r}")
                seen_videos.add(row["video_id"])
                videos.append(row)
            else:
                raise IngestionError(f"{path}:{lineno}: record is neither video nor text")
    for row in texts:
        if row["video_id"] not in seen_videos:
            raise DanglingReferenceError(
                f"text {row['text_id']!r} references unknown video {row['video_id']!r}"
            )
    return videos, texts


def read_splits(path) -> dict[str, list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            splits = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{path}: bad JSON ({exc})") from None
    if not isinstance(splits, dict) or set(splits) != {"train", "val", "test"}:
        raise IngestionError(f"{path}: splits file needs exactly train/val/test lists")
    for key, ids in splits.items():
        if not isinstance(ids, list):
            raise IngestionError(f"{path}: split {key!r} is not a list")
    return splits


def load_dataset(manifest_path, split_path=None, split: str = "train",
                 expect_video_dim: Optional[int] = None,
                 expect_text_dim: Optional[int] = None) -> Dataset:
    """Build a Dataset restricted to one split; texts follow their video.

    Feature payloads stay on disk until first use, but every referenced
    file's existence — and its width, when an expectation is given — is
    checked now, by reading headers only.
    """
    videos, texts = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    keep: Optional[set[str]] = None
    if split_path is not None:
        splits = read_splits(split_path)
        if split not in splits:
            raise IngestionError(f"unknown split {split!r}")
        keep = set(splits[split])

    def check(path: str, expect: Optional[int], owner: str) -> str:
        full = path if os.path.isabs(path) else os.path.join(base, path)
        if not os.path.isfile(full):
            raise MissingFeatureFileError(f"{owner}: feature file {full} does not exist")
        if expect is not None:
            _, cols = peek_uemf(full)
            if cols != expect:
                raise DimensionMismatchError(
                    f"{owner}: {full} holds {cols}-dim features, config expects {expect}"
                )
        return full

    vid_sources: dict[str, FeatureSource] = {}
    for row in videos:
        if keep is not None and row["video_id"] not in keep:
            continue
        vid_sources[row["video_id"]] = check(row["features"], expect_video_dim,
                                             f"video {row['video_id']!r}")
    text_sources: dict[str, tuple[str, FeatureSource]] = {}
    for row in texts:
        if row["video_id"] not in vid_sources:
            continue
        text_sources[row["text_id"]] = (
            row["video_id"],
            check(row["features"], expect_text_dim, f"text {row['text_id']!r}"),
        )
    return Dataset(name=split, _videos=vid_sources, _texts=text_sources)


def write_manifest(path, video_rows: Sequence[dict], text_rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in video_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        for row in text_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# --- synthetic data with planted boundaries -------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a dataset with known event structure.

    ``cosine_floor`` lower-bounds every within-event pairwise cosine and
    ``cosine_ceiling`` upper-bounds every between-event one; the generator
    refuses recipes it cannot honor.
    """

    n_videos: int = 16
    events_min: int = 2
    events_max: int = 4
    frames_min: int = 4
    frames_max: int = 12
    cosine_floor: float = 0.99
    cosine_ceiling: float = 0.3
    dim: int = 64
    seed: int = 0
    tokens_min: int = 3
    tokens_max: int = 8
    scale_jitter: float = 0.0  # +- fraction of per-frame positive length jitter

    def __post_init__(self):
        if self.n_videos < 1:
            raise InfeasibleSpecError("need at least one video")
        if not 1 <= self.events_min <= self.events_max:
            raise InfeasibleSpecError("bad events-per-video range")
        if not 1 <= self.frames_min <= self.frames_max:
            raise InfeasibleSpecError("bad frames-per-event range")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise InfeasibleSpecError("bad tokens-per-caption range")
        if not -1.0 < self.cosine_floor <= 1.0:
            raise InfeasibleSpecError(f"cosine_floor {self.cosine_floor} out of range")
        if self.cosine_ceiling <= 0.0 and self.events_max > 1:
            raise InfeasibleSpecError(
                "orthogonal anchors cannot push between-event cosine below zero"
            )
        if self.cosine_floor <= self.cosine_ceiling:
            raise InfeasibleSpecError(
                f"cosine_floor {self.cosine_floor} must exceed cosine_ceiling {self.cosine_ceiling}"
            )
        if self.events_max > self.dim:
            raise InfeasibleSpecError(
                f"cannot draw {self.events_max} orthogonal anchors in {self.dim} dimensions"
            )
        if not 0.0 <= self.scale_jitter < 1.0:
            raise InfeasibleSpecError("scale_jitter must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InfeasibleSpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    videos: dict[str, np.ndarray]                 # video_id -> (n, dim)
    texts: list[tuple[str, str, np.ndarray]]      # (text_id, video_id, tokens)
    boundaries: dict[str, list[tuple[int, int]]]  # planted spans per video
    event_of_text: dict[str, int]

    def dataset(self, name: str = "synthetic") -> Dataset:
        return Dataset(
            name=name,
            _videos=dict(self.videos),
            _texts={tid: (vid, arr) for tid, vid, arr in self.texts},
        )


def _cone_half_angle(spec: SyntheticSpec) -> float:
    # Within a cone of half-angle phi, pairwise cosine >= cos(2*phi); across
    # orthogonal cones it is <= sin(2*phi). Shrink slightly so the post-hoc
    # measured bounds hold strictly under floating point.
    phi = 0.5 * min(math.acos(spec.cosine_floor), math.asin(min(1.0, spec.cosine_ceiling)))
    return 0.999 * phi


def _sample_in_cone(rng: np.random.Generator, anchor: np.ndarray, phi_max: float) -> np.ndarray:
    """Unit vector at angle <= phi_max from the unit anchor."""
    dim = anchor.shape[0]
    while True:
        g = rng.standard_normal(dim)
        g -= np.dot(g, anchor) * anchor
        norm = np.linalg.norm(g)
        if norm > 1e-9:
            break
    phi = float(rng.uniform(0.0, phi_max))
    return math.cos(phi) * anchor + math.sin(phi) * (g / norm)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw a dataset whose event boundaries are known exactly.

    Per video: orthonormal anchors (one per event) via QR, frames sampled in
    a cone around their event's anchor, one caption per event whose tokens
    live in the same cone. Deterministic in the seed. The emitted data is
    re-measured afterwards; a bound violation is a hard failure.
    """
    rng = np.random.default_rng(spec.seed)
    phi_max = _cone_half_angle(spec)
    videos: dict[str, np.ndarray] = {}
    texts: list[tuple[str, str, np.ndarray]] = []
    boundaries: dict[str, list[tuple[int, int]]] = {}
    event_of_text: dict[str, int] = {}

    width = max(4, len(str(spec.n_videos)))
    for v in range(spec.n_videos):
        video_id = f"v{v:0{width}d}"
        k = int(rng.integers(spec.events_min, spec.events_max + 1))
        raw = rng.standard_normal((spec.dim, k))
        anchors, _ = np.linalg.qr(raw)
        anchors = anchors.T  # k orthonormal rows

        frames: list[np.ndarray] = []
        spans: list[tuple[int, int]] = []
        for e in range(k):
            n_frames = int(rng.integers(spec.frames_min, spec.frames_max + 1))
            start = len(frames)
            for _ in range(n_frames):
                f = _sample_in_cone(rng, anchors[e], phi_max)
                if spec.scale_jitter > 0.0:
                    f = f * float(rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter))
                frames.append(f)
            spans.append((start, len(frames) - 1))

            n_tokens = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
            tokens = np.stack([_sample_in_cone(rng, anchors[e], phi_max) for _ in range(n_tokens)])
            text_id = f"{video_id}_e{e}"
            texts.append((text_id, video_id, tokens))
            event_of_text[text_id] = e

        videos[video_id] = np.stack(frames)
        boundaries[video_id] = spans

    out = SyntheticDataset(spec=spec, videos=videos, texts=texts,
                           boundaries=boundaries, event_of_text=event_of_text)
    verify_synthetic(out)
    return out


def verify_synthetic(data: SyntheticDataset) -> None:
    """Re-measure the planted cosine structure; raise if any bound fails."""
    spec = data.spec
    for video_id, frames in data.videos.items():
        spans = data.boundaries[video_id]
        if spans[-1][1] != frames.shape[0] - 1:
            raise CoverageMismatchError(f"{video_id}: spans do not cover all frames")
        unit = frames / np.linalg.norm(frames, axis=1, keepdims=True)
        sims = unit @ unit.T
        labels = np.empty(frames.shape[0], dtype=int)
        for e, (s, t) in enumerate(spans):
            labels[s:t + 1] = e
        same = labels[:, None] == labels[None, :]
        off_diag = ~np.eye(frames.shape[0], dtype=bool)
        within = sims[same & off_diag]
        between = sims[~same]
        if within.size and within.min() < spec.cosine_floor:
            raise DataError(
                f"{video_id}: within-event cosine {within.min():.6f} below floor {spec.cosine_floor}"
            )
        if between.size and between.max() > spec.cosine_ceiling:
            raise DataError(
                f"{video_id}: between-event cosine {between.max():.6f} above ceiling "
                f"{spec.cosine_ceiling}"
            )


def write_dataset(data: SyntheticDataset, out_dir) -> dict[str, str]:
    """Materialize a synthetic dataset: features, manifest, splits, truth.

    All videos land in all three splits — these sets exist for pipeline
    plumbing at desk scale, not for generalization claims. Returns the
    paths of everything written.
    """
    out_dir = os.fspath(out_dir)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    video_rows, text_rows = [], []
    for video_id, frames in data.videos.items():
        rel = os.path.join("features", f"{video_id}.uemf")
        write_uemf(os.path.join(out_dir, rel), frames)
        video_rows.append({"video_id": video_id, "features": rel})
    for text_id, video_id, tokens in data.texts:
        rel = os.path.join("features", f"{text_id}.uemf")
        write_uemf(os.path.join(out_dir, rel), tokens)
        text_rows.append({"text_id": text_id, "video_id": video_id, "features": rel})

    paths = {
        "manifest": os.path.join(out_dir, "manifest.jsonl"),
        "splits": os.path.join(out_dir, "splits.json"),
        "ground_truth": os.path.join(out_dir, "ground_truth.json"),
    }
    write_manifest(paths["manifest"], video_rows, text_rows)
    all_ids = list(data.videos.keys())
    with open(paths["splits"], "w", encoding="utf-8") as fh:
        json.dump({"train": all_ids, "val": all_ids, "test": all_ids}, fh, indent=2)
    truth = {
        "boundaries": {vid: [list(span) for span in spans]
                       for vid, spans in data.boundaries.items()},
        "alignment": {tid: vid for tid, vid, _ in data.texts},
        "event_of_text": data.event_of_text,
        "spec": data.spec.to_dict(),
    }
    with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2)
    return paths
