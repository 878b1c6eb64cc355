"""Shared fixtures: a tiny corpus of procedurally drawn video clips."""

import json
from pathlib import Path

import pytest

from clipgen import CAPTIONS, CLIPS, draw_clip


@pytest.fixture(scope="session")
def clip_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("clips")
    for vid, (n_frames, seed) in CLIPS.items():
        draw_clip(root / f"{vid}.avi", n_frames, seed)
    (root / "garbled.avi").write_bytes(b"RIFF not actually a video\x00" * 40)
    with open(root / "captions.jsonl", "w", encoding="utf-8") as fh:
        for row in CAPTIONS:
            fh.write(json.dumps(row) + "\n")
    return root


@pytest.fixture()
def good_videos(clip_dir) -> list[str]:
    return [str(clip_dir / f"{vid}.avi") for vid in sorted(CLIPS)]


@pytest.fixture()
def captions_path(clip_dir) -> str:
    return str(clip_dir / "captions.jsonl")
