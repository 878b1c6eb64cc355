"""Embedding backends: how a frame or a word becomes a 512-dim vector.

Two implementations share one tiny interface:

* ``clip`` — the real thing: ViT-B/32 image encoder for frames and the
  matching text encoder's per-token hidden states for words.  Needs
  `transformers` + `torch` and downloadable weights, so it is imported
  lazily and never touched by the test suite.
* ``hash`` — a deterministic stand-in for offline environments: the
  frame (or word) is hashed and the digest seeds a Gaussian draw.  No
  semantics, but stable across runs and platforms, which is all the
  pipeline plumbing needs.

Both emit un-normalized vectors; the engine's cosine scoring handles
scale.
"""

import hashlib

import numpy as np

FEATURE_DIM = 512


class HashBackend:
    """Content-addressed pseudo-features; fully deterministic."""

    name = "hash"

    def frame_features(self, frames: list[np.ndarray]) -> np.ndarray:
        """One 512-dim vector per frame (uint8 BGR HxWx3 arrays)."""
        out = np.empty((len(frames), FEATURE_DIM), dtype=np.float32)
        for i, frame in enumerate(frames):
            out[i] = self._vector_for(self._frame_signature(frame))
        return out

    def text_features(self, caption: str) -> tuple[list[str], np.ndarray]:
        """Whitespace tokenizer; one vector per lowercased word."""
        tokens = caption.lower().split()
        out = np.empty((len(tokens), FEATURE_DIM), dtype=np.float32)
        for i, tok in enumerate(tokens):
            out[i] = self._vector_for(b"word:" + tok.encode("utf-8"))
        return tokens, out

    @staticmethod
    def _frame_signature(frame: np.ndarray) -> bytes:
        # Downsample to an 8x8 gray thumbnail first so the signature keys
        # on coarse content, not on codec noise in individual pixels.
        gray = frame.mean(axis=2) if frame.ndim == 3 else frame
        h, w = gray.shape
        ys = np.linspace(0, h - 1, 8).astype(int)
        xs = np.linspace(0, w - 1, 8).astype(int)
        thumb = gray[np.ix_(ys, xs)].astype(np.uint8)
        return b"frame:" + thumb.tobytes()

    @staticmethod
    def _vector_for(signature: bytes) -> np.ndarray:
        digest = hashlib.sha256(signature).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(FEATURE_DIM).astype(np.float32)


class ClipBackend:
    """ViT-B/32 frames + per-token text features via `transformers`."""

    name = "clip"
    _MODEL = "openai/clip-vit-base-patch32"

    def __init__(self, device: str = "cpu"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self._device = device
        self._model = CLIPModel.from_pretrained(self._MODEL).to(device).eval()
        self._processor = CLIPProcessor.from_pretrained(self._MODEL)

    def frame_features(self, frames: list[np.ndarray]) -> np.ndarray:
        rgb = [frame[:, :, ::-1] for frame in frames]  # cv2 decodes BGR
        inputs = self._processor(images=rgb, return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)

    def text_features(self, caption: str) -> tuple[list[str], np.ndarray]:
        tok = self._processor.tokenizer
        enc = tok(caption, return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            hidden = self._model.text_model(**enc).last_hidden_state[0]
        ids = enc["input_ids"][0].tolist()
        keep = [i for i, t in enumerate(ids) if t not in tok.all_special_ids]
        tokens = tok.convert_ids_to_tokens([ids[i] for i in keep])
        return tokens, hidden[keep].cpu().numpy().astype(np.float32)


def make_backend(name: str, device: str = "cpu"):
    if name == "hash":
        return HashBackend()
    if name == "clip":
        return ClipBackend(device=device)
    raise ValueError(f"unknown backend {name!r} (choose hash or clip)")
