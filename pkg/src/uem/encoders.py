"""Text and video towers.

Both towers project raw per-token / per-frame features into a shared
embedding width, add learned positional embeddings, and run a small
pre-normalization transformer. The text tower additionally pools its token
embeddings into a single query vector with a learned attention probe; the
video tower keeps per-frame embeddings, which downstream stages group into
events.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import SequenceLengthError, ShapeError
from .model import AffineParams, LayerNormParams, ModelConfig


@dataclass(frozen=True)
class TokenSequence:
    """Raw per-token features for one sentence: shape (n_tokens, text_dim)."""

    text_id: str
    features: np.ndarray


@dataclass(frozen=True)
class FrameSequence:
    """Raw per-frame features for one video: shape (n_frames, video_dim)."""

    video_id: str
    features: np.ndarray


@dataclass
class TransformerLayerParams:
    ln1: LayerNormParams
    ln2: LayerNormParams
    wq: AffineParams
    wk: AffineParams
    wv: AffineParams
    wo: AffineParams
    ffn1: AffineParams
    ffn2: AffineParams

    @staticmethod
    def create(rng: np.random.Generator, dim: int) -> "TransformerLayerParams":
        return TransformerLayerParams(
            ln1=LayerNormParams.create(dim),
            ln2=LayerNormParams.create(dim),
            wq=AffineParams.create(rng, dim, dim),
            wk=AffineParams.create(rng, dim, dim),
            wv=AffineParams.create(rng, dim, dim),
            wo=AffineParams.create(rng, dim, dim),
            ffn1=AffineParams.create(rng, dim, 4 * dim),
            ffn2=AffineParams.create(rng, 4 * dim, dim),
        )


@dataclass
class TextEncoderParams:
    input_proj: AffineParams
    pos: Tensor
    layers: list
    pool_probe: Tensor


@dataclass
class VideoEncoderParams:
    input_proj: AffineParams
    pos: Tensor
    layers: list


def init_text_encoder(config: ModelConfig, rng: np.random.Generator) -> TextEncoderParams:
    return TextEncoderParams(
        input_proj=AffineParams.create(rng, config.text_dim, config.dim),
        pos=Tensor(rng.normal(0.0, 0.02, size=(config.max_len, config.dim)), requires_grad=True),
        layers=[TransformerLayerParams.create(rng, config.dim) for _ in range(config.text_layers)],
        pool_probe=Tensor(rng.normal(0.0, 0.02, size=(1, config.dim)), requires_grad=True),
    )


def init_video_encoder(config: ModelConfig, rng: np.random.Generator) -> VideoEncoderParams:
    return VideoEncoderParams(
        input_proj=AffineParams.create(rng, config.video_dim, config.dim),
        pos=Tensor(rng.normal(0.0, 0.02, size=(config.max_len, config.dim)), requires_grad=True),
        layers=[TransformerLayerParams.create(rng, config.dim) for _ in range(config.video_layers)],
    )


def subsample_indices(n: int, max_len: int) -> list[int]:
    """Evenly spaced frame indices covering [0, n-1], at most max_len of them.

    Index i of the subsample maps to round(i * (n-1) / (max_len-1)) with
    ties rounding up; the first and last frames are always kept.
    """
    if n <= max_len:
        return list(range(n))
    if max_len == 1:
        return [0]
    step = (n - 1) / (max_len - 1)
    return [int(i * step + 0.5) for i in range(max_len)]


def _affine(x: Tensor, p: AffineParams) -> Tensor:
    return ag.add(ag.matmul(x, p.weight), p.bias)


def _attention(h: Tensor, layer: TransformerLayerParams, heads: int, ln_eps: float) -> Tensor:
    """Multi-head self-attention over a (length, dim) slab, pre-normalized."""
    n, d = h.data.shape
    dh = d // heads
    x = ag.layer_norm(h, layer.ln1.gamma, layer.ln1.beta, eps=ln_eps)
    q = _affine(x, layer.wq)
    k = _affine(x, layer.wk)
    v = _affine(x, layer.wv)
    outs = []
    inv_sqrt = 1.0 / np.sqrt(dh)
    for i in range(heads):
        qh = ag.slice_cols(q, i * dh, (i + 1) * dh)
        kh = ag.slice_cols(k, i * dh, (i + 1) * dh)
        vh = ag.slice_cols(v, i * dh, (i + 1) * dh)
        scores = ag.scale(ag.matmul(qh, ag.transpose(kh)), inv_sqrt)
        outs.append(ag.matmul(ag.softmax_lastdim(scores), vh))
    return _affine(ag.concat(outs, axis=1), layer.wo)


def _transformer_layer(h: Tensor, layer: TransformerLayerParams, heads: int,
                       ln_eps: float) -> Tensor:
    h = ag.add(h, _attention(h, layer, heads, ln_eps))
    x = ag.layer_norm(h, layer.ln2.gamma, layer.ln2.beta, eps=ln_eps)
    ff = _affine(ag.relu(_affine(x, layer.ffn1)), layer.ffn2)
    return ag.add(h, ff)


def _check_features(features: np.ndarray, expect_dim: int, what: str, ident: str) -> None:
    if features.ndim != 2 or features.shape[1] != expect_dim:
        raise ShapeError(
            f"{what} '{ident}' features have shape {features.shape}, expected (n, {expect_dim})"
        )
    if features.shape[0] == 0:
        raise SequenceLengthError(f"{what} '{ident}' has no {'tokens' if what == 'text' else 'frames'}")


def encode_text(params: TextEncoderParams, config: ModelConfig, tokens: TokenSequence) -> Tensor:
    """Encode one sentence into a single query embedding of shape (dim,).

    Sentences longer than ``max_len`` are rejected rather than silently
    truncated: token order carries the query's meaning.
    """
    _check_features(tokens.features, config.text_dim, "text", tokens.text_id)
    n = tokens.features.shape[0]
    if n > config.max_len:
        raise SequenceLengthError(
            f"text '{tokens.text_id}' has {n} tokens, more than max_len={config.max_len}"
        )
    h = ag.relu(_affine(Tensor(tokens.features), params.input_proj))
    h = ag.add(h, ag.slice_rows(params.pos, 0, n))
    for layer in params.layers:
        h = _transformer_layer(h, layer, config.heads, config.ln_eps)
    # attention pooling: probe scores every token, softmax, convex-combine
    scores = ag.matmul(params.pool_probe, ag.transpose(h))  # (1, n)
    weights = ag.softmax_lastdim(scores)
    return ag.reshape(ag.matmul(weights, h), (config.dim,))


def encode_video(params: VideoEncoderParams, config: ModelConfig,
                 frames: FrameSequence) -> Tensor:
    """Encode one video into per-frame embeddings of shape (n', dim).

    Videos longer than ``max_len`` frames are evenly subsampled first
    (long videos stay representable end to end), so n' = min(n, max_len).
    """
    _check_features(frames.features, config.video_dim, "video", frames.video_id)
    feats = frames.features
    if feats.shape[0] > config.max_len:
        feats = feats[subsample_indices(feats.shape[0], config.max_len)]
    n = feats.shape[0]
    h = _affine(Tensor(feats), params.input_proj)
    h = ag.add(h, ag.slice_rows(params.pos, 0, n))
    for layer in params.layers:
        h = _transformer_layer(h, layer, config.heads, config.ln_eps)
    return h
