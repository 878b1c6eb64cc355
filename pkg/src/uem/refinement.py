"""Query-conditioned event refinement.

Given per-frame embeddings grouped into events, a query first picks its
best-matching event by cosine against mean-pooled event summaries, then a
single-head cross-attention (query vector attending over that event's
frames) builds a refined event representation. Selection is a hard argmax:
gradients flow only through the selected event's tensors, never through the
choice itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NORM_FLOOR, Tensor
from .errors import DegenerateVectorError, ShapeError
from .model import AffineParams, LayerNormParams, ModelConfig, matrix_param
from .segmentation import EventSegmentation


@dataclass
class CaerParams:
    """Cross-attention refinement weights.

    The three projections are pure matrices (dim -> proj_dim, no bias); the
    query vector and the frames are normalized by separate affine layer
    norms before projecting; the output MLP maps the attended context back
    to the shared embedding width.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    ln_t: LayerNormParams
    ln_e: LayerNormParams
    mlp_hidden: AffineParams
    mlp_out: AffineParams


def init_refiner(config: ModelConfig, rng: np.random.Generator) -> CaerParams:
    return CaerParams(
        w_q=matrix_param(rng, config.dim, config.proj_dim),
        w_k=matrix_param(rng, config.dim, config.proj_dim),
        w_v=matrix_param(rng, config.dim, config.proj_dim),
        ln_t=LayerNormParams.create(config.dim),
        ln_e=LayerNormParams.create(config.dim),
        mlp_hidden=AffineParams.create(rng, config.proj_dim, config.proj_dim),
        mlp_out=AffineParams.create(rng, config.proj_dim, config.dim),
    )


@dataclass
class RefinedEvent:
    """Output of refining one (query, video) pair.

    ``attention_weights`` is the softmax over the selected event's frames
    (nonnegative, sums to 1); ``e_ref`` is the refined representation the
    final similarity is computed against.
    """

    video_id: str
    text_id: str
    selected_event_index: int
    attention_weights: np.ndarray
    e_ref: Tensor


def coarse_event_reps(frame_emb: Tensor, seg: EventSegmentation) -> Tensor:
    """Mean-pool frame embeddings within each span -> (n_events, dim).

    Note this is a plain arithmetic mean, deliberately distinct from the
    segmenter's halving-update running centers.
    """
    if frame_emb.data.ndim != 2:
        raise ShapeError(f"frame embeddings must be (n, d), got {frame_emb.data.shape}")
    if seg.n_frames != frame_emb.data.shape[0]:
        raise ShapeError(
            f"segmentation covers {seg.n_frames} frames but embeddings have {frame_emb.data.shape[0]}"
        )
    pooled = [ag.mean(ag.slice_rows(frame_emb, s, e + 1), axis=0) for s, e in seg.spans]
    return ag.stack(pooled)


def select_event(event_reps: Tensor, query: Tensor) -> int:
    """Index of the event whose mean representation best matches the query.

    Pure value computation (ties go to the lowest index); the hard choice
    carries no gradient.
    """
    reps = event_reps.data
    q = query.data
    if reps.ndim != 2 or q.ndim != 1 or reps.shape[1] != q.shape[0]:
        raise ShapeError(f"cannot match events {reps.shape} against query {q.shape}")
    if reps.shape[0] == 0:
        raise ShapeError("no events to select from")
    norms = np.sqrt((reps * reps).sum(axis=1))
    bad = np.nonzero(norms <= NORM_FLOOR)[0]
    if bad.size:
        raise DegenerateVectorError(f"event representation {int(bad[0])} has near-zero norm")
    qn = float(np.sqrt(np.dot(q, q)))
    if qn <= NORM_FLOOR:
        raise DegenerateVectorError("query vector has near-zero norm")
    sims = np.clip((reps @ q) / (norms * qn), -1.0, 1.0)
    return int(np.argmax(sims))


def refine_event(query: Tensor, event_frames: Tensor, params: CaerParams,
                 ln_eps: float = 1e-5, video_id: str = "", text_id: str = "",
                 selected_event_index: int = 0) -> RefinedEvent:
    """Cross-attend the query over one event's frames and remap to dim.

    The query (layer-normalized, projected) scores each frame's key; softmax
    weights pool the frame values; a two-layer ReLU MLP produces the final
    representation.
    """
    if event_frames.data.ndim != 2 or event_frames.data.shape[0] < 1:
        raise ShapeError(f"event frames must be a nonempty (n, d) slab, got {event_frames.data.shape}")
    d = event_frames.data.shape[1]
    if query.data.shape != (d,):
        raise ShapeError(f"query shape {query.data.shape} does not match frame width {d}")
    proj_dim = params.w_q.data.shape[1]

    q_row = ag.reshape(query, (1, d))
    q_proj = ag.matmul(ag.layer_norm(q_row, params.ln_t.gamma, params.ln_t.beta, eps=ln_eps),
                       params.w_q)                                     # (1, proj)
    frames_ln = ag.layer_norm(event_frames, params.ln_e.gamma, params.ln_e.beta, eps=ln_eps)
    keys = ag.matmul(frames_ln, params.w_k)                            # (n, proj)
    values = ag.matmul(frames_ln, params.w_v)                          # (n, proj)

    logits = ag.scale(ag.matmul(q_proj, ag.transpose(keys)), 1.0 / np.sqrt(proj_dim))
    alpha = ag.softmax_lastdim(logits)                                 # (1, n)
    context = ag.matmul(alpha, values)                                 # (1, proj)
    hidden = ag.relu(ag.add(ag.matmul(context, params.mlp_hidden.weight), params.mlp_hidden.bias))
    out = ag.add(ag.matmul(hidden, params.mlp_out.weight), params.mlp_out.bias)
    return RefinedEvent(
        video_id=video_id,
        text_id=text_id,
        selected_event_index=selected_event_index,
        attention_weights=alpha.data.reshape(-1).copy(),
        e_ref=ag.reshape(out, (out.data.shape[1],)),
    )
