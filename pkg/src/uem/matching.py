"""Pair scoring and the training objective.

A (video, query) score is the cosine between the query embedding and the
refined representation of the query's best-matching event. Training combines
a margin hinge over in-batch negatives with a contrastive log-ratio term,
optimized by Adam; negatives are drawn uniformly early in training and
switch to the hardest in-batch negative after a scheduled epoch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .encoders import FrameSequence, TokenSequence, encode_text, encode_video
from .errors import (
    CheckpointFormatError,
    ConfigError,
    NoNegativesError,
    NumericDomainError,
    ShapeError,
    TrainingDivergedError,
)
from .model import ModelConfig, ModelParams, init_model
from .refinement import coarse_event_reps, refine_event, select_event
from .segmentation import EventSegmentation, equal_division_segment, pgvs_segment


# --- configuration -----------------------------------------------------------------

_CONFIG_FILE_KEYS = {
    # file key -> dataclass field (lambda is a Python keyword, hence the alias)
    "margin": "margin",
    "lambda": "lambda_",
    "hard_negative_start_epoch": "hard_negative_start_epoch",
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "temperature": "temperature",
    "nce_form": "nce_form",
    "lr_decay_factor": "lr_decay_factor",
    "lr_patience": "lr_patience",
}


@dataclass(frozen=True)
class TrainingConfig:
    margin: float = 0.2
    lambda_: float = 0.02
    hard_negative_start_epoch: int = 20
    learning_rate: float = 0.0002
    batch_size: int = 64
    epochs: int = 100
    temperature: float = 1.0
    nce_form: str = "exponentiated"
    lr_decay_factor: float = 0.1
    lr_patience: int = 3

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"margin must be nonnegative, got {self.margin}")
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lambda_}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.nce_form not in ("exponentiated", "verbatim"):
            raise ConfigError(f"nce_form must be 'exponentiated' or 'verbatim', got {self.nce_form!r}")
        if not 0 < self.lr_decay_factor <= 1 or self.lr_patience < 1:
            raise ConfigError("lr_decay_factor must be in (0,1] and lr_patience >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> tuple["TrainingConfig", dict[str, str]]:
        """Build from string key-value pairs; returns leftover unconsumed keys.

        Keys use the documented file spellings (``lambda``, not ``lambda_``).
        Values are parsed per field type; bad values raise ConfigError.
        """
        kwargs = {}
        leftover = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in mapping.items():
            fname = _CONFIG_FILE_KEYS.get(key)
            if fname is None:
                leftover[key] = raw
                continue
            try:
                if types[fname] == "int":
                    kwargs[fname] = int(raw)
                elif types[fname] == "float":
                    kwargs[fname] = float(raw)
                else:
                    kwargs[fname] = raw
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
        return cls(**kwargs), leftover


# --- scoring -------------------------------------------------------------------------

@dataclass
class ScoredPair:
    similarity: Tensor  # scalar
    selected_event_index: int


def segment_encoded_frames(frame_emb_values: np.ndarray, config: ModelConfig,
                           video_id: str = "") -> EventSegmentation:
    """Group a video's encoded frames into events per the configured method.

    The threshold decisions read plain values: event boundaries are discrete
    and carry no gradient.
    """
    if config.use_event_segmentation:
        return pgvs_segment(frame_emb_values, config.epsilon, video_id=video_id)
    return equal_division_segment(frame_emb_values, config.equal_events, video_id=video_id)


def score_pair(frame_emb: Tensor, seg: EventSegmentation, query: Tensor,
               model: ModelParams) -> ScoredPair:
    """Similarity of one encoded video against one encoded query.

    Pipeline: mean-pool events, hard-select the best event for this query,
    then either cross-attention-refine that event (default) or use its mean
    pooling directly (refinement disabled), and take the cosine against the
    query.
    """
    reps = coarse_event_reps(frame_emb, seg)
    idx = select_event(reps, query)
    if model.refiner is not None:
        start, end = seg.spans[idx]
        refined = refine_event(query, ag.slice_rows(frame_emb, start, end + 1),
                               model.refiner, ln_eps=model.config.ln_eps,
                               video_id=seg.video_id, selected_event_index=idx)
        e_ref = refined.e_ref
    else:
        e_ref = ag.reshape(ag.slice_rows(reps, idx, idx + 1), (reps.data.shape[1],))
    return ScoredPair(similarity=ag.cosine(e_ref, query), selected_event_index=idx)


@dataclass
class BatchSimilarities:
    """All pairwise scores for one mini-batch.

    ``tensors[i][j]`` is the scalar score of video i against query j (kept
    as graph nodes so losses stay differentiable); ``values`` mirrors them
    as plain floats for the discrete negative-selection decisions.
    ``positive_mask[i, j]`` marks query j's ground-truth video i; every
    query has exactly one positive.
    """

    tensors: list[list[Tensor]]
    values: np.ndarray
    positive_mask: np.ndarray
    video_ids: list[str]
    text_ids: list[str]

    def __post_init__(self):
        nv, nq = self.values.shape
        if self.positive_mask.shape != (nv, nq):
            raise ShapeError("positive mask shape does not match score matrix")
        col_sums = self.positive_mask.sum(axis=0)
        if not np.all(col_sums == 1):
            raise ShapeError("every query needs exactly one positive video in the batch")

    @property
    def n_queries(self) -> int:
        return self.values.shape[1]

    def positive_video_of(self, q: int) -> int:
        return int(np.argmax(self.positive_mask[:, q]))


def batch_similarities(model: ModelParams, videos: Sequence[FrameSequence],
                       queries: Sequence[TokenSequence],
                       positive_video_of_query: Sequence[int]) -> BatchSimilarities:
    """Encode every input once, then score all (video, query) pairs."""
    frame_embs = [encode_video(model.video_encoder, model.config, v) for v in videos]
    segs = [segment_encoded_frames(e.data, model.config, v.video_id)
            for e, v in zip(frame_embs, videos)]
    query_embs = [encode_text(model.text_encoder, model.config, q) for q in queries]
    tensors = [[score_pair(frame_embs[i], segs[i], query_embs[j], model).similarity
                for j in range(len(queries))] for i in range(len(videos))]
    values = np.array([[t.data for t in row] for row in tensors], dtype=np.float64)
    mask = np.zeros((len(videos), len(queries)), dtype=bool)
    for j, i in enumerate(positive_video_of_query):
        mask[i, j] = True
    return BatchSimilarities(
        tensors=tensors, values=values, positive_mask=mask,
        video_ids=[v.video_id for v in videos], text_ids=[q.text_id for q in queries],
    )


# --- negative selection ----------------------------------------------------------------

NegativeChoice = tuple[list[int], list[int]]  # per query: (negative query j', negative video i')


def choose_negatives(S: BatchSimilarities, policy: str,
                     rng: Optional[np.random.Generator] = None) -> NegativeChoice:
    """Pick one negative query and one negative video per positive pair.

    ``random`` draws uniformly; ``hardest`` takes the highest-scoring
    negative (the most confusable one). Both read only score values.
    """
    nv, nq = S.values.shape
    if nq < 2 or nv < 2:
        raise NoNegativesError(f"batch of {nv} videos x {nq} queries has no negatives")
    neg_q: list[int] = []
    neg_v: list[int] = []
    for q in range(nq):
        v = S.positive_video_of(q)
        q_cands = [j for j in range(nq) if not S.positive_mask[v, j]]
        v_cands = [i for i in range(nv) if not S.positive_mask[i, q]]
        if not q_cands or not v_cands:
            raise NoNegativesError(f"pair (video {S.video_ids[v]}, text {S.text_ids[q]}) "
                                   "has no in-batch negatives")
        if policy == "random":
            if rng is None:
                raise ConfigError("random negative policy needs a generator")
            neg_q.append(q_cands[int(rng.integers(len(q_cands)))])
            neg_v.append(v_cands[int(rng.integers(len(v_cands)))])
        elif policy == "hardest":
            neg_q.append(max(q_cands, key=lambda j: (S.values[v, j], -j)))
            neg_v.append(max(v_cands, key=lambda i: (S.values[i, q], -i)))
        else:
            raise ConfigError(f"unknown negative policy {policy!r}")
    return neg_q, neg_v


# --- losses ---------------------------------------------------------------------------

def triplet_loss(S: BatchSimilarities, margin: float,
                 negatives: Union[str, NegativeChoice],
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Two-sided hinge, averaged over positive pairs.

    Per pair: max(0, margin + s(v, q-) - s(v, q)) + max(0, margin + s(v-, q) - s(v, q)).
    ``negatives`` is either a policy name or an explicit (neg_q, neg_v)
    index pair (used to freeze choices for finite-difference checks).
    """
    if isinstance(negatives, str):
        neg_q, neg_v = choose_negatives(S, negatives, rng)
    else:
        neg_q, neg_v = negatives
    terms = []
    zero = Tensor(0.0)
    for q in range(S.n_queries):
        v = S.positive_video_of(q)
        pos = S.tensors[v][q]
        t1 = ag.tensor_max(ag.stack([zero, ag.add(margin, ag.sub(S.tensors[v][neg_q[q]], pos))]))
        t2 = ag.tensor_max(ag.stack([zero, ag.add(margin, ag.sub(S.tensors[neg_v[q]][q], pos))]))
        terms.append(ag.add(t1, t2))
    return ag.mean(ag.stack(terms))


def infonce_loss(S: BatchSimilarities, temperature: float = 1.0,
                 nce_form: str = "exponentiated") -> Tensor:
    """Symmetric contrastive log-ratio loss over in-batch negatives.

    The default form maps scores through exp(s / temperature) before the
    ratio, which keeps every ratio in (0, 1]. The verbatim form divides raw
    scores as written and therefore rejects nonpositive numerators or
    denominators instead of producing NaNs.
    """
    terms = []
    for q in range(S.n_queries):
        v = S.positive_video_of(q)
        pos = S.tensors[v][q]
        q_negs = [S.tensors[v][j] for j in range(S.n_queries) if not S.positive_mask[v, j]]
        v_negs = [S.tensors[i][q] for i in range(S.values.shape[0]) if not S.positive_mask[i, q]]
        for negs in (q_negs, v_negs):
            if nce_form == "exponentiated":
                num = ag.exp(ag.scale(pos, 1.0 / temperature))
                parts = [num] + [ag.exp(ag.scale(n, 1.0 / temperature)) for n in negs]
            elif nce_form == "verbatim":
                num = pos
                parts = [num] + list(negs)
                denom_val = sum(float(p.data) for p in parts)
                if float(num.data) <= 0.0 or denom_val <= 0.0:
                    raise NumericDomainError(
                        f"verbatim contrastive ratio is nonpositive for pair "
                        f"(video {S.video_ids[v]}, text {S.text_ids[q]})"
                    )
            else:
                raise ConfigError(f"unknown nce_form {nce_form!r}")
            denom = ag.tensor_sum(ag.stack(parts))
            terms.append(ag.sub(ag.log(denom), ag.log(num)))  # -log(num/denom)
    return ag.scale(ag.tensor_sum(ag.stack(terms)), 1.0 / S.n_queries)


def total_loss(S: BatchSimilarities, cfg: TrainingConfig,
               negatives: Union[str, NegativeChoice],
               rng: Optional[np.random.Generator] = None) -> Tensor:
    """Hinge term plus lambda-weighted contrastive term."""
    loss = triplet_loss(S, cfg.margin, negatives, rng)
    if cfg.lambda_ > 0.0:
        loss = ag.add(loss, ag.scale(infonce_loss(S, cfg.temperature, cfg.nce_form), cfg.lambda_))
    return loss


# --- optimizer --------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# --- training loop ---------------------------------------------------------------------

def _epoch_pairs(dataset, rng: np.random.Generator) -> list[tuple[str, str]]:
    """One (video_id, text_id) pair per video: a uniformly sampled caption."""
    pairs = []
    for video_id in dataset.video_ids():
        texts = dataset.texts_of(video_id)
        if not texts:
            continue
        pairs.append((video_id, texts[int(rng.integers(len(texts)))].text_id))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def _make_batches(pairs: list, batch_size: int) -> list[list]:
    batches = [pairs[i:i + batch_size] for i in range(0, len(pairs), batch_size)]
    # a trailing singleton has no in-batch negatives; fold it into its neighbor
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def train(model: ModelParams, dataset, cfg: TrainingConfig, seed: int = 0,
          val_dataset=None, log_file=None) -> list[dict]:
    """Mini-batch training over all parameters; returns the per-epoch log.

    Deterministic for a fixed seed: caption sampling, batch shuffling, and
    random-negative draws all come from one generator. Raises a
    training-diverged error (with epoch and step) the moment a loss goes
    non-finite. When a validation set is given, each epoch logs its summed
    recall, and the learning rate decays whenever that metric fails to
    improve for ``lr_patience`` consecutive epochs.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
    log: list[dict] = []
    best_val = -math.inf
    stale = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        policy = "hardest" if epoch > cfg.hard_negative_start_epoch else "random"
        losses = []
        for batch in _make_batches(_epoch_pairs(dataset, rng), cfg.batch_size):
            videos = [FrameSequence(vid, dataset.video_features(vid)) for vid, _ in batch]
            queries = [TokenSequence(tid, dataset.text_features(tid)) for _, tid in batch]
            with Tape() as tape:
                S = batch_similarities(model, videos, queries, list(range(len(batch))))
                loss = total_loss(S, cfg, policy, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch=epoch, step=step)
            tape.backward(loss)
            opt.step()
            model.zero_grads()
            losses.append(value)
            step += 1
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else 0.0,
                 "lr": opt.lr, "steps": step, "negative_policy": policy}
        if val_dataset is not None and len(val_dataset.text_ids()) > 0:
            from .retrieval_eval import evaluate

            entry["val_sumr"] = evaluate(model, val_dataset).sumr
            if entry["val_sumr"] > best_val:
                best_val = entry["val_sumr"]
                stale = 0
            else:
                stale += 1
                if stale >= cfg.lr_patience:
                    opt.lr *= cfg.lr_decay_factor
                    stale = 0
        log.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
    return log


# --- checkpoints -------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"UEMC"
_CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: ModelParams,
                    train_config: Optional[TrainingConfig] = None) -> None:
    """Single binary file: magic, version, JSON config echo, named blobs.

    Each parameter is stored as a length-prefixed name plus one embedded
    feature-matrix record (so values are 32-bit on disk).
    """
    from .data_io import write_uemf_stream

    echo = {"model": model.config.to_dict()}
    if train_config is not None:
        echo["train"] = train_config.to_dict()
    blob = json.dumps(echo, sort_keys=True).encode("utf-8")
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(_CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(len(params).to_bytes(4, "little"))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(len(encoded).to_bytes(4, "little"))
            fh.write(encoded)
            mat = tensor.data if tensor.data.ndim == 2 else tensor.data.reshape(1, -1)
            write_uemf_stream(fh, mat)


def load_checkpoint(path) -> tuple[ModelParams, Optional[TrainingConfig]]:
    """Rebuild a model from a checkpoint written by save_checkpoint."""
    from .data_io import read_uemf_stream

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
        version = int.from_bytes(fh.read(4), "little")
        if version != _CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        blob_len = int.from_bytes(fh.read(4), "little")
        try:
            echo = json.loads(fh.read(blob_len).decode("utf-8"))
            config = ModelConfig.from_dict(echo["model"])
        except (ValueError, KeyError) as exc:
            raise CheckpointFormatError(f"bad checkpoint config echo: {exc}") from None
        train_config = TrainingConfig(**echo["train"]) if "train" in echo else None

        model = init_model(config, seed=0)
        params = model.named_parameters()
        count = int.from_bytes(fh.read(4), "little")
        if count != len(params):
            raise CheckpointFormatError(
                f"checkpoint has {count} parameters, model expects {len(params)}"
            )
        for _ in range(count):
            name_len = int.from_bytes(fh.read(4), "little")
            name = fh.read(name_len).decode("utf-8")
            if name not in params:
                raise CheckpointFormatError(f"unknown parameter {name!r} in checkpoint")
            mat = read_uemf_stream(fh)
            target = params[name]
            if mat.size != target.data.size:
                raise CheckpointFormatError(
                    f"parameter {name!r} has {mat.size} values, expected {target.data.size}"
                )
            target.data[...] = mat.reshape(target.data.shape)
    return model, train_config
