"""Command-line entry point.

One executable, subcommand per pipeline stage: segment features, train,
evaluate, retrieve for a single query, sweep the segmentation threshold,
run the component/method comparison, and generate synthetic datasets.
Settings come from an optional key=value config file; command-line flags
win over file values. Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numeric or training error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import fields
from typing import Optional

import numpy as np

from .data_io import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_uemf,
    write_dataset,
)
from .errors import ConfigError, DataError, NumericError
from .matching import TrainingConfig, load_checkpoint, save_checkpoint, train
from .model import ModelConfig, init_model
from .retrieval_eval import (
    ablation_matrix,
    evaluate,
    format_table,
    prepare_corpus,
    rank_corpus,
    sweep_epsilon,
    write_rows_csv,
)
from .segmentation import (
    equal_division_segment,
    kmeans_segment,
    pgvs_segment,
    write_segmentation_file,
)
from .encoders import TokenSequence


def parse_kv_file(path) -> dict[str, str]:
    """Parse a `key = value` config file; # lines are comments."""
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            key, value = key.strip(), value.strip()
            if not key or not value:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            if key in mapping:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            mapping[key] = value
    return mapping


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"bad boolean for {key!r}: {raw!r}")


def _model_config_from(mapping: dict[str, str]) -> dict:
    """Convert string values to typed ModelConfig kwargs; rejects unknowns."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    unknown = set(mapping) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, raw in mapping.items():
        try:
            if types[key] == "int":
                kwargs[key] = int(raw)
            elif types[key] == "float":
                kwargs[key] = float(raw)
            elif types[key] == "bool":
                kwargs[key] = _parse_bool(raw, key)
            else:
                kwargs[key] = raw
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return kwargs


_MODEL_FLAG_FIELDS = ("text_dim", "video_dim", "dim", "proj_dim", "heads", "text_layers",
                      "video_layers", "max_len", "epsilon", "equal_events")
_TRAIN_FLAG_FIELDS = ("margin", "hard_negative_start_epoch", "learning_rate", "batch_size",
                      "epochs", "temperature", "nce_form", "lr_decay_factor", "lr_patience")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--text-dim", type=int, help="raw text feature width")
    p.add_argument("--video-dim", type=int, help="raw video feature width")
    p.add_argument("--dim", type=int, help="shared embedding width")
    p.add_argument("--proj-dim", type=int, help="refinement projection width")
    p.add_argument("--heads", type=int, help="attention heads per tower layer")
    p.add_argument("--text-layers", type=int)
    p.add_argument("--video-layers", type=int)
    p.add_argument("--max-len", type=int, help="max tokens / frames kept per input")
    p.add_argument("--epsilon", type=float, help="segmentation similarity threshold")
    p.add_argument("--equal-events", type=int, help="span count when segmentation is off")
    p.add_argument("--no-segmentation", action="store_true",
                   help="replace threshold segmentation with equal division")
    p.add_argument("--no-refinement", action="store_true",
                   help="score mean-pooled events directly")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--margin", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="contrastive loss weight")
    p.add_argument("--hard-negative-start-epoch", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--nce-form", choices=["exponentiated", "verbatim"])
    p.add_argument("--lr-decay-factor", type=float)
    p.add_argument("--lr-patience", type=int)


def _build_configs(args) -> tuple[ModelConfig, TrainingConfig]:
    """File values (if --config given) overridden by any explicit flags."""
    file_map = parse_kv_file(args.config) if getattr(args, "config", None) else {}
    train_cfg, leftover = TrainingConfig.from_mapping(file_map)
    model_kwargs = _model_config_from(leftover)

    train_overrides = {}
    for name in _TRAIN_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            train_overrides[name] = value
    if getattr(args, "lambda_", None) is not None:
        train_overrides["lambda_"] = args.lambda_
    if train_overrides:
        train_cfg = dataclasses.replace(train_cfg, **train_overrides)

    for name in _MODEL_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            model_kwargs[name] = value
    if getattr(args, "no_segmentation", False):
        model_kwargs["use_event_segmentation"] = False
    if getattr(args, "no_refinement", False):
        model_kwargs["use_event_refinement"] = False
    return ModelConfig(**model_kwargs), train_cfg


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        threads = args.threads
    elif os.environ.get("UEM_THREADS"):
        try:
            threads = int(os.environ["UEM_THREADS"])
        except ValueError:
            raise ConfigError(f"UEM_THREADS must be an integer, got "
                              f"{os.environ['UEM_THREADS']!r}") from None
    else:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError(f"thread count must be positive, got {threads}")
    return threads


def _load_split(args, model_cfg: ModelConfig, split: str):
    return load_dataset(args.manifest, getattr(args, "splits", None), split,
                        expect_video_dim=model_cfg.video_dim,
                        expect_text_dim=model_cfg.text_dim)


def _read_boundaries(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        truth = json.load(fh)
    if "boundaries" not in truth:
        raise DataError(f"{path} has no 'boundaries' key")
    return truth["boundaries"]


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- subcommands ---------------------------------------------------------------------

def cmd_segment(args) -> int:
    features = read_uemf(args.features)
    video_id = os.path.splitext(os.path.basename(args.features))[0]
    method = args.method
    if method == "pgvs":
        seg = pgvs_segment(features, args.epsilon, video_id=video_id)
    elif method.startswith("equal:"):
        seg = equal_division_segment(features, _method_k(method), video_id=video_id)
    elif method.startswith("kmeans:"):
        k = _method_k(method)
        if k > features.shape[0]:
            raise ConfigError(f"kmeans needs k <= frame count, got k={k} "
                              f"for {features.shape[0]} frames")
        seg = kmeans_segment(features, k, seed=args.seed, video_id=video_id)
    else:
        raise ConfigError(f"unknown method {method!r}; use pgvs, equal:<k> or kmeans:<k>")
    write_segmentation_file(args.out, [seg], centers_path=args.centers_out)
    print(f"{video_id}: {len(seg.spans)} events over {seg.n_frames} frames -> {args.out}")
    return 0


def _method_k(method: str) -> int:
    try:
        k = int(method.split(":", 1)[1])
    except ValueError:
        raise ConfigError(f"bad event count in method {method!r}") from None
    if k < 1:
        raise ConfigError(f"event count must be positive in method {method!r}")
    return k


def cmd_train(args) -> int:
    model_cfg, train_cfg = _build_configs(args)
    train_ds = _load_split(args, model_cfg, "train")
    val_ds = None
    if args.splits is not None:
        candidate = _load_split(args, model_cfg, "val")
        if candidate.text_ids():
            val_ds = candidate
    model = init_model(model_cfg, seed=args.seed)

    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        train(model, train_ds, train_cfg, seed=args.seed, val_dataset=val_ds, log_file=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(args.out_checkpoint, model, train_cfg)

    final_ds = val_ds if val_ds is not None else train_ds
    report = evaluate(model, final_ds, threads=_resolve_threads(args))
    print(json.dumps({"split": final_ds.name, **report.to_dict()}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if args.epsilon is not None:
        model = dataclasses.replace(
            model, config=dataclasses.replace(model.config, epsilon=args.epsilon))
    dataset = _load_split(args, model.config, args.split)
    report = evaluate(model, dataset, threads=_resolve_threads(args))
    payload = report.to_dict()
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        _write_json(args.out, payload)
    return 0


def cmd_retrieve(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_split(args, model.config, args.split)
    corpus = prepare_corpus(model, dataset)
    tokens = read_uemf(args.text_features)
    result = rank_corpus(model, TokenSequence(args.text_id, tokens), corpus)
    top = result.ranking[:args.topk]
    payload = {
        "text_id": result.text_id,
        "results": [{"rank": i + 1, "video_id": vid, "score": score}
                    for i, (vid, score) in enumerate(top)],
    }
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        _write_json(args.out, payload)
    return 0


def _parse_grid(raw: str) -> list[float]:
    try:
        grid = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad threshold grid {raw!r}") from None
    if not grid:
        raise ConfigError("threshold grid is empty")
    return grid


def cmd_sweep(args) -> int:
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        dataset = _load_split(args, model.config, args.split)
    else:
        dataset = load_dataset(args.manifest, args.splits, args.split)
    boundaries = _read_boundaries(args.ground_truth) if args.ground_truth else None
    rows = sweep_epsilon(dataset, _parse_grid(args.grid), model=model, boundaries=boundaries)
    write_rows_csv(args.out_csv, rows)
    if args.out_json:
        _write_json(args.out_json, rows)
    print(format_table(rows), end="")
    return 0


def cmd_ablate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_split(args, model.config, args.split)
    boundaries = _read_boundaries(args.ground_truth) if args.ground_truth else None
    tables = ablation_matrix(model, dataset, boundaries=boundaries)
    print("components:")
    print(format_table(tables["components"]), end="")
    print("methods:")
    print(format_table(tables["methods"]), end="")
    if args.out:
        _write_json(args.out, tables)
    if args.out_csv:
        write_rows_csv(args.out_csv, tables["components"] + tables["methods"])
    return 0


def cmd_synth(args) -> int:
    mapping = parse_kv_file(args.spec) if args.spec else {}
    types = {f.name: f.type for f in fields(SyntheticSpec)}
    unknown = set(mapping) - set(types)
    if unknown:
        raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
    kwargs = {}
    for key, raw in mapping.items():
        try:
            kwargs[key] = int(raw) if types[key] == "int" else float(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    for flag in ("n_videos", "dim", "events_min", "events_max", "frames_min", "frames_max"):
        value = getattr(args, flag)
        if value is not None:
            kwargs[flag] = value
    if args.cosine_floor is not None:
        kwargs["cosine_floor"] = args.cosine_floor
    if args.cosine_ceiling is not None:
        kwargs["cosine_ceiling"] = args.cosine_ceiling
    kwargs["seed"] = args.seed
    data = generate_synthetic(SyntheticSpec(**kwargs))
    paths = write_dataset(data, args.out_dir)
    n_frames = sum(v.shape[0] for v in data.videos.values())
    print(f"wrote {len(data.videos)} videos ({n_frames} frames), "
          f"{len(data.texts)} captions -> {args.out_dir}")
    print(json.dumps(paths, sort_keys=True))
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uem",
        description="Event-level video retrieval: segment, train, evaluate, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (default: UEM_THREADS or machine parallelism)")

    p = sub.add_parser("segment", help="group one feature file into events")
    p.add_argument("--features", required=True, help="input feature matrix file")
    p.add_argument("--method", default="pgvs", help="pgvs, equal:<k>, or kmeans:<k>")
    p.add_argument("--epsilon", type=float, default=0.90)
    p.add_argument("--out", required=True, help="output segmentation text file")
    p.add_argument("--centers-out", default=None, help="optional binary centers sidecar")
    common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", default=None, help="JSON file of train/val/test video ids")
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", default=None, help="per-epoch JSON-lines log path")
    _add_model_flags(p)
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epsilon", type=float, default=None, help="override the stored threshold")
    p.add_argument("--out", default=None, help="write the metrics JSON here too")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank the corpus for one query feature file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text-features", required=True, help="query token feature file")
    p.add_argument("--text-id", default="query")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("sweep", help="segmentation statistics across thresholds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--grid", required=True, help="comma-separated thresholds")
    p.add_argument("--checkpoint", default=None, help="also evaluate metrics per threshold")
    p.add_argument("--ground-truth", default=None, help="JSON with planted boundaries")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", default=None)
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="component and method comparison tables")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ground-truth", default=None)
    p.add_argument("--out", default=None, help="write both tables as JSON")
    p.add_argument("--out-csv", default=None)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known events")
    p.add_argument("--spec", default=None, help="key = value spec file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-videos", dest="n_videos", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--events-min", type=int, default=None)
    p.add_argument("--events-max", type=int, default=None)
    p.add_argument("--frames-min", type=int, default=None)
    p.add_argument("--frames-max", type=int, default=None)
    p.add_argument("--cosine-floor", type=float, default=None)
    p.add_argument("--cosine-ceiling", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
