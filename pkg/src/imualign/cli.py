"""Command-line entry points.

Every command prints one machine-readable JSON object to stdout and human
diagnostics to stderr. Exit codes: 0 success, 2 validation failure,
3 numerical failure. Commands that create a run directory also write a
manifest with the resolved configuration and input content hashes.

The environment variable IMU_ALIGN_THREADS caps worker parallelism for
multi-file ingestion and query ranking.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import EncoderConfig, encode_batch
from .errors import DataError, ImuAlignError, NumericError
from .evaluate import (
    ProbeConfig,
    classification_metrics,
    eval_retrieval,
    fine_tune,
    save_head,
    train_probe,
    zeroshot_classify,
)
from .signalio import (
    AnchorEmbedding,
    ImuStream,
    ParallelDataset,
    WindowCache,
    assemble_dataset,
    content_hash,
    load_anchor_embeddings,
    load_imu_stream,
    load_labels,
    load_window_cache,
    make_windows,
    resample,
    save_window_cache,
    synth_class_anchors,
    synth_dataset,
    write_anchor_embeddings,
    write_imu_stream,
    write_labels,
)
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint, write_manifest


def max_workers() -> int:
    raw = os.environ.get("IMU_ALIGN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _manifest(command: str, args_map: dict, inputs: list) -> dict:
    return {
        "command": command,
        "config": {k: v for k, v in args_map.items() if v is not None},
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        "tool_version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    workers = max_workers()
    paths = [Path(p) for p in args.imu]
    for p in paths:
        if not p.exists():
            raise DataError(f"input file {p} does not exist")

    def one(path):
        stream = load_imu_stream(path)
        stream = resample(stream, args.rate_hz)
        return stream, make_windows(stream, args.window_s, args.stride_s)

    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(one, paths))
    else:
        loaded = [one(p) for p in paths]

    windows = [w for _, ws in loaded for w in ws]
    duration = sum(s.duration_s for s, _ in loaded)
    digest = content_hash(paths, {"window_s": args.window_s, "stride_s": args.stride_s,
                                  "rate_hz": args.rate_hz})
    cache = WindowCache(windows, args.rate_hz, args.window_s, args.stride_s, digest)
    save_window_cache(cache, args.out)
    _emit({
        "n_windows": len(windows),
        "window_samples": windows[0].n_samples if windows else 0,
        "duration_s": round(duration, 6),
        "n_sources": len(paths),
        "content_hash": digest,
        "out": str(args.out),
    })
    return 0


def cmd_train(args) -> int:
    config = TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        adagrad_eps=args.adagrad_eps,
        decay=args.decay,
        epochs=args.epochs,
        seed=args.seed,
        mode=args.mode,
        temperature=args.temperature,
    )
    if config.mode in ("it", "ivt") and not args.text_anchors:
        raise DataError(f"mode {config.mode!r} requires --text-anchors")
    encoder_config = EncoderConfig(
        n_conv_layers=len(args.conv_channels),
        conv_channels=tuple(args.conv_channels),
        conv_kernels=tuple(args.conv_kernels),
        conv_strides=tuple(args.conv_strides),
        gru_hidden=args.gru_hidden,
        embed_dim=args.embed_dim,
    )
    cache = load_window_cache(args.cache)
    dataset, dropped = assemble_dataset(
        cache.windows, args.video_anchors, args.text_anchors, coverage_threshold=args.coverage
    )
    if dropped:
        print(f"dropped {len(dropped)} windows without anchors", file=sys.stderr)

    inputs = [args.cache, args.video_anchors] + ([args.text_anchors] if args.text_anchors else [])
    manifest = _manifest("train", {**config.to_dict(), "encoder": encoder_config.to_dict()}, inputs)
    t0 = time.time()
    _, _, history = fit(dataset, encoder_config, config, run_dir=args.run_dir, manifest=manifest)
    _emit({
        "run_dir": str(args.run_dir),
        "epochs": config.epochs,
        "n_windows": len(dataset),
        "final": history[-1] if history else None,
        "wall_s": round(time.time() - t0, 3),
    })
    return 0


def _embeddings_from(ckpt_path, cache_path) -> tuple[dict[str, np.ndarray], "EncoderConfig"]:
    ckpt = load_checkpoint(ckpt_path)
    cache = load_window_cache(cache_path)
    if not cache.windows:
        raise DataError(f"{cache_path}: cache holds no windows")
    matrix = encode_batch(cache.windows, ckpt.params, ckpt.encoder_config)
    ids = [w.window_id for w in cache.windows]
    return dict(zip(ids, matrix)), ckpt


def cmd_eval_retrieval(args) -> int:
    embeddings, _ = _embeddings_from(args.ckpt, args.cache)
    anchors = load_anchor_embeddings(args.anchors)
    expected = "text" if "text" in args.direction else "video"
    wrong = [a.window_id for a in anchors.values() if a.modality != expected]
    if wrong:
        raise DataError(
            f"direction {args.direction} expects {expected} anchors but "
            f"{len(wrong)} records have another modality (first: {wrong[0]!r})"
        )
    vectors = {k: v.vector for k, v in anchors.items() if k in embeddings}
    if not vectors:
        raise DataError("no anchor ids overlap the cache windows")
    embeddings = {k: v for k, v in embeddings.items() if k in vectors}
    metrics = eval_retrieval(embeddings, vectors, args.direction, max_workers=max_workers())
    metrics["task"] = "retrieval"
    _emit(metrics)
    return 0


def cmd_eval_classify(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cache = load_window_cache(args.cache)
    labels, class_names = load_labels(args.labels)
    windows = [w for w in cache.windows if w.window_id in labels]
    if not windows:
        raise DataError("no cached window has a label")
    dataset = ParallelDataset(windows, {}, None, labels, class_names)
    ids = [w.window_id for w in windows]
    golds = [labels[w] for w in ids]
    probe_cfg = ProbeConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                            batch_size=args.batch_size)

    if args.protocol == "zeroshot":
        if not args.class_anchors:
            raise DataError("zeroshot requires --class-anchors")
        anchors = load_anchor_embeddings(args.class_anchors)
        missing = [c for c in class_names if c not in anchors]
        if missing:
            raise DataError(f"class anchors missing for: {', '.join(missing)}")
        pairs = [(c, anchors[c].vector) for c in class_names]
        emb = encode_batch(windows, ckpt.params, ckpt.encoder_config)
        preds = [zeroshot_classify(e, pairs) for e in emb]
    elif args.protocol == "probe":
        head = train_probe(dataset, ckpt.params, ckpt.encoder_config, probe_cfg)
        emb = encode_batch(windows, ckpt.params, ckpt.encoder_config)
        preds = head.predict(emb)
        if args.run_dir:
            _write_classify_run(args, head=head)
    elif args.protocol == "finetune":
        params, head = fine_tune(dataset, ckpt.params, None, ckpt.encoder_config, probe_cfg)
        emb = encode_batch(windows, params, ckpt.encoder_config)
        preds = head.predict(emb)
        if args.run_dir:
            _write_classify_run(args, head=head, params=params, ckpt=ckpt)
    else:
        raise DataError(f"unknown protocol {args.protocol!r}")

    metrics = classification_metrics(preds, golds, class_names)
    metrics["task"] = "classification"
    metrics["protocol"] = args.protocol
    _emit(metrics)
    return 0


def _write_classify_run(args, head, params=None, ckpt=None) -> None:
    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    save_head(run / "head.bin", head)
    if params is not None:
        save_checkpoint(run / "ckpt-finetuned.bin", params, None,
                        ckpt.encoder_config, ckpt.train_config, step=ckpt.step)
    inputs = [args.ckpt, args.cache, args.labels]
    if args.class_anchors:
        inputs.append(args.class_anchors)
    write_manifest(run, _manifest(f"eval-classify:{args.protocol}", {
        "epochs": args.epochs, "lr": args.lr, "seed": args.seed, "batch_size": args.batch_size,
    }, inputs))


def cmd_retrieve(args) -> int:
    query = _load_query_vector(args.query_anchor)
    pool_path = Path(args.pool)
    with open(pool_path, "rb") as fh:
        is_cache = fh.read(4) == b"IMUC"
    if is_cache:
        if not args.ckpt:
            raise DataError("--ckpt is required when the pool is a window cache")
        vectors, _ = _embeddings_from(args.ckpt, pool_path)
    else:
        vectors = {k: v.vector for k, v in load_anchor_embeddings(pool_path).items()}
    dim = len(next(iter(vectors.values())))
    if query.shape != (dim,):
        raise DataError(f"query dim {query.shape[0]} does not match pool dim {dim}")
    scored = sorted(
        ((float(np.dot(query, v)), wid) for wid, v in vectors.items()),
        key=lambda t: (-t[0], t[1]),
    )
    top = scored[: args.top_k]
    _emit({
        "pool_size": len(vectors),
        "results": [{"window_id": wid, "score": round(s, 6)} for s, wid in top],
    })
    return 0


def _load_query_vector(value: str) -> np.ndarray:
    """Accept either an inline JSON anchor record or a path to a JSONL file
    whose first record is the query.
    """
    text = value.strip()
    if text.startswith("{"):
        rec = json.loads(text)
    else:
        with open(value, "r", encoding="utf-8") as fh:
            line = next((ln for ln in fh if ln.strip()), None)
        if line is None:
            raise DataError(f"{value}: empty query file")
        rec = json.loads(line)
    vec = np.asarray(rec["vector"], dtype=np.float64)
    if vec.ndim != 1 or not np.all(np.isfinite(vec)):
        raise DataError("query vector must be a finite 1-D array")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DataError("query vector has zero norm")
    return vec / norm


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_samples = int(round(args.window_s * args.rate_hz))
    dataset = synth_dataset(args.seed, args.n, args.classes, args.dim, n_samples,
                            args.noise, args.rate_hz)
    csv_paths = []
    for w in dataset.windows:
        ts = np.arange(w.n_samples) / args.rate_hz
        stream = ImuStream(w.source_id, args.rate_hz, ts, w.signal.T)
        path = out / f"{w.source_id}.csv"
        write_imu_stream(stream, path)
        csv_paths.append(str(path))
    write_anchor_embeddings(dataset.video_anchors, out / "anchors_video.jsonl")
    write_anchor_embeddings(dataset.text_anchors, out / "anchors_text.jsonl")
    write_labels(dataset.labels, dataset.class_names, out / "labels.jsonl")
    class_anchors = {
        name: AnchorEmbedding(name, "text", vec)
        for name, vec in synth_class_anchors(args.seed, args.classes, args.dim).items()
    }
    write_anchor_embeddings(class_anchors, out / "class_anchors.jsonl")
    _emit({
        "out_dir": str(out),
        "n_windows": args.n,
        "n_classes": args.classes,
        "dim": args.dim,
        "noise": args.noise,
        "window_s": args.window_s,
        "rate_hz": args.rate_hz,
        "files": {
            "imu_csv": len(csv_paths),
            "video_anchors": "anchors_video.jsonl",
            "text_anchors": "anchors_text.jsonl",
            "labels": "labels.jsonl",
            "class_anchors": "class_anchors.jsonl",
        },
    })
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imualign",
        description="Align a trainable IMU encoder with frozen video/text anchor embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"imualign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="window IMU CSVs into a binary cache")
    p.add_argument("--imu", action="append", required=True, help="IMU CSV path (repeatable)")
    p.add_argument("--window-s", type=float, required=True)
    p.add_argument("--stride-s", type=float, default=None)
    p.add_argument("--rate-hz", type=float, default=200.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="contrastive pre-training of the IMU encoder")
    p.add_argument("--cache", required=True)
    p.add_argument("--video-anchors", required=True)
    p.add_argument("--text-anchors", default=None)
    p.add_argument("--mode", choices=["iv", "it", "ivt"], default="iv")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--adagrad-eps", type=float, default=1e-8)
    p.add_argument("--decay", type=float, default=0.1)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--coverage", type=float, default=1.0)
    p.add_argument("--conv-channels", type=int, nargs="+", default=[32, 64, 128])
    p.add_argument("--conv-kernels", type=int, nargs="+", default=[10, 5, 5])
    p.add_argument("--conv-strides", type=int, nargs="+", default=[2, 2, 2])
    p.add_argument("--gru-hidden", type=int, default=128)
    p.add_argument("--embed-dim", type=int, default=512)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="R@k / MRR over the full pool")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--direction", choices=["text2imu", "imu2video", "video2imu", "imu2text"],
                   required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-classify", help="zeroshot / probe / finetune activity recognition")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--protocol", choices=["zeroshot", "probe", "finetune"], required=True)
    p.add_argument("--class-anchors", default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=0, help="0 = full batch")
    p.add_argument("--run-dir", default=None, help="where probe/finetune write trained weights")
    p.set_defaults(func=cmd_eval_classify)

    p = sub.add_parser("retrieve", help="rank a pool against one query vector")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--pool", required=True,
                   help="window cache (encoded with --ckpt) or anchor JSONL used directly")
    p.add_argument("--query-anchor", required=True,
                   help="inline JSON anchor record or path to a JSONL file")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("synth", help="generate a synthetic aligned corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--window-s", type=float, default=1.0)
    p.add_argument("--rate-hz", type=float, default=200.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ingest" and args.stride_s is None:
        args.stride_s = args.window_s
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ImuAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
