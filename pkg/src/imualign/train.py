"""Contrastive pre-training loop: batch construction, Adagrad updates,
inverse-time learning-rate decay, run-directory output, checkpoints.

Anchors enter every batch as constants, so they never receive gradients;
only the encoder parameters are optimized.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .container import read_container, write_container
from .contrastive import LossReport, similarity_matrix, symmetric_loss, trimodal_loss
from .encoder import EncoderConfig, EncoderParams, encode_batch_on_tape, init_params
from .errors import DataError, NumericError
from .signalio import ParallelDataset

CKPT_MAGIC = b"IMUK"
CKPT_VERSION = 1

MODES = ("iv", "it", "ivt")


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.01
    adagrad_eps: float = 1e-8
    decay: float = 0.1
    epochs: int = 10
    seed: int = 0
    mode: str = "iv"
    temperature: float = 0.1

    def __post_init__(self):
        if self.batch_size < 2:
            raise DataError(f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if min(self.learning_rate, self.adagrad_eps, self.temperature) <= 0:
            raise DataError("learning_rate, adagrad_eps, and temperature must be positive")
        if self.decay < 0:
            raise DataError(f"decay must be >= 0, got {self.decay}")
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "adagrad_eps": self.adagrad_eps,
            "decay": self.decay,
            "epochs": self.epochs,
            "seed": self.seed,
            "mode": self.mode,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class AdagradState:
    """Per-parameter sums of squared gradients plus a step counter."""

    def __init__(self, accumulators: dict[str, np.ndarray] | None = None, step: int = 0):
        self.accumulators = accumulators or {}
        self.step = step

    def accumulator_for(self, name: str, shape) -> np.ndarray:
        if name not in self.accumulators:
            self.accumulators[name] = np.zeros(shape)
        return self.accumulators[name]


def make_batches(dataset, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Deterministic shuffle keyed by (seed, epoch); the trailing partial
    batch is dropped so every batch defines a full positive pairing.

    `dataset` may be anything with a length, or the item count itself.
    """
    n_items = dataset if isinstance(dataset, int) else len(dataset)
    if n_items < batch_size:
        raise DataError(f"dataset of {n_items} items is smaller than batch size {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n_items)
    n_full = n_items // batch_size
    return [order[i * batch_size : (i + 1) * batch_size].tolist() for i in range(n_full)]


def adagrad_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdagradState,
    lr: float,
    eps: float,
) -> None:
    """Per coordinate: acc += g^2; p -= lr * g / (sqrt(acc) + eps)."""
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        p = params[name]
        if g.shape != p.data.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        acc = state.accumulator_for(name, p.data.shape)
        acc += g * g
        p.data -= lr * g / (np.sqrt(acc) + eps)
    state.step += 1


def lr_at(epoch: int, base_lr: float, decay: float) -> float:
    """Inverse-time decay: base_lr / (1 + decay * epoch)."""
    return base_lr / (1.0 + decay * epoch)


def _batch_loss(
    tape: Tape,
    dataset: ParallelDataset,
    batch: list[int],
    params: EncoderParams,
    encoder_config: EncoderConfig,
    config: TrainConfig,
) -> tuple[LossReport, Tensor]:
    ids = [dataset.windows[i].window_id for i in batch]
    signals = [dataset.windows[i].signal for i in batch]
    emb = encode_batch_on_tape(tape, signals, params, encoder_config)
    if config.mode in ("iv", "ivt"):
        anchors_v = Tensor(dataset.anchor_matrix(ids, "video"))
        sims_iv = similarity_matrix(tape, emb, anchors_v, "imu", "video")
    if config.mode in ("it", "ivt"):
        anchors_t = Tensor(dataset.anchor_matrix(ids, "text"))
        sims_it = similarity_matrix(tape, emb, anchors_t, "imu", "text")

    if config.mode == "iv":
        f, b, sym = symmetric_loss(tape, sims_iv, config.temperature)
        report = LossReport(l_i2v=f.item(), l_v2i=b.item(), l_sym_iv=sym.item(), l_total=sym.item())
        return report, sym
    if config.mode == "it":
        f, b, sym = symmetric_loss(tape, sims_it, config.temperature)
        report = LossReport(l_i2t=f.item(), l_t2i=b.item(), l_sym_it=sym.item(), l_total=sym.item())
        return report, sym
    return trimodal_loss(tape, sims_iv, sims_it, config.temperature)


def train_epoch(
    dataset: ParallelDataset,
    params: EncoderParams,
    opt_state: AdagradState,
    config: TrainConfig,
    encoder_config: EncoderConfig,
    epoch: int,
) -> LossReport:
    """One pass over the shuffled dataset; returns mean per-batch losses."""
    if config.mode in ("it", "ivt") and dataset.text_anchors is None:
        raise DataError(f"mode {config.mode!r} needs text anchors but the dataset has none")
    lr = lr_at(epoch, config.learning_rate, config.decay)
    batches = make_batches(dataset, config.batch_size, config.seed, epoch)
    sums: dict[str, float] = {}
    named = params.named()
    for batch in batches:
        params.zero_grads()
        tape = Tape()
        report, loss = _batch_loss(tape, dataset, batch, params, encoder_config, config)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at epoch {epoch}: {loss.data}")
        ad.backward(tape, loss)
        grads = {name: t.grad for name, t in named.items()}
        adagrad_step(named, grads, opt_state, lr, config.adagrad_eps)
        for k, v in report.present().items():
            sums[k] = sums.get(k, 0.0) + v
    params.assert_finite()
    means = {k: v / len(batches) for k, v in sums.items()}
    return LossReport(**means)


def fit(
    dataset: ParallelDataset,
    encoder_config: EncoderConfig,
    config: TrainConfig,
    run_dir=None,
    params: EncoderParams | None = None,
    opt_state: AdagradState | None = None,
    start_epoch: int = 0,
    manifest: dict | None = None,
) -> tuple[EncoderParams, AdagradState, list[dict]]:
    """Run the training loop, optionally writing a run directory with
    config.json, metrics.jsonl, a manifest, and a final checkpoint.
    """
    if params is None:
        params = init_params(encoder_config, config.seed)
    if opt_state is None:
        opt_state = AdagradState()

    run_path = None
    metrics_fh = None
    if run_dir is not None:
        run_path = Path(run_dir)
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "config.json").write_text(
            json.dumps({"train": config.to_dict(), "encoder": encoder_config.to_dict()},
                       indent=2, sort_keys=True) + "\n"
        )
        metrics_fh = open(run_path / "metrics.jsonl", "a" if start_epoch else "w", encoding="utf-8")

    history = []
    try:
        for epoch in range(start_epoch, config.epochs):
            report = train_epoch(dataset, params, opt_state, config, encoder_config, epoch)
            record: dict = {"epoch": epoch, "lr": lr_at(epoch, config.learning_rate, config.decay)}
            for key in ("l_i2v", "l_v2i", "l_i2t", "l_t2i", "l_total"):
                value = getattr(report, key)
                if value is not None:
                    record[key] = value
            history.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if run_path is not None:
        save_checkpoint(run_path / f"ckpt-{config.epochs}.bin",
                        params, opt_state, encoder_config, config, step=config.epochs)
        if manifest is None:
            manifest = {"command": "imualign.train.fit"}
        write_manifest(run_path, manifest)
    return params, opt_state, history


def write_manifest(run_dir, manifest: dict) -> None:
    manifest = dict(manifest)
    manifest.setdefault("tool_version", _tool_version())
    manifest.setdefault("finished_at", time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    (Path(run_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _tool_version() -> str:
    from . import __version__

    return __version__


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: EncoderParams
    opt_state: AdagradState | None
    encoder_config: EncoderConfig
    train_config: TrainConfig | None
    step: int


def save_checkpoint(
    path,
    params: EncoderParams,
    opt_state: AdagradState | None,
    encoder_config: EncoderConfig,
    train_config: TrainConfig | None,
    step: int,
) -> None:
    """Write a versioned binary checkpoint; round-trips bit-exactly."""
    named = params.named()
    header = {
        "kind": "checkpoint",
        "step": int(step),
        "encoder_config": encoder_config.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "param_names": list(named.keys()),
        "opt": None if opt_state is None else {
            "step": opt_state.step,
            "names": sorted(opt_state.accumulators.keys()),
        },
    }
    arrays = [(f"param.{name}", t.data) for name, t in named.items()]
    if opt_state is not None:
        arrays += [(f"acc.{name}", opt_state.accumulators[name])
                   for name in sorted(opt_state.accumulators.keys())]
    write_container(path, CKPT_MAGIC, CKPT_VERSION, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path, CKPT_MAGIC, CKPT_VERSION)
    encoder_config = EncoderConfig.from_dict(header["encoder_config"])
    train_config = None
    if header.get("train_config") is not None:
        train_config = TrainConfig.from_dict(header["train_config"])
    params = init_params(encoder_config, seed=0)
    named = params.named()
    if list(named.keys()) != header["param_names"]:
        raise DataError(f"{path}: parameter names do not match the encoder config")
    for name, t in named.items():
        stored = arrays[f"param.{name}"]
        if stored.shape != t.data.shape:
            raise DataError(f"{path}: parameter {name} has shape {stored.shape}, expected {t.data.shape}")
        t.data = stored
    opt_state = None
    if header.get("opt") is not None:
        opt_state = AdagradState(
            accumulators={name: arrays[f"acc.{name}"] for name in header["opt"]["names"]},
            step=int(header["opt"]["step"]),
        )
    return Checkpoint(params, opt_state, encoder_config, train_config, int(header["step"]))
