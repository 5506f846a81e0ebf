"""Deterministic mini-batch training with Adam, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from avfusion import data as data_mod
from avfusion.errors import InvalidConfig, ShapeMismatch
from avfusion.metrics import MetricsReport, bce_loss, compute_report
from avfusion.models import Model, save_weights

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Model, lr: float = 1e-3, **kwargs) -> "AdamState":
        params = model.parameters()
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lr=lr,
            **kwargs,
        )


def adam_step(state: AdamState, model: Model) -> None:
    """One bias-corrected Adam update of every parameter, then zero the gradients."""
    params, grads = model.parameters(), model.gradients()
    if list(params) != list(state.m):
        raise ShapeMismatch("optimizer state does not match the model's parameter registry")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeMismatch(f"optimizer moment for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.zero_grads()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 1
    early_stop_patience: int = 10
    gap_k: int = 20
    f1_threshold: float = 0.5
    lr: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise InvalidConfig(f"epochs must be a non-negative integer, got {self.epochs!r}")
        for name in ("batch_size", "eval_every", "early_stop_patience", "gap_k"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidConfig(f"seed must be a non-negative integer, got {self.seed!r}")
        if not 0.0 < self.f1_threshold < 1.0:
            raise InvalidConfig(f"f1_threshold must be in (0, 1), got {self.f1_threshold}")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise InvalidConfig(f"lr must be finite and >= 0, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    train_loss: float
    report: MetricsReport

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.train_loss,
            "val_loss": self.report.mean_loss,
            "gap": self.report.gap,
            "f1": self.report.micro_f1,
        }


@dataclass
class TrainHistory:
    entries: list[HistoryEntry] = field(default_factory=list)

    def append(self, entry: HistoryEntry) -> None:
        if self.entries and entry.epoch <= self.entries[-1].epoch:
            raise ValueError("history epochs must be strictly increasing")
        self.entries.append(entry)

    @property
    def best(self) -> HistoryEntry:
        # earliest entry wins ties
        return max(self.entries, key=lambda e: (e.report.gap, -e.epoch))

    def to_json(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def check_conforms(model: Model, dataset: data_mod.Dataset) -> None:
    cfg = model.config
    problems = []
    if dataset.vocab_size != cfg.vocab_size:
        problems.append(f"vocab {dataset.vocab_size} != {cfg.vocab_size}")
    if "visual" in cfg.modalities and dataset.visual_dim != cfg.visual_dim:
        problems.append(f"visual_dim {dataset.visual_dim} != {cfg.visual_dim}")
    if "audio" in cfg.modalities and dataset.audio_dim != cfg.audio_dim:
        problems.append(f"audio_dim {dataset.audio_dim} != {cfg.audio_dim}")
    if dataset.seq_len != cfg.seq_len:
        problems.append(f"seq_len {dataset.seq_len} != {cfg.seq_len}")
    if problems:
        raise ShapeMismatch("dataset does not match model config: " + ", ".join(problems))


def predict_dataset(model: Model, dataset: data_mod.Dataset, batch_size: int = 256, threads: int = 1) -> np.ndarray:
    """Probabilities for every video in dataset order; no layer state is touched."""
    check_conforms(model, dataset)
    chunks = [
        (dataset.visual[s : s + batch_size], dataset.audio[s : s + batch_size])
        for s in range(0, len(dataset), batch_size)
    ]

    def run(chunk):
        v, a = chunk
        return model.predict(v.astype(np.float64), a.astype(np.float64))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs, axis=0)


def evaluate(
    model: Model,
    dataset: data_mod.Dataset,
    gap_k: int = 20,
    f1_threshold: float = 0.5,
    threads: int = 1,
) -> MetricsReport:
    """Single pass over ``dataset``; GAP is computed once over the merged pool."""
    preds = predict_dataset(model, dataset, threads=threads)
    return compute_report(preds, dataset.labels, gap_k, f1_threshold)


def _write_checkpoint(model: Model, ckpt_dir: Path, stem: str, entry: HistoryEntry) -> None:
    save_weights(model, ckpt_dir / f"{stem}.afw1")
    sidecar = {
        "epoch": entry.epoch,
        "metrics": entry.report.to_dict(),
        "train_loss": entry.train_loss,
        "model": model.config.to_dict(),
    }
    (ckpt_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def train(
    model: Model,
    train_set: data_mod.Dataset,
    val_set: data_mod.Dataset,
    config: TrainConfig,
    ckpt_dir: str | Path | None = None,
    restore_best: bool = True,
    threads: int = 1,
) -> TrainHistory:
    """Train ``model`` in place and return the evaluation history.

    Evaluations happen before the first epoch (epoch 0), every
    ``eval_every`` epochs and after the final epoch.  Training stops after
    ``early_stop_patience`` evaluations without a GAP improvement.  With
    ``restore_best`` the model ends holding the best-GAP parameters.
    """
    config.validate()
    check_conforms(model, train_set)
    check_conforms(model, val_set)
    ckpt = Path(ckpt_dir) if ckpt_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    state = AdamState.for_model(model, lr=config.lr)
    history = TrainHistory()
    model.zero_grads()

    best_gap = -math.inf
    best_params = model.copy_parameters()
    stale = 0

    def record(epoch: int, train_loss: float) -> bool:
        nonlocal best_gap, best_params, stale
        report = evaluate(model, val_set, config.gap_k, config.f1_threshold, threads)
        entry = HistoryEntry(epoch, train_loss, report)
        history.append(entry)
        log.info("epoch %d loss %.6f gap %.4f f1 %.4f", epoch, train_loss, report.gap, report.micro_f1)
        improved = report.gap > best_gap
        if improved:
            best_gap = report.gap
            best_params = model.copy_parameters()
            stale = 0
        else:
            stale += 1
        if ckpt is not None:
            _write_checkpoint(model, ckpt, "last", entry)
            if improved:
                _write_checkpoint(model, ckpt, "best", entry)
            (ckpt / "history.json").write_text(json.dumps(history.to_json(), indent=2) + "\n")
        return stale >= config.early_stop_patience

    initial_loss = evaluate(model, train_set, config.gap_k, config.f1_threshold, threads).mean_loss
    record(0, initial_loss)

    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for visual, audio, labels in data_mod.batches(train_set, config.batch_size, config.seed, epoch):
            loss, dprob = bce_loss(model.forward(visual, audio), labels)
            model.backward(dprob)
            adam_step(state, model)
            total += loss * len(labels)
            count += len(labels)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            if record(epoch, total / count):
                break

    if restore_best:
        model.load_parameters(best_params)
    return history
