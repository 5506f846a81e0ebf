"""Fusion architectures, parameter accounting and AFW1 weight files.

Four architectures share one head (concatenate branch outputs, fusion MLP,
linear to the vocabulary, sigmoid):

``attend_fusion``
    per modality: per-frame MLP, self-attention over frames, mean over frames
``fc_late_fusion``
    per modality: mean over frames, then MLP
``visual_only`` / ``audio_only``
    a single attention branch; the other modality's input is ignored
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from avfusion.errors import (
    BackwardBeforeForward,
    CorruptFile,
    InvalidConfig,
    ShapeMismatch,
    VersionMismatch,
)
from avfusion.layers import (
    GradCheckReport,
    Layer,
    LinearLayer,
    ReLU,
    SelfAttentionBlock,
    Sigmoid,
    compare_gradients,
    finite_difference,
)
from avfusion.metrics import bce_loss
from avfusion.rng import Philox

ARCHS = ("attend_fusion", "fc_late_fusion", "visual_only", "audio_only")

WEIGHTS_MAGIC = b"AFW1"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "attend_fusion"
    visual_dim: int = 1024
    audio_dim: int = 128
    vocab_size: int = 4716
    seq_len: int = 8
    hidden: tuple[int, ...] = (256,)
    fusion_hidden: tuple[int, ...] = (256,)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "fusion_hidden", tuple(int(h) for h in self.fusion_hidden))
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise InvalidConfig(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("visual_dim", "audio_dim", "vocab_size", "seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        for name in ("hidden", "fusion_hidden"):
            if any(h < 1 for h in getattr(self, name)):
                raise InvalidConfig(f"{name} widths must be positive, got {getattr(self, name)}")

    @property
    def modalities(self) -> tuple[str, ...]:
        if self.arch == "visual_only":
            return ("visual",)
        if self.arch == "audio_only":
            return ("audio",)
        return ("visual", "audio")

    def input_dim(self, modality: str) -> int:
        return self.visual_dim if modality == "visual" else self.audio_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["fusion_hidden"] = list(self.fusion_hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**data)


REF_FC = ModelConfig(arch="fc_late_fusion", hidden=(8528, 8528), fusion_hidden=(8528,))
REF_ATT = ModelConfig(arch="attend_fusion", hidden=(2656,), fusion_hidden=(2656,))
REFERENCE_CONFIGS = {"REF-FC": REF_FC, "REF-ATT": REF_ATT}


def _linear_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def param_count(config: ModelConfig) -> int:
    """Exact number of scalar parameters, without building the model."""
    config.validate()
    total = 0
    for modality in config.modalities:
        prev = config.input_dim(modality)
        for h in config.hidden:
            total += _linear_count(prev, h)
            prev = h
        if config.arch != "fc_late_fusion":
            total += 3 * prev * prev
    prev = sum(_branch_width(config, m) for m in config.modalities)
    for h in config.fusion_hidden:
        total += _linear_count(prev, h)
        prev = h
    return total + _linear_count(prev, config.vocab_size)


def _branch_width(config: ModelConfig, modality: str) -> int:
    return config.hidden[-1] if config.hidden else config.input_dim(modality)


class Branch:
    """One modality's encoder from ``[B, T, dim]`` frames to ``[B, width]``."""

    def __init__(self, modality: str, config: ModelConfig, rng: Philox):
        self.modality = modality
        self.attend = config.arch != "fc_late_fusion"
        in_dim = config.input_dim(modality)
        self.layers: list[tuple[str, Layer]] = []
        prev = in_dim
        for i, h in enumerate(config.hidden):
            self.layers.append((f"fc{i}", LinearLayer(prev, h, rng.child(f"fc{i}"))))
            self.layers.append((f"relu{i}", ReLU()))
            prev = h
        if self.attend:
            self.layers.append(("attn", SelfAttentionBlock(prev, rng.child("attn"))))
        self.width = prev
        self._T: int | None = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if self.attend:
            h = x
            for _, layer in self.layers:
                h = layer.forward(h, cache)
            out = h.mean(axis=1)
        else:
            out = x.mean(axis=1)
            for _, layer in self.layers:
                out = layer.forward(out, cache)
        if cache:
            self._T = x.shape[1]
        return out

    def backward(self, upstream: np.ndarray) -> None:
        T = self._T
        if self.attend:
            g = np.repeat(upstream[:, None, :] / T, T, axis=1)
            for _, layer in reversed(self.layers):
                g = layer.backward(g)
        else:
            g = upstream
            for _, layer in reversed(self.layers):
                g = layer.backward(g)


class Model:
    """A built architecture with an ordered parameter registry."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = Philox(seed, "model", config.arch)
        self.branches = {m: Branch(m, config, rng.child(m)) for m in config.modalities}
        self.head: list[tuple[str, Layer]] = []
        prev = sum(b.width for b in self.branches.values())
        for i, h in enumerate(config.fusion_hidden):
            self.head.append((f"fusion.fc{i}", LinearLayer(prev, h, rng.child("fusion", f"fc{i}"))))
            self.head.append((f"fusion.relu{i}", ReLU()))
            prev = h
        self.head.append(("out", LinearLayer(prev, config.vocab_size, rng.child("out"))))
        self.sigmoid = Sigmoid()
        self._ready = False

    def _named_layers(self) -> Iterator[tuple[str, Layer]]:
        for m, branch in self.branches.items():
            for name, layer in branch.layers:
                yield f"{m}.{name}", layer
        yield from self.head

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self._named_layers() for pn, p in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": g for ln, layer in self._named_layers() for pn, g in layer.grads.items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grads(self) -> None:
        for _, layer in self._named_layers():
            layer.zero_grads()

    def _check_input(self, x: np.ndarray, modality: str) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        dim = self.config.input_dim(modality)
        if x.ndim != 3 or x.shape[2] != dim or x.shape[1] < 1:
            raise ShapeMismatch(f"{modality} input must be [B, T, {dim}], got {x.shape}")
        return x

    def forward(self, visual: np.ndarray | None, audio: np.ndarray | None, cache: bool = True) -> np.ndarray:
        """Per-class probabilities ``[B, vocab_size]``.

        ``cache=False`` runs inference without touching layer state.
        """
        inputs = {"visual": visual, "audio": audio}
        pooled = []
        batch = None
        for m, branch in self.branches.items():
            x = self._check_input(inputs[m], m)
            if batch is not None and x.shape[0] != batch:
                raise ShapeMismatch(f"batch sizes differ between modalities: {batch} vs {x.shape[0]}")
            batch = x.shape[0]
            pooled.append(branch.forward(x, cache))
        h = np.concatenate(pooled, axis=1) if len(pooled) > 1 else pooled[0]
        for _, layer in self.head:
            h = layer.forward(h, cache)
        probs = self.sigmoid.forward(h, cache)
        if cache:
            self._ready = True
        return probs

    def predict(self, visual, audio) -> np.ndarray:
        return self.forward(visual, audio, cache=False)

    def backward(self, dloss_dprob: np.ndarray) -> None:
        """Accumulate parameter gradients from ``dLoss/dProb``."""
        if not self._ready:
            raise BackwardBeforeForward("Model.backward called without a cached forward")
        self._ready = False
        g = self.sigmoid.backward(np.asarray(dloss_dprob, dtype=np.float64))
        for _, layer in reversed(self.head):
            g = layer.backward(g)
        offset = 0
        for branch in self.branches.values():
            branch.backward(g[:, offset : offset + branch.width])
            offset += branch.width

    def weights_checksum(self) -> int:
        crc = 0
        for name, p in self.parameters().items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p, dtype="<f8").tobytes(), crc)
        return crc

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def load_parameters(self, state: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if list(state) != list(own):
            missing = set(own) ^ set(state)
            raise ShapeMismatch(f"parameter registry differs: {sorted(missing)[:5] or 'order'}")
        for name, value in state.items():
            if value.shape != own[name].shape:
                raise ShapeMismatch(f"{name}: shape {value.shape} != {own[name].shape}")
        for name, value in state.items():
            own[name][...] = value


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


# AFW1 weight file, little-endian:
#   magic "AFW1", version u16, then per parameter:
#   name length u16, UTF-8 name, rank u8, dims u32 * rank, values f64 * size;
#   then CRC32 (u32) of every preceding byte.


def encode_weights(params: dict[str, np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<H", WEIGHTS_VERSION)]
    for name, value in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 10 or blob[:4] != WEIGHTS_MAGIC:
        raise CorruptFile("not an AFW1 weight file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile("AFW1 checksum mismatch (truncated or corrupted file)")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != WEIGHTS_VERSION:
        raise VersionMismatch(f"AFW1 version {version}, expected {WEIGHTS_VERSION}")
    params: dict[str, np.ndarray] = {}
    pos = 6
    try:
        while pos < len(body):
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + nlen].decode("utf-8")
            if name in params:
                raise CorruptFile(f"duplicate AFW1 entry {name!r}")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape))
            if pos + 8 * size > len(body):
                raise CorruptFile(f"AFW1 entry {name!r} runs past end of file")
            params[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFile(f"malformed AFW1 registry: {exc}") from exc
    return params


def save_weights(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(encode_weights(model.parameters()))


def load_weights(path: str | Path, config: ModelConfig) -> Model:
    """Build a model for ``config`` and fill it from an AFW1 file."""
    params = decode_weights(Path(path).read_bytes())
    model = Model(config)
    model.load_parameters(params)
    return model


def save_config(config: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def gradcheck_model(
    model: Model,
    seed: int = 0,
    tolerance: float = 1e-5,
    batch: int = 2,
    h: float = 1e-5,
    corrupt: bool = False,
) -> GradCheckReport:
    """End-to-end BCE gradient of every parameter against central differences."""
    cfg = model.config
    rng = Philox(seed, "gradcheck", "model", cfg.arch)
    visual = rng.uniform_range(-1.0, 1.0, (batch, cfg.seq_len, cfg.visual_dim))
    audio = rng.uniform_range(-1.0, 1.0, (batch, cfg.seq_len, cfg.audio_dim))
    draws = rng.uniform((batch, cfg.vocab_size))
    labels = [tuple(np.flatnonzero(row < 0.5).tolist()) for row in draws]

    model.zero_grads()
    _, dprob = bce_loss(model.forward(visual, audio), labels)
    model.backward(dprob)
    analytic = {k: g.copy() for k, g in model.gradients().items()}
    if corrupt:
        for v in analytic.values():
            v *= 2.0

    def loss() -> float:
        return bce_loss(model.forward(visual, audio, cache=False), labels)[0]

    numeric = finite_difference(loss, model.parameters(), h)
    model.zero_grads()
    return compare_gradients(analytic, numeric, tolerance)
