"""Synthetic audio-visual multi-label data with planted modality structure.

Classes are split into visual-only, audio-only, both, and noise classes.
Each non-noise class owns a unit-norm prototype in the feature space of
its modality (both-classes own one in each).  A video's frames are the
strength-weighted sum of its labels' prototypes plus Gaussian noise, so a
visual-only class can only be detected from the visual stream, and so on.

The AVF1 container (little-endian)::

    magic "AVF1" | version u16 | num_videos u64 | vocab u32
    | visual_dim u32 | audio_dim u32 | T u32
    per record: id u64 | label_count u32 | labels u32[label_count]
                | visual f32[T*visual_dim] | audio f32[T*audio_dim]
    CRC32 u32 of all preceding bytes
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from avfusion.errors import (
    CorruptFile,
    InvalidFraction,
    InvalidSpec,
    LabelOutOfRange,
    VersionMismatch,
)
from avfusion.metrics import LabelSet
from avfusion.rng import Philox

DATA_MAGIC = b"AVF1"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sHQIIII")

MAX_COSINE = 0.5
MAX_PROTOTYPE_ATTEMPTS = 100


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 200
    vocab_size: int = 24
    visual_dim: int = 16
    audio_dim: int = 8
    seq_len: int = 4
    labels_per_video_mean: float = 3.0
    visual_only_fraction: float = 0.375
    audio_only_fraction: float = 0.25
    both_fraction: float = 0.25
    signal_strength: float = 1.0
    noise_sigma: float = 0.5
    seed: int = 7

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_videos", "vocab_size", "visual_dim", "audio_dim", "seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {value!r}")
        fracs = (self.visual_only_fraction, self.audio_only_fraction, self.both_fraction)
        if any(not 0.0 <= f <= 1.0 for f in fracs) or sum(fracs) > 1.0 + 1e-9:
            raise InvalidSpec(f"class fractions must lie in [0, 1] and sum to <= 1, got {fracs}")
        if not self.labels_per_video_mean > 0:
            raise InvalidSpec("labels_per_video_mean must be positive")
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise InvalidSpec("noise_sigma must be finite and >= 0")
        if not math.isfinite(self.signal_strength):
            raise InvalidSpec("signal_strength must be finite")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must fit in 64 bits")

    def class_counts(self) -> tuple[int, int, int]:
        """Number of (visual-only, audio-only, both) classes; the rest are noise."""
        V = self.vocab_size
        return tuple(
            int(math.floor(f * V + 1e-9))
            for f in (self.visual_only_fraction, self.audio_only_fraction, self.both_fraction)
        )

    def class_affinity(self) -> list[str]:
        nv, na, nb = self.class_counts()
        kinds = ["visual"] * nv + ["audio"] * na + ["both"] * nb
        return kinds + ["noise"] * (self.vocab_size - len(kinds))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown data spec key(s): {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class VideoRecord:
    id: int
    labels: LabelSet
    visual: np.ndarray
    audio: np.ndarray


@dataclass
class Dataset:
    """All records of one AVF1 file, stacked for batching."""

    vocab_size: int
    visual_dim: int
    audio_dim: int
    seq_len: int
    ids: np.ndarray
    labels: list[LabelSet]
    visual: np.ndarray
    audio: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> VideoRecord:
        return VideoRecord(int(self.ids[i]), self.labels[i], self.visual[i], self.audio[i])

    def __iter__(self) -> Iterator[VideoRecord]:
        return (self[i] for i in range(len(self)))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.vocab_size,
            self.visual_dim,
            self.audio_dim,
            self.seq_len,
            self.ids[idx],
            [self.labels[i] for i in idx],
            self.visual[idx],
            self.audio[idx],
        )


def _draw_prototypes(rng: Philox, count: int, dim: int) -> np.ndarray:
    protos = np.zeros((count, dim))
    for i in range(count):
        for _ in range(MAX_PROTOTYPE_ATTEMPTS):
            v = rng.normal(dim)
            norm = float(np.sqrt(np.sum(v * v)))
            if norm == 0.0:
                continue
            v = v / norm
            if i == 0 or np.max(np.abs(protos[:i] @ v)) < MAX_COSINE:
                protos[i] = v
                break
        else:
            raise InvalidSpec(
                f"could not draw {count} prototypes in {dim} dimensions with |cos| < {MAX_COSINE}"
            )
    return protos


def class_prototypes(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class signal vectors ``[vocab, visual_dim]`` and ``[vocab, audio_dim]``.

    Rows are already scaled by the signal strength (halved for classes that
    live in both modalities); noise classes have zero rows.
    """
    spec.validate()
    kinds = spec.class_affinity()
    rng = Philox(spec.seed, "synthetic", "prototypes")
    s = spec.signal_strength
    out = []
    for modality, dim in (("visual", spec.visual_dim), ("audio", spec.audio_dim)):
        owners = [c for c, k in enumerate(kinds) if k in (modality, "both")]
        protos = _draw_prototypes(rng.child(modality), len(owners), dim)
        table = np.zeros((spec.vocab_size, dim))
        for row, c in zip(protos, owners):
            table[c] = (s / 2 if kinds[c] == "both" else s) * row
        out.append(table)
    return out[0], out[1]


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministically sample a dataset from ``spec``."""
    visual_table, audio_table = class_prototypes(spec)
    N, T, V = spec.num_videos, spec.seq_len, spec.vocab_size
    label_rng = Philox(spec.seed, "synthetic", "labels")
    labels: list[LabelSet] = []
    for _ in range(N):
        n = min(max(label_rng.poisson(spec.labels_per_video_mean), 1), V)
        labels.append(tuple(sorted(int(c) for c in label_rng.permutation(V)[:n])))

    noise = Philox(spec.seed, "synthetic", "noise")
    visual = spec.noise_sigma * noise.child("visual").normal((N, T, spec.visual_dim))
    audio = spec.noise_sigma * noise.child("audio").normal((N, T, spec.audio_dim))
    for i, ls in enumerate(labels):
        idx = list(ls)
        visual[i] += visual_table[idx].sum(axis=0)
        audio[i] += audio_table[idx].sum(axis=0)
    return Dataset(
        vocab_size=V,
        visual_dim=spec.visual_dim,
        audio_dim=spec.audio_dim,
        seq_len=T,
        ids=np.arange(N, dtype=np.uint64),
        labels=labels,
        visual=visual.astype(np.float32),
        audio=audio.astype(np.float32),
    )


def encode(dataset: Dataset) -> bytes:
    parts = [
        _HEADER.pack(
            DATA_MAGIC,
            DATA_VERSION,
            len(dataset),
            dataset.vocab_size,
            dataset.visual_dim,
            dataset.audio_dim,
            dataset.seq_len,
        )
    ]
    for i in range(len(dataset)):
        ls = dataset.labels[i]
        parts.append(struct.pack(f"<QI{len(ls)}I", int(dataset.ids[i]), len(ls), *ls))
        parts.append(np.ascontiguousarray(dataset.visual[i], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(dataset.audio[i], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size + 4 or blob[:4] != DATA_MAGIC:
        raise CorruptFile("not an AVF1 dataset file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile("AVF1 checksum mismatch (truncated or corrupted file)")
    _, version, n, vocab, dv, da, T = _HEADER.unpack_from(body, 0)
    if version != DATA_VERSION:
        raise VersionMismatch(f"AVF1 version {version}, expected {DATA_VERSION}")
    if min(vocab, dv, da, T) < 1:
        raise CorruptFile("AVF1 header has a zero dimension")
    ids = np.zeros(n, dtype=np.uint64)
    visual = np.zeros((n, T, dv), dtype=np.float32)
    audio = np.zeros((n, T, da), dtype=np.float32)
    labels: list[LabelSet] = []
    pos = _HEADER.size
    try:
        for i in range(n):
            vid, count = struct.unpack_from("<QI", body, pos)
            pos += 12
            ls = struct.unpack_from(f"<{count}I", body, pos)
            pos += 4 * count
            if any(b <= a for a, b in zip(ls, ls[1:])):
                raise CorruptFile(f"record {i}: labels not strictly increasing")
            if ls and ls[-1] >= vocab:
                raise LabelOutOfRange(f"record {i}: label {ls[-1]} >= vocab {vocab}")
            ids[i] = vid
            labels.append(tuple(ls))
            visual[i] = np.frombuffer(body, "<f4", T * dv, pos).reshape(T, dv)
            pos += 4 * T * dv
            audio[i] = np.frombuffer(body, "<f4", T * da, pos).reshape(T, da)
            pos += 4 * T * da
    except (struct.error, ValueError) as exc:
        if isinstance(exc, LabelOutOfRange):
            raise
        raise CorruptFile(f"malformed AVF1 record: {exc}") from exc
    if pos != len(body):
        raise CorruptFile("trailing bytes after last AVF1 record")
    return Dataset(vocab, dv, da, T, ids, labels, visual, audio)


def save(dataset: Dataset, path: str | Path) -> int:
    """Write ``dataset`` as AVF1 and return the stored CRC32 trailer."""
    blob = encode(dataset)
    Path(path).write_bytes(blob)
    return struct.unpack("<I", blob[-4:])[0]


def load(path: str | Path) -> Dataset:
    return decode(Path(path).read_bytes())


def generate_file(spec: SyntheticSpec, path: str | Path) -> Dataset:
    dataset = generate(spec)
    save(dataset, path)
    return dataset


def batches(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray, list[LabelSet]]]:
    """Yield ``(visual, audio, labels)`` float64 batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = Philox(shuffle_seed, "batches", str(epoch)).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield (
            dataset.visual[idx].astype(np.float64),
            dataset.audio[idx].astype(np.float64),
            [dataset.labels[i] for i in idx],
        )


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint partition; each side keeps the original record order."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidFraction(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise InvalidFraction(f"train_fraction {train_fraction} leaves an empty split of {n} videos")
    perm = Philox(seed, "split").permutation(n)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))
