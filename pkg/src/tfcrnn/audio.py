"""WAV decoding, Speech Commands manifests, and window segmentation."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 16000
NUM_KEYWORDS = 35
BACKGROUND_DIR = "_background_noise_"
VALIDATION_LIST = "validation_list.txt"
TESTING_LIST = "testing_list.txt"
MANIFEST_NAME = "manifest.tsv"


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedHeaderError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class TruncatedDataError(WavError):
    pass


class ManifestError(ValueError):
    pass


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: int = -1
    source_path: str = ""

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class DatasetSplits:
    train: list[tuple[str, int]]
    validation: list[tuple[str, int]]
    test: list[tuple[str, int]]
    label_names: list[str]
    root: str = ""

    def split(self, name: str) -> list[tuple[str, int]]:
        if name not in ("train", "validation", "test"):
            raise ManifestError(f"unknown split {name!r}")
        return getattr(self, name)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, W)
    step_samples: int
    clip_label: int = -1

    @property
    def num_steps(self) -> int:
        return self.frames.shape[0]

    @property
    def window(self) -> int:
        return self.frames.shape[1]


def _chunks(data: bytes, start: int):
    pos = start
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        yield chunk_id, pos + 8, size
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, label: int = -1, source_path: str = "") -> AudioClip:
    """Decode a mono 16-bit PCM RIFF/WAVE byte string to samples in [-1, 1)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError("not a RIFF/WAVE container")
    fmt = None
    for chunk_id, offset, size in _chunks(data, 12):
        if chunk_id == b"fmt ":
            if size < 16 or offset + 16 > len(data):
                raise MalformedHeaderError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", data, offset)
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedHeaderError("data chunk precedes fmt chunk")
            audio_format, channels, rate, _, block_align, bits = fmt
            if audio_format != 1 or bits != 16:
                raise UnsupportedEncodingError(f"format tag {audio_format} with {bits}-bit samples")
            if channels != 1:
                raise UnsupportedEncodingError(f"{channels} channels; only mono is supported")
            if rate <= 0 or block_align != 2:
                raise MalformedHeaderError("inconsistent rate or block alignment")
            if offset + size > len(data) or size % 2:
                raise TruncatedDataError(f"data chunk declares {size} bytes, "
                                         f"{len(data) - offset} present")
            ints = np.frombuffer(data, dtype="<i2", count=size // 2, offset=offset)
            samples = ints.astype(np.float32) / np.float32(32768)
            return AudioClip(samples, rate, label, source_path)
    if fmt is None:
        raise MalformedHeaderError("missing fmt chunk")
    raise MalformedHeaderError("missing data chunk")


def encode_wav(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    """Quantize samples in [-1, 1] to mono PCM16 and wrap them in a WAV container."""
    ints = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768), -32768, 32767)
    payload = ints.astype("<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                         1, 1, sample_rate, sample_rate * 2, 2, 16, b"data", len(payload))
    return header + payload


def read_clip(path: str | os.PathLike, label: int = -1) -> AudioClip:
    with open(path, "rb") as fh:
        clip = decode_wav(fh.read(), label, str(path))
    if clip.sample_rate != SAMPLE_RATE:
        raise UnsupportedEncodingError(f"{path}: {clip.sample_rate} Hz, expected {SAMPLE_RATE} Hz")
    return clip


def pad_or_trim(clip: AudioClip, target_len: int = SAMPLE_RATE) -> AudioClip:
    if target_len <= 0:
        raise ValueError("target length must be positive")
    n = len(clip.samples)
    if n == target_len:
        return clip
    if n > target_len:
        samples = clip.samples[:target_len]
    else:
        samples = np.concatenate([clip.samples, np.zeros(target_len - n, dtype=clip.samples.dtype)])
    return replace(clip, samples=samples)


def num_frames(length: int, step_samples: int) -> int:
    return (length - 2 * step_samples) // step_samples + 1


def segment(clip: AudioClip, step_samples: int) -> FrameSequence:
    """Slice a clip into windows of ``2 * step_samples`` with hop ``step_samples``."""
    frames = segment_batch(clip.samples[None, :], step_samples)[0]
    return FrameSequence(frames, step_samples, clip.label)


def segment_batch(clips: np.ndarray, step_samples: int) -> np.ndarray:
    """(N, L) -> (N, T, 2 * step_samples); trailing partial windows are dropped."""
    if step_samples < 1:
        raise SegmentationError("step must be positive")
    length = clips.shape[-1]
    window = 2 * step_samples
    if window > length:
        raise SegmentationError(f"window of {window} samples exceeds clip length {length}")
    views = sliding_window_view(clips, window, axis=-1)[..., ::step_samples, :]
    return np.ascontiguousarray(views)


def rms_energy(frames: FrameSequence | np.ndarray) -> np.ndarray:
    data = frames.frames if isinstance(frames, FrameSequence) else np.asarray(frames)
    if data.size == 0:
        raise ValueError("no frames")
    return rms_energy_batch(data)


def rms_energy_batch(frames: np.ndarray) -> np.ndarray:
    """Root-mean-square of every window over its last axis."""
    sq = np.asarray(frames, dtype=np.float64) ** 2
    return np.sqrt(sq.mean(axis=-1))


def _read_list(path: Path) -> list[str]:
    if not path.is_file():
        raise ManifestError(f"missing list file {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_manifest(root: str | os.PathLike, expected_classes: int | None = NUM_KEYWORDS) -> DatasetSplits:
    """Split a Speech Commands tree by its official validation/testing lists.

    Labels are assigned in lexicographic keyword order. ``expected_classes``
    of ``None`` accepts any number of keyword directories.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"data root {root} is not a directory")
    validation = set(_read_list(root / VALIDATION_LIST))
    testing = set(_read_list(root / TESTING_LIST))
    overlap = validation & testing
    if overlap:
        raise ManifestError(f"{len(overlap)} files appear in both list files, e.g. {sorted(overlap)[0]}")
    keywords = sorted(d.name for d in root.iterdir()
                      if d.is_dir() and d.name != BACKGROUND_DIR and not d.name.startswith("."))
    if expected_classes is not None and len(keywords) != expected_classes:
        raise ManifestError(f"found {len(keywords)} keyword directories, expected {expected_classes}")
    if not keywords:
        raise ManifestError("no keyword directories")
    splits = DatasetSplits([], [], [], keywords, str(root))
    for label, keyword in enumerate(keywords):
        for wav in sorted((root / keyword).glob("*.wav")):
            rel = f"{keyword}/{wav.name}"
            if rel in testing:
                splits.test.append((rel, label))
            elif rel in validation:
                splits.validation.append((rel, label))
            else:
                splits.train.append((rel, label))
    return splits


def write_manifest(splits: DatasetSplits, path: str | os.PathLike) -> None:
    """One ``relative/path<TAB>label_id<TAB>split`` record per line."""
    lines = [f"# labels\t{','.join(splits.label_names)}"]
    for name in ("train", "validation", "test"):
        lines += [f"{rel}\t{label}\t{name}" for rel, label in splits.split(name)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | os.PathLike, root: str | os.PathLike | None = None) -> DatasetSplits:
    path = Path(path)
    splits = DatasetSplits([], [], [], [], str(root if root is not None else path.parent))
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("# labels\t"):
            splits.label_names = line.split("\t", 1)[1].split(",")
            continue
        if not line.strip():
            continue
        rel, label, split = line.split("\t")
        splits.split(split).append((rel, int(label)))
    if not splits.label_names:
        raise ManifestError(f"{path} has no label header")
    return splits


@dataclass
class ClipSet:
    """Lazily decoded clips of one split, normalized to a fixed length."""

    root: str
    items: list[tuple[str, int]]
    clip_samples: int = SAMPLE_RATE
    _cache: dict = field(default_factory=dict, repr=False)
    cache: bool = True

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def load(self, indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
        batch, labels = [], []
        for i in indices:
            rel, label = self.items[i]
            samples = self._cache.get(rel)
            if samples is None:
                clip = pad_or_trim(read_clip(Path(self.root) / rel, label), self.clip_samples)
                samples = clip.samples
                if self.cache:
                    self._cache[rel] = samples
            batch.append(samples)
            labels.append(label)
        return np.stack(batch).astype(np.float32), np.array(labels, dtype=np.int64)


@dataclass
class ArrayClipSet:
    """In-memory clips (N, L) with labels; same interface as :class:`ClipSet`."""

    clips: np.ndarray
    label_array: np.ndarray

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self.label_array, dtype=np.int64)

    def load(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(list(indices), dtype=np.int64)
        return np.asarray(self.clips[idx], dtype=np.float32), self.labels[idx]
