"""Synthetic stand-ins for Speech Commands, used by tests and the self-test.

Each keyword becomes a short harmonic "utterance" with its own pitch and
syllable rhythm, placed at a random onset over low-level noise. The tree
written by :func:`make_mini_dataset` follows the official layout, list
files included.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import BACKGROUND_DIR, SAMPLE_RATE, TESTING_LIST, VALIDATION_LIST, encode_wav


def keyword_clip(label: int, rng: np.random.Generator, length: int = SAMPLE_RATE,
                 sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(length) / sample_rate
    pitch = 180.0 * (1.45 ** (label % 9)) * rng.uniform(0.95, 1.05)
    syllables = 1 + label % 3
    duration = rng.uniform(0.35, 0.55)
    onset = rng.uniform(0.05, 0.95 - duration)
    phase = np.clip((t - onset) / duration, 0.0, 1.0)
    active = (t >= onset) & (t <= onset + duration)
    envelope = np.where(active, np.sin(np.pi * phase) * np.abs(np.sin(np.pi * syllables * phase)), 0.0)
    glide = 1.0 + (0.3 if label % 2 else -0.2) * phase
    signal = sum(np.sin(2 * np.pi * pitch * k * glide * t) / k for k in (1, 2, 3))
    clip = rng.uniform(0.3, 0.7) * envelope * signal / 1.8
    clip += rng.normal(0.0, 0.005, size=length)
    return np.clip(clip, -1.0, 1.0)


def make_clips(labels: Sequence[int], seed: int = 0, length: int = SAMPLE_RATE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([keyword_clip(int(y), rng, length) for y in labels]).astype(np.float32)


def make_mini_dataset(root: str | os.PathLike, keywords: Sequence[str] = ("no", "yes"),
                      train_per_class: int = 20, validation_per_class: int = 4,
                      test_per_class: int = 4, seed: int = 0, short_clips: bool = False) -> Path:
    """Write a miniature Speech Commands tree and return its root.

    With ``short_clips`` every fifth file is shorter than one second, as in
    the real corpus.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    validation, testing = [], []
    for label, keyword in enumerate(sorted(keywords)):
        directory = root / keyword
        directory.mkdir(exist_ok=True)
        total = train_per_class + validation_per_class + test_per_class
        for i in range(total):
            length = SAMPLE_RATE
            if short_clips and i % 5 == 4:
                length = int(rng.integers(SAMPLE_RATE // 2, SAMPLE_RATE))
            clip = keyword_clip(label, rng, length)
            name = f"{i:04x}{label:02x}_nohash_0.wav"
            (directory / name).write_bytes(encode_wav(clip))
            rel = f"{keyword}/{name}"
            if i >= train_per_class + validation_per_class:
                testing.append(rel)
            elif i >= train_per_class:
                validation.append(rel)
    noise = root / BACKGROUND_DIR
    noise.mkdir(exist_ok=True)
    (noise / "white_noise.wav").write_bytes(encode_wav(rng.normal(0, 0.05, SAMPLE_RATE)))
    (root / VALIDATION_LIST).write_text("\n".join(validation) + "\n")
    (root / TESTING_LIST).write_text("\n".join(testing) + "\n")
    return root
