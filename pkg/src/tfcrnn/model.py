"""TF-CRNN: a sliding raw-waveform CNN whose blocks are gated by the GRU state.

At every time step the CNN consumes one window of ``2 * step_samples``
samples. With feedback enabled, the previous hidden state is projected per
block to a vector of channel excitations in (0, 1) that scale that block's
feature maps. The CRNN ablation is the same network without those
projections.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .audio import SAMPLE_RATE, segment_batch
from .nn import (
    BatchNormState,
    GRUParams,
    ShapeError,
    Tensor,
    batchnorm1d,
    channel_scale,
    conv1d,
    dropout,
    global_maxpool,
    gru_cell,
    linear,
    maxpool1d,
    no_grad,
    relu,
    sigmoid,
)

DEFAULT_FILTERS = (64, 64, 128, 128, 256, 256, 512)
IO_MODES = ("many_to_one", "many_to_many")
# Where excitations multiply a block's feature maps: right after batch norm
# (before dropout and pooling) or after the block's pooling.
SCALE_POST_BN = "post_bn"
SCALE_POST_POOL = "post_pool"
SCALE_POINT = SCALE_POST_BN


class ConfigError(ValueError):
    pass


def num_blocks(step_samples: int) -> int:
    """Conv block count ``floor(log3(2 * step_samples) - 1)``, computed in integers."""
    if step_samples < 1:
        raise ConfigError(f"step must be positive, got {step_samples}")
    window = 2 * step_samples
    exponent = 0
    while 3 ** (exponent + 1) <= window:
        exponent += 1
    blocks = exponent - 1
    if blocks < 1:
        raise ConfigError(f"step of {step_samples} samples yields no conv blocks")
    return blocks


def step_ms_to_samples(step_ms: float, sample_rate: int = SAMPLE_RATE) -> int:
    samples = step_ms * sample_rate / 1000
    if abs(samples - round(samples)) > 1e-9:
        raise ConfigError(f"{step_ms} ms is not a whole number of samples at {sample_rate} Hz")
    return int(round(samples))


def normalize_io_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode not in IO_MODES:
        raise ConfigError(f"io_mode must be one of {IO_MODES}, got {mode!r}")
    return mode


@dataclass
class ModelConfig:
    step_ms: float = 50.0
    sample_rate: int = SAMPLE_RATE
    filters_per_block: list[int] | None = None
    hidden_dim: int = 256
    num_classes: int = 35
    feedback_enabled: bool = True
    io_mode: str = "many_to_many"
    dropout_rate: float = 0.5
    clip_samples: int | None = None

    def __post_init__(self):
        self.io_mode = normalize_io_mode(self.io_mode)
        if self.clip_samples is None:
            self.clip_samples = self.sample_rate
        blocks = self.num_blocks
        if self.filters_per_block is None:
            filters = list(DEFAULT_FILTERS[:blocks])
            filters += [DEFAULT_FILTERS[-1]] * (blocks - len(filters))
            self.filters_per_block = filters
        self.filters_per_block = [int(c) for c in self.filters_per_block]
        if len(self.filters_per_block) != blocks:
            raise ConfigError(
                f"{self.step_ms} ms steps need {blocks} blocks but "
                f"{len(self.filters_per_block)} filter counts were given")
        if self.window_samples > self.clip_samples:
            raise ConfigError("window longer than the clip")
        if self.hidden_dim < 1 or self.num_classes < 2:
            raise ConfigError("hidden_dim must be >= 1 and num_classes >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def step_samples(self) -> int:
        return step_ms_to_samples(self.step_ms, self.sample_rate)

    @property
    def window_samples(self) -> int:
        return 2 * self.step_samples

    @property
    def num_blocks(self) -> int:
        return num_blocks(self.step_samples)

    @property
    def num_steps(self) -> int:
        return (self.clip_samples - self.window_samples) // self.step_samples + 1

    def block_lengths(self) -> list[int]:
        """Feature-map length after each block for one window."""
        lengths = []
        length = -(-self.window_samples // 3)
        lengths.append(length)
        for _ in range(1, self.num_blocks):
            length //= 3
            lengths.append(length)
        return lengths

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class StepOutput:
    logits: Tensor
    hidden: Tensor
    excitations: list[Tensor] = field(default_factory=list)


@dataclass
class SequenceOutput:
    logits: list[Tensor]
    excitations: list[list[np.ndarray]]  # [step][block] -> (N, C_b)
    hidden: Tensor


@dataclass
class ExcitationTrace:
    """Excitations of one clip: ``blocks[b]`` has shape (T, C_b)."""

    blocks: list[np.ndarray]
    label: int
    energy: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.energy)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class TFCRNN:
    """Parameters, batch-norm state and forward pass of TF-CRNN or its CRNN ablation."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = False
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng([seed, 0x7FC])
        in_ch = 1
        for b, channels in enumerate(config.filters_per_block, start=1):
            fan_in = in_ch * 3
            self._add(f"block{b}.conv.weight", _kaiming_uniform(rng, (channels, in_ch, 3), fan_in, self.dtype))
            self._add(f"block{b}.conv.bias", np.zeros(channels, self.dtype))
            self._add(f"block{b}.bn.gamma", np.ones(channels, self.dtype))
            self._add(f"block{b}.bn.beta", np.zeros(channels, self.dtype))
            self.bn[f"block{b}"] = BatchNormState.fresh(channels, self.dtype)
            if config.feedback_enabled:
                self._add(f"block{b}.feedback.weight",
                          _kaiming_uniform(rng, (channels, config.hidden_dim), config.hidden_dim, self.dtype))
                self._add(f"block{b}.feedback.bias", np.zeros(channels, self.dtype))
            in_ch = channels
        h = config.hidden_dim
        bound = 1.0 / np.sqrt(h)
        self._add("gru.w_input", rng.uniform(-bound, bound, (3 * h, in_ch)).astype(self.dtype))
        self._add("gru.w_hidden", rng.uniform(-bound, bound, (3 * h, h)).astype(self.dtype))
        self._add("gru.bias", rng.uniform(-bound, bound, 3 * h).astype(self.dtype))
        self._add("head.weight", _kaiming_uniform(rng, (config.num_classes, h), h, self.dtype))
        self._add("head.bias", np.zeros(config.num_classes, self.dtype))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self) -> "TFCRNN":
        self.training = True
        return self

    def eval(self) -> "TFCRNN":
        self.training = False
        return self

    @property
    def gru(self) -> GRUParams:
        p = self.params
        return GRUParams(p["gru.w_input"], p["gru.w_hidden"], p["gru.bias"])

    def astype(self, dtype) -> "TFCRNN":
        """Copy of the model with parameters and running stats in ``dtype``."""
        clone = TFCRNN.__new__(TFCRNN)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.training = self.training
        clone.params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                        for k, v in self.params.items()}
        clone.bn = {k: BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype),
                                      s.initialized, s.momentum, s.eps)
                    for k, s in self.bn.items()}
        return clone

    def without_feedback(self) -> "TFCRNN":
        """CRNN ablation sharing this model's parameter tensors and BN state."""
        config = ModelConfig(**{**self.config.to_dict(), "feedback_enabled": False})
        clone = TFCRNN.__new__(TFCRNN)
        clone.config = config
        clone.dtype = self.dtype
        clone.training = self.training
        clone.params = {k: v for k, v in self.params.items() if ".feedback." not in k}
        clone.bn = self.bn
        return clone

    def excitations_for_block(self, h_prev: Tensor, block: int) -> Tensor:
        """Channel scales of ``block`` (1-based) from the previous hidden state."""
        if not self.config.feedback_enabled:
            raise ConfigError("model has no feedback projections")
        w = self.params[f"block{block}.feedback.weight"]
        b = self.params[f"block{block}.feedback.bias"]
        return sigmoid(linear(h_prev, w, b))

    def conv_block_forward(self, x: Tensor, block: int, scale: Tensor | None,
                           rng: np.random.Generator | None = None) -> Tensor:
        p = self.params
        stride = 3 if block == 1 else 1
        y = conv1d(x, p[f"block{block}.conv.weight"], p[f"block{block}.conv.bias"], stride=stride)
        y = relu(y)
        y = batchnorm1d(y, p[f"block{block}.bn.gamma"], p[f"block{block}.bn.beta"],
                        self.bn[f"block{block}"], self.training)
        if scale is not None and SCALE_POINT == SCALE_POST_BN:
            y = channel_scale(y, scale)
        y = dropout(y, self.config.dropout_rate, rng, self.training)
        if block > 1:
            y = maxpool1d(y)
        if scale is not None and SCALE_POINT == SCALE_POST_POOL:
            y = channel_scale(y, scale)
        return y

    def cnn_blocks(self, frame: Tensor, excitations: Sequence[Tensor] | None,
                   rng: np.random.Generator | None = None) -> Tensor:
        """Run every block on ``frame`` (N, 1, W); returns the last block's maps."""
        if frame.shape[-1] != self.config.window_samples:
            raise ShapeError(f"frame length {frame.shape[-1]} != window {self.config.window_samples}")
        y = frame
        for b in range(1, self.config.num_blocks + 1):
            scale = None if excitations is None else excitations[b - 1]
            y = self.conv_block_forward(y, b, scale, rng)
        return y

    def cnn_forward(self, frame: Tensor, excitations: Sequence[Tensor] | None,
                    rng: np.random.Generator | None = None) -> Tensor:
        return global_maxpool(self.cnn_blocks(frame, excitations, rng))

    def initial_hidden(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.config.hidden_dim), dtype=self.dtype))

    def step(self, frame: Tensor, h_prev: Tensor, rng: np.random.Generator | None = None,
             excitations_override: Sequence[Tensor] | None = None) -> StepOutput:
        if excitations_override is not None:
            excitations = list(excitations_override)
        elif self.config.feedback_enabled:
            excitations = [self.excitations_for_block(h_prev, b)
                           for b in range(1, self.config.num_blocks + 1)]
        else:
            excitations = []
        feature = self.cnn_forward(frame, excitations or None, rng)
        hidden = gru_cell(feature, h_prev, self.gru)
        logits = linear(hidden, self.params["head.weight"], self.params["head.bias"])
        return StepOutput(logits, hidden, excitations)

    def forward_sequence(self, frames: np.ndarray, rng: np.random.Generator | None = None,
                         excitations_override=None) -> SequenceOutput:
        """Unroll over ``frames`` (N, T, W) from a zero hidden state.

        ``excitations_override(t, n)`` may supply the per-block scales used at
        step ``t`` instead of the feedback projections.
        """
        frames = np.asarray(frames, dtype=self.dtype)
        if frames.ndim != 3 or frames.shape[1] < 1:
            raise ShapeError(f"expected frames of shape (N, T, W), got {frames.shape}")
        n, steps, _ = frames.shape
        h = self.initial_hidden(n)
        logits, excitations = [], []
        for t in range(steps):
            override = None if excitations_override is None else excitations_override(t, n)
            out = self.step(Tensor(frames[:, t:t + 1, :]), h, rng, override)
            h = out.hidden
            logits.append(out.logits)
            excitations.append([e.data.copy() for e in out.excitations])
        return SequenceOutput(logits, excitations, h)

    def frames_for(self, clips: np.ndarray) -> np.ndarray:
        return segment_batch(np.asarray(clips), self.config.step_samples)

    def predict_logits(self, clips: np.ndarray) -> np.ndarray:
        """Final-step logits (N, K) in eval mode."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward_sequence(self.frames_for(clips))
        finally:
            self.training = was_training
        return out.logits[-1].data

    def predict(self, clips: np.ndarray) -> np.ndarray:
        """Class ids from the last step's logits, whatever the training setup."""
        return np.argmax(self.predict_logits(clips), axis=-1)

    def trace_excitations(self, clips: np.ndarray, labels: Sequence[int]) -> list[ExcitationTrace]:
        from .audio import rms_energy_batch

        if not self.config.feedback_enabled:
            raise ConfigError("ablation model records no excitations")
        was_training = self.training
        self.eval()
        frames = self.frames_for(clips)
        try:
            with no_grad():
                out = self.forward_sequence(frames)
        finally:
            self.training = was_training
        energy = rms_energy_batch(frames)
        traces = []
        for i, label in enumerate(labels):
            blocks = [np.stack([out.excitations[t][b][i] for t in range(len(out.excitations))])
                      for b in range(self.config.num_blocks)]
            traces.append(ExcitationTrace(blocks, int(label), energy[i]))
        return traces

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All learnable tensors and BN running stats by name."""
        arrays = {name: p.data for name, p in self.params.items()}
        for block, state in self.bn.items():
            arrays[f"{block}.bn.running_mean"] = state.running_mean
            arrays[f"{block}.bn.running_var"] = state.running_var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], bn_initialized: dict[str, bool]) -> None:
        expected = {name: p.shape for name, p in self.params.items()}
        for block, state in self.bn.items():
            expected[f"{block}.bn.running_mean"] = state.running_mean.shape
            expected[f"{block}.bn.running_var"] = state.running_var.shape
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise ShapeError(f"missing tensors: {', '.join(missing)}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != tuple(shape):
                raise ShapeError(f"tensor {name} has shape {tuple(arrays[name].shape)}, "
                                 f"config requires {tuple(shape)}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=self.dtype)
        for block, state in self.bn.items():
            state.running_mean = np.array(arrays[f"{block}.bn.running_mean"], dtype=self.dtype)
            state.running_var = np.array(arrays[f"{block}.bn.running_var"], dtype=self.dtype)
            state.initialized = bool(bn_initialized.get(block, False))
