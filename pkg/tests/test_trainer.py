import math

import numpy as np
import pytest

from tfcrnn import checkpoint as ck
from tfcrnn.audio import ArrayClipSet
from tfcrnn.model import ModelConfig, TFCRNN
from tfcrnn.nn import Tensor
from tfcrnn.selftest import tiny_config
from tfcrnn.trainer import (Checkpoint, ScheduleState, TrainConfig, TrainingDivergedError, evaluate_loss,
                            fit, loss_many_to_many, loss_many_to_one, schedule_update)


def run_schedule(losses, **kw):
    cfg = TrainConfig(**kw)
    state = ScheduleState(current_lr=cfg.lr0)
    lrs = []
    for epoch, loss in enumerate(losses, 1):
        lrs.append(state.current_lr)
        state, stop = schedule_update(state, loss, cfg)
        if stop:
            return lrs, epoch, state
    return lrs, None, state


def test_schedule_three_plateaus():
    losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8]
    lrs, stopped, state = run_schedule(losses)
    assert sorted(set(lrs), reverse=True) == [0.1, 0.02, 0.004]
    assert lrs[:5] == [0.1] * 5
    assert lrs[5:9] == [0.02] * 4
    assert lrs[9:] == [0.004] * 3
    assert stopped == 12 and state.plateaus_hit == 3
    assert state.current_lr == 0.1 / 5 ** 3


def test_schedule_constant_loss_single_plateau():
    _, stopped, _ = run_schedule([0.7] * 10, max_plateaus=1)
    assert stopped == 4


def test_schedule_min_delta_and_divergence():
    _, stopped, _ = run_schedule([1.0, 1.0 - 5e-7, 1.0 - 9e-7, 1.0 - 9.5e-7], max_plateaus=1)
    assert stopped == 4
    lrs, stopped, _ = run_schedule([1.0, 0.99, 0.98, 0.97, 0.96], max_plateaus=1)
    assert stopped is None and lrs == [0.1] * 5
    with pytest.raises(TrainingDivergedError):
        schedule_update(ScheduleState(), float("nan"), TrainConfig())


def test_schedule_exact_powers():
    lrs, _, _ = run_schedule([1.0] + [1.0] * 30, max_plateaus=6)
    assert sorted(set(lrs), reverse=True) == [0.1 / 5 ** k for k in range(6)]


def test_loss_identities():
    logits = Tensor(np.random.default_rng(0).normal(size=(3, 35)))
    labels = np.array([1, 2, 3])
    assert loss_many_to_many([logits], labels).item() == loss_many_to_one([logits], labels).item()
    uniform = [Tensor(np.zeros((2, 35)))] * 19
    assert abs(loss_many_to_many(uniform, [0, 7]).item() - math.log(35)) < 1e-12


def test_many_to_many_averages_steps():
    a = Tensor(np.array([[2.0, 0.0]]))
    b = Tensor(np.array([[0.0, 2.0]]))
    want = (math.log(1 + math.exp(-2)) + math.log(1 + math.exp(2))) / 2
    assert abs(loss_many_to_many([a, b], [0]).item() - want) < 1e-12
    assert abs(loss_many_to_one([a, b], [0]).item() - math.log(1 + math.exp(2))) < 1e-12


def tiny_data(n=30, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 5
    clips = rng.normal(0, 0.1, size=(n, 80)) + np.sin(np.arange(80) * (labels[:, None] + 1) / 4)
    return ArrayClipSet(clips.astype(np.float32), labels)


def tiny_fit(**kw):
    return fit(tiny_config(), TrainConfig(batch_size=7, max_epochs=6, **kw), tiny_data(), tiny_data(10, 1),
               label_names=list("abcde"))


def test_fit_is_deterministic_and_best_reloads():
    a, b = tiny_fit(seed=2), tiny_fit(seed=2)
    assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]
    assert len(a.history) == 6
    c = tiny_fit(seed=3)
    assert [r.train_loss for r in c.history] != [r.train_loss for r in a.history]
    best = min(a.history, key=lambda r: r.val_loss)
    assert a.epoch == best.epoch
    assert abs(evaluate_loss(a.build_model(), tiny_data(10, 1), "many_to_many") - best.val_loss) < 1e-6


def test_checkpoint_round_trip(tmp_path):
    ckpt = tiny_fit(seed=0)
    path = tmp_path / "m.tfc"
    ck.save_checkpoint(ckpt, path)
    loaded = ck.load_checkpoint(path)
    for name, arr in ckpt.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], arr)
    assert set(loaded.velocities) == set(ckpt.velocities)
    assert loaded.history == ckpt.history and loaded.label_names == list("abcde")
    assert loaded.model_config == ckpt.model_config and loaded.schedule == ckpt.schedule
    ck.save_checkpoint(loaded, tmp_path / "again.tfc")
    assert (tmp_path / "again.tfc").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    m = TFCRNN(tiny_config(), seed=0)
    data = ck.to_bytes(Checkpoint.capture(m, TrainConfig()))
    flipped = bytearray(data)
    flipped[-20] ^= 0xFF
    with pytest.raises(ck.ChecksumError):
        ck.from_bytes(bytes(flipped))
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.from_bytes(data[:-100])
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.from_bytes(data[:5])
    with pytest.raises(ck.VersionMismatchError):
        ck.from_bytes(b"TFCRNN2\n" + data[8:])
    with pytest.raises(ck.VersionMismatchError):
        ck.from_bytes(data.replace(b'"format_version":1', b'"format_version":7'))
    with pytest.raises(ck.CheckpointError):
        ck.from_bytes(b"garbage" * 10)


def test_checkpoint_shape_mismatch():
    m = TFCRNN(tiny_config(), seed=0)
    ckpt = Checkpoint.capture(m, TrainConfig())
    ckpt.model_config = tiny_config(hidden_dim=9)
    with pytest.raises(ck.CheckpointShapeError) as info:
        ck.from_bytes(ck.to_bytes(ckpt))
    assert info.value.expected != info.value.found


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_raises():
    cfg = tiny_config(dropout_rate=0.0)
    model = TFCRNN(cfg, seed=0)
    model.params["head.weight"].data[:] = 1e30
    with pytest.raises((TrainingDivergedError, FloatingPointError)):
        fit(cfg, TrainConfig(max_epochs=1), tiny_data(), tiny_data(), model=model)


def test_default_train_config():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr0, cfg.momentum, cfg.decay_factor, cfg.plateau_patience,
            cfg.max_plateaus) == (23, 0.1, 0.9, 5.0, 3, 3)
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=1.0)
    assert ModelConfig().dropout_rate == 0.5
