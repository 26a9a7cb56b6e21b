"""Gating acceptance criteria; each test prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from tfcrnn import selftest
from tfcrnn.analysis import compute_metrics, evaluate, f1_delta
from tfcrnn.audio import ArrayClipSet
from tfcrnn.cli import main
from tfcrnn.model import num_blocks
from tfcrnn.synthetic import make_mini_dataset
from tfcrnn.trainer import ScheduleState, TrainConfig, schedule_update


@pytest.fixture
def report(capsys):
    def emit(name, passed, detail):
        with capsys.disabled():
            print(f"\n[acceptance] {'PASS' if passed else 'FAIL'}  {name}: {detail}")
        assert passed, detail
    return emit


def test_gradient_suite(report):
    start = time.perf_counter()
    results = selftest.gradient_suite(seeds=20) + [selftest.end_to_end_gradient(seeds=20)]
    seconds = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    worst = max(float(r.detail.split()[3]) for r in results)
    report("gradient suite", not failed and seconds < 60,
           f"{len(results)} checks x 20 seeds, worst rel err {worst:.1e}, {seconds:.1f}s, failed {failed}")


def test_ablation_equivalence(report):
    r = selftest.ablation_equivalence(n_inputs=100)
    report("ablation equivalence", r.passed, r.detail)


def test_block_count(report):
    got = [num_blocks(s) for s in (800, 1600, 4000)]
    report("block count", got == [5, 6, 7], f"800/1600/4000 samples -> {got}")


def test_segmentation(report):
    r = selftest.segmentation_properties(n_clips=1000)
    report("segmentation", r.passed, r.detail)


def test_loss_identities(report):
    r = selftest.loss_identities()
    report("loss identities", r.passed, r.detail)


def test_overfit_sanity(report):
    r = selftest.overfit_sanity(max_epochs=200, time_limit=600)
    report("overfit sanity", r.passed, f"{r.detail}, {r.seconds:.0f}s")


def test_schedule_state_machine(report):
    config = TrainConfig()
    state = ScheduleState(current_lr=config.lr0)
    trace = [2.0, 1.5, 1.6, 1.6, 1.7, 1.2, 1.3, 1.3, 1.3, 1.3, 1.3, 1.3, 1.3, 1.3]
    lrs, stop_epoch = [], None
    for epoch, loss in enumerate(trace, 1):
        if not lrs or lrs[-1] != state.current_lr:
            lrs.append(state.current_lr)
        state, stop = schedule_update(state, loss, config)
        if stop:
            stop_epoch = epoch
            break
    ok = lrs == [0.1, 0.1 / 5, 0.1 / 5 ** 2] and stop_epoch == 12 and state.plateaus_hit == 3
    report("schedule", ok, f"lr sequence {lrs}, stop at epoch {stop_epoch} on plateau {state.plateaus_hit}")


def test_determinism(report, tmp_path):
    root = make_mini_dataset(tmp_path / "sc", ("no", "yes"), train_per_class=6, validation_per_class=2,
                             test_per_class=2, seed=4)
    args = ["--data-root", str(root), "--filters", "4,4,8,8,8", "--hidden-dim", "8", "--max-epochs", "3",
            "--seed", "7", "--allow-subset", "--no-figures"]
    codes = [main(["train", "--out", str(tmp_path / run), *args]) for run in ("a", "b")]
    a = (tmp_path / "a" / "train_log.csv").read_bytes()
    b = (tmp_path / "b" / "train_log.csv").read_bytes()
    epochs = a.count(b"\n") - 1
    report("determinism", codes == [0, 0] and a == b and epochs == 3,
           f"two seeded runs, {epochs} epochs, CSVs identical: {a == b}")


def test_metrics(report):
    rng = np.random.default_rng(0)
    names = [f"k{i}" for i in range(35)]
    y = rng.integers(0, 35, 2000)
    a = compute_metrics(y, np.where(rng.random(2000) < 0.7, y, rng.integers(0, 35, 2000)), names)
    b = compute_metrics(y, rng.integers(0, 35, 2000), names)
    rows = float(np.max(np.abs(a.confusion.sum(axis=1) - 1)))
    anti = bool(np.array_equal(f1_delta(a, b), -f1_delta(b, a)))
    stub = evaluate(lambda clips, labels: labels, ArrayClipSet(np.zeros((70, 4), np.float32), np.arange(70) % 35),
                    names)
    ok = rows <= 1e-9 and anti and stub.accuracy == 1.0 and np.array_equal(stub.confusion, np.eye(35))
    report("metrics", ok, f"row-sum err {rows:.1e}, antisymmetric {anti}, stub accuracy {stub.accuracy}")


def test_uniform_loss_value(report):
    from tfcrnn.nn import softmax_cross_entropy
    loss, _ = softmax_cross_entropy(np.zeros(35), 0)
    report("uniform loss", abs(loss - 3.5553) < 1e-4, f"{loss:.6f} vs ln 35 = {math.log(35):.6f}")
