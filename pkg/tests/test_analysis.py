import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfcrnn import analysis
from tfcrnn.analysis import (LabelMismatchError, compute_metrics, evaluate, excitation_summary, f1_delta,
                             pearson, read_confusion_csv)
from tfcrnn.audio import ArrayClipSet
from tfcrnn.model import ConfigError, TFCRNN
from tfcrnn.selftest import tiny_config


def test_constant_predictor_two_classes():
    m = compute_metrics([0, 0, 1, 1], [0, 0, 0, 0], ["a", "b"])
    np.testing.assert_allclose(m.f1, [2 / 3, 0.0])
    assert m.accuracy == 0.5
    assert m.f1_undefined.tolist() == [False, True]
    np.testing.assert_array_equal(m.confusion, [[1, 0], [1, 0]])


def test_precision_recall_by_hand():
    m = compute_metrics([0, 0, 0, 1, 1, 2], [0, 1, 1, 1, 1, 2], ["x", "y", "z"])
    np.testing.assert_allclose(m.precision, [1.0, 0.5, 1.0])
    np.testing.assert_allclose(m.recall, [1 / 3, 1.0, 1.0])
    np.testing.assert_allclose(m.f1, [0.5, 2 / 3, 1.0])
    assert m.support.tolist() == [3, 2, 1]


def test_empty_row_stays_zero():
    m = compute_metrics([0, 0], [0, 1], ["a", "b", "c"])
    assert m.confusion[2].tolist() == [0, 0, 0]
    assert m.f1_undefined[2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=80))
def test_confusion_rows_and_antisymmetry(pairs):
    y, p = np.array(pairs).T
    names = list("abcdef")
    a = compute_metrics(y, p, names)
    b = compute_metrics(y, np.roll(p, 1), names)
    rows = a.confusion.sum(axis=1)
    assert np.all((np.abs(rows - 1) <= 1e-9) | (a.support == 0))
    np.testing.assert_array_equal(f1_delta(a, b), -f1_delta(b, a))


def test_f1_delta_label_mismatch():
    a = compute_metrics([0], [0], ["a", "b"])
    with pytest.raises(LabelMismatchError):
        f1_delta(a, compute_metrics([0], [0], ["a", "c"]))


def test_oracle_stub_evaluation():
    labels = np.arange(70) % 35
    data = ArrayClipSet(np.zeros((70, 10), np.float32), labels)
    names = [f"k{i}" for i in range(35)]
    m = evaluate(lambda clips, ys: ys, data, names, batch_size=16, workers=3)
    assert m.accuracy == 1.0
    np.testing.assert_array_equal(m.confusion, np.eye(35))


def test_confusion_csv_round_trip(tmp_path):
    m = compute_metrics([0, 0, 0, 1, 2, 2, 2], [0, 1, 2, 1, 0, 0, 2], ["a", "b", "c"])
    analysis.write_confusion_csv(m.confusion, m.label_names, tmp_path / "c.csv")
    names, matrix = read_confusion_csv(tmp_path / "c.csv")
    assert names == ["a", "b", "c"]
    np.testing.assert_allclose(matrix.sum(axis=1), 1, atol=1e-9)
    np.testing.assert_array_equal(matrix, m.confusion)


def test_pearson():
    assert abs(pearson([1, 2, 3], [2, 4, 6]) - 1) < 1e-12
    assert abs(pearson([1, 2, 3], [3, 2, 1]) + 1) < 1e-12
    assert pearson([1, 1, 1], [1, 2, 3]) == 0.0
    x = np.random.default_rng(0).normal(size=(2, 50))
    assert abs(pearson(*x) - np.corrcoef(*x)[0, 1]) < 1e-12


def _trained_tiny():
    m = TFCRNN(tiny_config(), seed=0)
    m.train()
    m.forward_sequence(np.random.default_rng(0).normal(size=(6, 3, 40)), rng=np.random.default_rng(1))
    return m.eval()


def test_excitation_summary_and_report(tmp_path):
    m = _trained_tiny()
    labels = np.array([0, 1, 2, 0, 1, 2, 3, 4])
    data = ArrayClipSet(np.random.default_rng(2).normal(size=(8, 80)).astype(np.float32), labels)
    names = ["a", "b", "c", "d", "e"]
    summary = excitation_summary(m, data, names, ["a", "c"])
    assert list(summary.classes) == ["a", "c"]
    assert summary.classes["a"].clips == 2
    assert summary.classes["a"].blocks.shape == (2, 3)
    assert set(summary.correlations()) == {"a", "c"}
    with pytest.raises(LabelMismatchError):
        excitation_summary(m, data, names, ["zz"])
    with pytest.raises(ConfigError):
        excitation_summary(m.without_feedback(), data, names, ["a"])

    metrics = evaluate(m, data, names)
    other = compute_metrics(labels, np.zeros(8, int), names)
    written = analysis.emit_report(tmp_path, metrics=metrics, summary=summary, comparison=(metrics, other),
                                   confusion_classes=["a", "b"])
    files = {p.name for p in written}
    assert {"metrics.csv", "summary.csv", "confusion.csv", "f1_delta.csv", "excitations_a.csv",
            "excitation_energy_pearson.csv", "f1.svg", "confusion.svg", "f1_delta.svg",
            "confusion_pair.svg", "excitations.svg"} <= files
    for p in written:
        assert p.stat().st_size > 0
        if p.suffix == ".svg":
            assert ET.parse(p).getroot().tag.endswith("svg")
    header = (tmp_path / "excitations_a.csv").read_text().splitlines()[0]
    assert header == "step,energy,block_1,block_2"


def test_reports_are_byte_stable(tmp_path):
    m = compute_metrics([0, 1, 1], [0, 1, 0], ["a", "b"])
    analysis.emit_report(tmp_path / "1", metrics=m)
    analysis.emit_report(tmp_path / "2", metrics=m)
    for name in ("metrics.csv", "confusion.csv", "f1.svg", "confusion.svg"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes(), name
