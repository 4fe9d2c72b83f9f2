"""Dice scoring, bound-term arithmetic, and report round trips."""

import math

import numpy as np
import pytest

from fedseg.evaluation import (MetricsReport, BoundTerm, complexity_term, dice,
                               emit_report, export_embeddings, read_report)
from fedseg.sliced import EmbeddingBatch
from fedseg.autodiff import Tensor


def test_dice_identical_masks():
    m = np.array([[1, 1, 0], [0, 1, 0]])
    assert dice(m, m) == 1.0


def test_dice_disjoint_masks():
    a = np.array([1, 1, 0, 0])
    b = np.array([0, 0, 1, 1])
    assert dice(a, b) == 0.0


def test_dice_hand_count():
    pred = np.zeros(12, dtype=int)
    truth = np.zeros(12, dtype=int)
    pred[:4] = 1          # |X| = 4
    truth[1:7] = 1        # |Y| = 6, intersection {1,2,3} = 3
    assert dice(pred, truth) == pytest.approx(0.6, abs=1e-12)


def test_dice_empty_empty_is_one():
    assert dice(np.zeros(5, dtype=int), np.zeros(5, dtype=int)) == 1.0


def test_dice_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.integers(0, 2, size=(5, 5))
        b = rng.integers(0, 2, size=(5, 5))
        assert dice(a, b) == dice(b, a)


def test_dice_against_exhaustive_iteration():
    rng = np.random.default_rng(1)
    for _ in range(25):
        a = rng.integers(0, 2, size=(5, 5))
        b = rng.integers(0, 2, size=(5, 5))
        inter = sum(1 for i in range(5) for j in range(5) if a[i, j] == 1 and b[i, j] == 1)
        ca = sum(1 for i in range(5) for j in range(5) if a[i, j] == 1)
        cb = sum(1 for i in range(5) for j in range(5) if b[i, j] == 1)
        expected = 1.0 if ca + cb == 0 else 2 * inter / (ca + cb)
        assert dice(a, b) == pytest.approx(expected, abs=1e-12)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))


def test_complexity_term_xi_one_is_zero():
    assert complexity_term(10, 10, xi=1.0, zeta=1.0) == 0.0


def test_complexity_term_hand_value():
    got = complexity_term(100, 100, xi=math.exp(-1), zeta=1.0)
    assert got == pytest.approx(0.2 * math.sqrt(2.0), abs=1e-12)
    assert got == pytest.approx(0.2828, abs=5e-5)


def test_complexity_term_range_validation():
    with pytest.raises(ValueError, match="xi"):
        complexity_term(10, 10, xi=0.0, zeta=1.0)
    with pytest.raises(ValueError, match="zeta"):
        complexity_term(10, 10, xi=0.5, zeta=1.5)
    with pytest.raises(ValueError, match="counts"):
        complexity_term(0, 10, xi=0.5, zeta=1.0)


def _sample_report(oracle: bool) -> MetricsReport:
    report = MetricsReport(seed=3, oracle_mode=oracle, aggregation="fmuda")
    report.settings = {"plan.gamma": 2.0, "net.depth": 2}
    report.source_ids = ["site_a", "site_b"]
    report.raw_counts = [30, 10]
    report.weights = [0.75, 0.25]
    report.lambda_conf = 0.85
    report.bound = [
        BoundTerm("site_a", 0.123456789012345, 0.01, 0.9,
                  joint_ce=0.2 if oracle else None),
        BoundTerm("site_b", 0.5, 0.07, 0.9, joint_ce=0.4 if oracle else None),
    ]
    if oracle:
        report.per_model_dice = {"site_a": (0.4, 0.8), "site_b": (0.1, 0.3)}
        report.ensemble_dice = {"fmuda": 0.81, "av": 0.7, "pv": 0.6, "suda": 0.8}
        report.bound_lhs = 0.1
        report.bound_rhs = 1.9
    report.timestamp = "2026-01-01T00:00:00"
    return report


def test_report_round_trip_full_precision(tmp_path):
    report = _sample_report(oracle=True)
    path = tmp_path / "report.txt"
    emit_report(report, path)
    back = read_report(path)
    assert back["header"]["seed"] == "3"
    assert float(back["header"]["bound_rhs"]) == 1.9
    weights_rows = back["tables"]["weights"][1:]
    assert weights_rows[0] == ["site_a", "30", "0.75"]
    bound_rows = back["tables"]["bound_terms"][1:]
    assert float(bound_rows[0][1]) == 0.123456789012345


def test_report_non_oracle_has_literal_marker(tmp_path):
    path = tmp_path / "report.txt"
    emit_report(_sample_report(oracle=False), path)
    text = path.read_text()
    assert "e_C: not computable" in text
    assert "not computable" in text.split("[bound_terms]")[1]


def test_report_identical_modulo_timestamp(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    ra = _sample_report(oracle=True)
    rb = _sample_report(oracle=True)
    ra.timestamp = "2026-01-01T00:00:00"
    rb.timestamp = "2027-05-05T05:05:05"
    emit_report(ra, a)
    emit_report(rb, b)

    def strip(path):
        return [line for line in path.read_text().splitlines()
                if not line.startswith("timestamp:")]

    assert strip(a) == strip(b)
    assert a.read_text() != b.read_text()


def test_export_embeddings(tmp_path):
    pts = EmbeddingBatch(Tensor([[1.0, 2.0], [3.0, 4.0]]), domain_tag="src")
    tgt = EmbeddingBatch(Tensor([[5.0, 6.0]]), domain_tag="tgt")
    path = tmp_path / "emb.csv"
    export_embeddings([pts, tgt], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "domain_tag,dim_0,dim_1"
    assert lines[1] == "src,1.0,2.0"
    assert lines[3] == "tgt,5.0,6.0"
