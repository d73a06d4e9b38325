"""Reconstruction quality measures and report serialization."""

import csv
import json

import numpy as np
import pytest

import oracles
from curvmm import metrics
from curvmm.datagen import InverseProblemInstance
from curvmm.exceptions import InvalidInputError, ShapeError


def _patchy(s=8, t=5, peak_row=2, peak_col=1):
    x = np.zeros((s, t))
    x[peak_row, peak_col] = 1.0
    x[peak_row, (peak_col + 1) % t] = 0.4
    x[(peak_row + 1) % s, peak_col] = 0.5
    return x


# ---------------------------------------------------------------------------
# scalar measures


def test_aggregate_amplitude_sums_absolute_rows():
    x = np.array([[1.0, -2.0], [0.0, 3.0]])
    assert np.array_equal(metrics.aggregate_amplitude(x), [3.0, 3.0])


def test_localization_exact_match_scores_zero():
    x = _patchy()
    le, degenerate = metrics.localization_error(x, x.copy())
    assert le == 0.0
    assert degenerate is False


def test_localization_ring_neighbor_scores_one():
    x = _patchy(peak_row=2)
    est = np.roll(x, 1, axis=0)
    le, _ = metrics.localization_error(x, est)
    assert le == 1.0
    wrapped = np.roll(x, -3, axis=0)  # row 2 -> row 7 on an 8-ring
    le_wrap, _ = metrics.localization_error(x, wrapped)
    assert le_wrap == 3.0


def test_localization_zero_estimate_is_degenerate_max():
    x = _patchy(s=8)
    le, degenerate = metrics.localization_error(x, np.zeros_like(x))
    assert le == 4.0
    assert degenerate is True


def test_localization_grid_geometry():
    x = np.zeros((9, 2))
    x[0, 0] = 1.0
    est = np.zeros((9, 2))
    est[8, 0] = 1.0
    le, _ = metrics.localization_error(x, est, geometry="grid")
    assert le == 4.0


def test_localization_rejects_zero_truth():
    with pytest.raises(InvalidInputError):
        metrics.localization_error(np.zeros((4, 2)), np.ones((4, 2)))


def test_auc_perfect_and_inverted():
    x = _patchy()
    assert metrics.auc_extent(x, x.copy()) == 1.0
    support = metrics.aggregate_amplitude(x) > 0
    inverted = np.where(support[:, None], 0.0, 1.0) * np.ones((1, x.shape[1]))
    assert metrics.auc_extent(x, inverted) == 0.0


def test_auc_all_ties_is_half():
    x = _patchy()
    assert metrics.auc_extent(x, np.ones_like(x)) == 0.5


def test_auc_degenerate_support_is_none():
    full = np.ones((4, 3))
    assert metrics.auc_extent(full, full) is None
    empty = np.zeros((4, 3))
    assert metrics.auc_extent(empty, full) is None


def test_auc_matches_rank_sum_oracle():
    rng = np.random.default_rng(8)
    for _ in range(200):
        s = int(rng.integers(4, 12))
        labels = np.zeros(s, dtype=bool)
        labels[rng.choice(s, size=int(rng.integers(1, s)), replace=False)] = True
        if labels.all():
            labels[0] = False
        scores = np.round(rng.standard_normal(s), 1)  # rounding forces ties
        x_true = labels.astype(float)[:, None]
        x_est = scores[:, None]
        expected = oracles.pairwise_auc(np.abs(scores), labels)
        assert metrics.auc_extent(x_true, x_est) == pytest.approx(
            expected, abs=1e-12
        )


def test_auc_uninformative_scores_near_half():
    # Independent scores carry no support information, so the expected
    # pairwise win rate is one half.
    rng = np.random.default_rng(123)
    vals = []
    for _ in range(2000):
        labels = np.zeros(10, dtype=bool)
        labels[rng.choice(10, size=4, replace=False)] = True
        x_true = labels.astype(float)[:, None]
        x_est = rng.standard_normal((10, 1))
        vals.append(metrics.auc_extent(x_true, x_est))
    assert abs(float(np.mean(vals)) - 0.5) < 0.02


def test_nmse_exact_and_zero_estimate():
    x = _patchy()
    assert metrics.nmse(x, x.copy()) == 0.0
    assert metrics.nmse(x, np.zeros_like(x)) == 1.0


def test_nmse_hand_value():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    est = np.array([[0.5, 0.0], [0.0, 1.0]])
    assert metrics.nmse(x, est) == pytest.approx(0.125, rel=1e-15)


def test_nmse_rejects_zero_truth():
    with pytest.raises(InvalidInputError):
        metrics.nmse(np.zeros((3, 2)), np.ones((3, 2)))


def test_psnr_caps_at_exact_match():
    x = _patchy()
    assert metrics.psnr(x, x.copy()) == 99.0
    assert metrics.psnr(x, x + 1e-12) == 99.0


def test_psnr_hand_value():
    x = np.array([[1.0, 0.0]])
    est = np.array([[0.0, 0.0]])
    # peak 1, mse 0.5 -> 10 log10(2)
    assert metrics.psnr(x, est) == pytest.approx(10.0 * np.log10(2.0), rel=1e-12)


def test_psnr_zero_db_case():
    x = np.array([[1.0], [-1.0]])
    est = np.array([[0.0], [0.0]])
    assert metrics.psnr(x, est) == pytest.approx(0.0, abs=1e-12)


def test_time_error_zero_and_shift():
    x = np.zeros((4, 6))
    x[1] = [0.0, 0.2, 1.0, 0.3, 0.0, 0.0]
    assert metrics.time_error(x, x.copy()) == 0.0
    est = np.zeros_like(x)
    est[1] = np.roll(x[1], 2)
    assert metrics.time_error(x, est) == 2.0


def test_measures_validate_shapes_and_finiteness():
    x = _patchy()
    with pytest.raises(ShapeError):
        metrics.nmse(x, x[:, :2])
    with pytest.raises(ShapeError):
        metrics.psnr(x[0], x[0])
    with pytest.raises(InvalidInputError):
        metrics.time_error(x, x * np.nan)


# ---------------------------------------------------------------------------
# batch evaluation and reports


def _batch(count=3, s=8, t=5):
    instances = []
    estimates = []
    rng = np.random.default_rng(4)
    for k in range(count):
        x = _patchy(s=s, t=t, peak_row=k + 1)
        y = x[:4, :] + 0.0
        inst = InverseProblemInstance(
            X_true=x, Y=np.eye(4, s) @ x + 1e-3, L=np.eye(4, s),
            snr_db=10.0, seed=k,
        )
        instances.append(inst)
        estimates.append(x + 0.01 * rng.standard_normal(x.shape))
    return instances, estimates


def test_evaluate_averages_per_sample_rows():
    instances, estimates = _batch()
    report = metrics.evaluate(instances, estimates)
    assert len(report.per_sample) == 3
    assert report.le == pytest.approx(
        np.mean([r["le"] for r in report.per_sample])
    )
    assert report.nmse == pytest.approx(
        np.mean([r["nmse"] for r in report.per_sample])
    )
    assert report.auc == pytest.approx(
        np.mean([r["auc"] for r in report.per_sample])
    )
    payload = report.to_dict()
    assert payload["count"] == 3
    assert set(payload["aggregate"]) == {"le", "auc", "nmse", "psnr_db", "te"}


def test_evaluate_validates_lengths():
    instances, estimates = _batch()
    with pytest.raises(ShapeError):
        metrics.evaluate(instances, estimates[:-1])
    with pytest.raises(InvalidInputError):
        metrics.evaluate([], [])


def test_report_json_roundtrip(tmp_path):
    instances, estimates = _batch()
    report = metrics.evaluate(instances, estimates)
    path = tmp_path / "report.json"
    metrics.write_report_json(report, path)
    payload = json.loads(path.read_text())
    assert payload["aggregate"]["nmse"] == report.nmse
    assert len(payload["per_sample"]) == 3


def test_report_csv_layout_and_precision(tmp_path):
    instances, estimates = _batch()
    report = metrics.evaluate(instances, estimates)
    path = tmp_path / "report.csv"
    metrics.write_report_csv(report, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(metrics.CSV_COLUMNS)
    assert len(rows) == 5  # header + 3 samples + aggregate
    assert rows[-1][0] == "aggregate"
    # Full-precision round trip through the text format.
    assert float(rows[1][3]) == report.per_sample[0]["nmse"]
    assert float(rows[-1][3]) == report.nmse


def test_report_csv_empty_auc_cell(tmp_path):
    x = np.ones((4, 3))
    inst = InverseProblemInstance(
        X_true=x, Y=np.ones((2, 3)), L=np.ones((2, 4)), snr_db=1.0, seed=0
    )
    report = metrics.evaluate([inst], [x.copy()])
    assert report.auc is None
    path = tmp_path / "report.csv"
    metrics.write_report_csv(report, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][2] == ""
    assert rows[-1][2] == ""
