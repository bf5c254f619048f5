import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerseg.metrics import (THRESHOLDS, CalibrationError, ConfusionCounts, UndefinedMetricError,
                              average_precision, f1_curve, f1_ss, select_threshold, seg_confusion, seg_report,
                              spec_sens_f1, uq_mse, uq_report, write_seg_report, write_seg_table,
                              write_uq_report)
from oracles import ap_oracle, brute_counts, detection_oracle


def test_confusion_worked_example():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    c = seg_confusion([pred], [gt], 2)
    assert c.tp.tolist() == [1, 2] and c.fp.tolist() == [0, 1] and c.fn.tolist() == [1, 0]
    r = seg_report(c)
    np.testing.assert_allclose(r.iou, [0.5, 2 / 3])
    np.testing.assert_allclose(r.precision, [1.0, 2 / 3])
    assert r.miou == pytest.approx(7 / 12) and r.mp == pytest.approx(5 / 6)


def test_confusion_empty_and_perfect():
    c = seg_confusion([], [], 6)
    assert c.tp.sum() == c.fp.sum() == c.fn.sum() == 0
    m = np.array([[0, 1], [2, 3]])
    r = seg_report(seg_confusion([m], [m]))
    assert np.all(r.iou == 1) and np.all(r.precision == 1)


def test_vacuous_and_never_predicted_classes():
    gt = np.array([[0, 1]])
    pred = np.array([[0, 0]])
    r = seg_report(seg_confusion([pred], [gt], 3))
    assert r.iou[2] == 1.0 and r.precision[2] == 1.0  # absent everywhere
    assert r.iou[1] == 0.0 and r.precision[1] == 0.0  # in gt, never predicted


def test_confusion_counts_add():
    a = seg_confusion([np.array([[0, 1]])], [np.array([[1, 1]])], 2)
    b = seg_confusion([np.array([[1, 1]])], [np.array([[0, 1]])], 2)
    both = seg_confusion([np.array([[0, 1]]), np.array([[1, 1]])], [np.array([[1, 1]]), np.array([[0, 1]])], 2)
    s = a + b
    assert s.tp.tolist() == both.tp.tolist() and s.fp.tolist() == both.fp.tolist() and s.total == 4


def test_ap_worked_examples():
    assert average_precision([0.9, 0.8, 0.3], [False, True, True]) == pytest.approx(0.5 * 0.5 + 0.5 * 2 / 3)
    assert average_precision([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2], [False, False])


def test_ap_e_uses_negated_scores():
    s = np.array([0.9, -0.5, 0.1])
    c = np.array([True, False, True])
    assert average_precision(s, c, "incorrect") == 1.0


def test_mse_examples():
    assert uq_mse(np.array([1.0, -1.0]), np.array([0.5, -0.5])) == pytest.approx(0.25)
    u = np.linspace(-0.5, 0.5, 7)
    assert uq_mse(u, u + 0.3) == pytest.approx(0.09)


def test_spec_sens_worked_example():
    correct = np.array([True, True, False, False])
    u_hat = np.array([0.9, -0.2, 0.1, -0.8])
    assert spec_sens_f1(u_hat, correct, 0.0) == (0.5, 0.5, 0.5)


def test_spec_sens_extremes():
    correct = np.array([True, False, True, False])
    u_hat = np.array([0.3, -0.4, 0.9, 0.2])
    spec, sens, _ = spec_sens_f1(u_hat, correct, -1.0)
    assert (spec, sens) == (1.0, 0.0)
    spec, sens, _ = spec_sens_f1(u_hat, correct, 1.0)
    assert (spec, sens) == (0.0, 1.0)
    assert spec_sens_f1(u_hat, correct, 0.25) == (1.0, 1.0, 1.0)


def test_threshold_grid_and_tie_break():
    assert len(THRESHOLDS) == 201 and THRESHOLDS[0] == -1.0 and THRESHOLDS[-1] == 1.0
    u_hat = np.array([0.5, 0.6, -0.3, -0.4])
    correct = np.array([True, True, False, False])
    assert select_threshold(u_hat, correct) == pytest.approx(-0.29)
    with pytest.raises(CalibrationError):
        select_threshold(u_hat, np.ones(4, bool))


def test_uq_report_fields():
    u = np.array([0.9, 0.8, -0.6, -0.2])
    u_hat = np.array([0.7, 0.6, -0.5, 0.1])
    correct = u > 0
    d = uq_report(u, u_hat, correct, 0.0, max_prob=np.array([0.9, 0.8, 0.4, 0.6])).to_dict()
    for key in ("AP", "AP-E", "MSE", "Spec", "Sens", "F1-SS", "tau", "MSP-AP"):
        assert key in d


def test_report_writers(tmp_path):
    r = seg_report(seg_confusion([np.array([[0, 1]])], [np.array([[0, 1]])]), label="x")
    js, csv = write_seg_report(r, tmp_path)
    assert js.exists() and csv.read_text().splitlines()[0] == "class,IoU,Precision,pixels"
    table = write_seg_table([r], tmp_path / "t.csv").read_text().splitlines()
    assert table[0] == "model,metric,BG,Kernel,Buffer,IPyC,SiC,OPyC,All"
    uq = uq_report(np.array([0.5, -0.5]), np.array([0.4, -0.3]), np.array([True, False]), 0.0)
    js, csv = write_uq_report(uq, tmp_path)
    assert "F1-SS" in csv.read_text()


@given(st.integers(0, 100_000))
def test_seg_confusion_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    C = int(r.integers(1, 7))
    shape = tuple(r.integers(1, 17, 2))
    preds = [r.integers(0, C, shape) for _ in range(2)]
    gts = [r.integers(0, C, shape) for _ in range(2)]
    c = seg_confusion(preds, gts, C)
    tp, fp, fn = brute_counts(preds, gts, C)
    assert c.tp.tolist() == tp and c.fp.tolist() == fp and c.fn.tolist() == fn


@given(st.integers(0, 100_000))
def test_ap_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 65))
    scores = np.round(r.uniform(-1, 1, n), int(r.integers(1, 4)))  # forces ties
    correct = r.random(n) < 0.6
    if correct.any():
        assert average_precision(scores, correct) == pytest.approx(ap_oracle(scores.tolist(), correct.tolist()),
                                                                     abs=1e-12)


@given(st.integers(0, 100_000), st.floats(0.1, 5))
def test_ap_invariant_to_monotone_transform(seed, k):
    r = np.random.default_rng(seed)
    scores = r.uniform(-1, 1, 40)
    correct = r.random(40) < 0.5
    if correct.any():
        assert average_precision(np.tanh(k * scores), correct) == pytest.approx(average_precision(scores, correct),
                                                                                 abs=1e-12)


@given(st.floats(0, 1))
def test_f1_of_equal_rates(a):
    assert f1_ss(a, a) == pytest.approx(a)


@given(st.integers(0, 100_000))
def test_f1_curve_matches_pointwise(seed):
    r = np.random.default_rng(seed)
    u_hat = np.round(r.uniform(-1, 1, 50), 2)
    correct = r.random(50) < 0.7
    curve = f1_curve(u_hat, correct)
    want = [spec_sens_f1(u_hat, correct, t)[2] for t in THRESHOLDS]
    np.testing.assert_allclose(curve, want, atol=1e-12)


def test_zero_counts_class():
    z = ConfusionCounts.zeros(3)
    assert z.gt_pixels.tolist() == [0, 0, 0]


@given(st.integers(0, 100_000), st.sampled_from(THRESHOLDS.tolist()))
def test_spec_sens_matches_counting(seed, tau):
    r = np.random.default_rng(seed)
    u_hat = np.round(r.uniform(-1, 1, 30), 2)
    correct = r.random(30) < 0.6
    assert spec_sens_f1(u_hat, correct, tau) == detection_oracle(u_hat.tolist(), correct.tolist(), tau)
