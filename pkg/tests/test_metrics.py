import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibeam.metrics import (DbaConfig, EvalRun, REPORT_HEADER, ablation_report, dba_score,
                            read_report, top1, write_report)

beam_lists = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 15), min_size=n, max_size=n),
                        st.lists(st.integers(0, 15), min_size=n, max_size=n)))


def test_worked_example():
    cfg = DbaConfig((1, 3, 5))
    assert dba_score([11, 26], [10, 20], cfg) == (0.5, 0.5, 0.5, 0.5)


def test_default_thresholds():
    assert DbaConfig().thresholds == (1, 2, 3)
    y = dba_score([0, 2, 5, 9], [0, 0, 0, 0])
    assert y[:3] == (0.25, 0.5, 0.5)


def test_input_validation():
    with pytest.raises(ValueError):
        dba_score([], [])
    with pytest.raises(ValueError):
        dba_score([1, 2], [1])
    with pytest.raises(IndexError):
        dba_score([16], [0], n_beams=16)
    with pytest.raises(IndexError):
        top1([-1], [0])


@pytest.mark.parametrize("bad", [(1, 2), (1, 1, 2), (3, 2, 1), (-1, 0, 1)])
def test_threshold_validation(bad):
    with pytest.raises(ValueError):
        DbaConfig(bad)


def test_ablation_report_degradation():
    truths = np.array([0, 1, 2, 3])
    runs = [EvalRun("m", (), truths.copy(), truths, "test"),
            EvalRun("m", ("radar-cube",), np.array([0, 1, 9, 9]), truths, "test")]
    rows = ablation_report(runs)
    assert rows[0]["degradation"] == 0.0
    assert rows[1]["drop_set"] == "radar-cube"
    assert rows[1]["degradation"] == pytest.approx(0.5)


def test_ablation_report_needs_baseline_and_one_dataset():
    t = np.array([0, 1])
    with pytest.raises(ValueError, match="baseline"):
        ablation_report([EvalRun("m", ("a",), t, t)])
    with pytest.raises(ValueError, match="datasets"):
        ablation_report([EvalRun("m", (), t, t, "x"), EvalRun("m", ("a",), t, t, "y")])


def test_report_round_trip(tmp_path):
    t = np.array([3, 4, 5])
    rows = [EvalRun("r", (), np.array([3, 6, 5]), t).row()]
    write_report(tmp_path / "m.csv", rows)
    back = read_report(tmp_path / "m.csv")
    assert list(back[0]) == REPORT_HEADER
    assert back[0]["dba"] == pytest.approx(rows[0]["dba"], abs=1e-6)
    assert back[0]["drop_set"] == "none"


@settings(max_examples=100, deadline=None)
@given(beam_lists)
def test_zero_thresholds_equal_top1(pair):
    preds, truths = pair
    assert dba_score(preds, truths, thresholds=(0, 0, 0))[3] == top1(preds, truths)


@settings(max_examples=100, deadline=None)
@given(beam_lists)
def test_scores_are_monotone_and_bounded(pair):
    y1, y2, y3, s = dba_score(*pair)
    assert 0.0 <= y1 <= y2 <= y3 <= 1.0
    assert y1 <= s <= y3
    assert top1(*pair) <= y1
