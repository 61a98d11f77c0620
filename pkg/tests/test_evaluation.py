import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mopflow.evaluation import BASELINES, EvalReport, evaluate_dataset, evaluate_sequence, iou


def square(shape, top, left, side):
    m = np.zeros(shape, dtype=bool)
    m[top : top + side, left : left + side] = True
    return m


def test_iou_examples():
    a = square((8, 8), 1, 1, 4)
    assert iou(a, a) == 1.0
    assert iou(a, square((8, 8), 5, 5, 2)) == 0.0
    assert iou(square((6, 6), 1, 1, 3), square((6, 6), 1, 2, 3)) == 0.5
    empty = np.zeros((4, 4), dtype=bool)
    assert iou(empty, empty) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


def brute_iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_iou_matches_bit_counting(seed, pa, pb):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16)) < pa
    b = rng.random((16, 16)) < pb
    v = iou(a, b)
    assert v == brute_iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a | b) >= v


def test_sequence_examples():
    a = square((6, 6), 1, 1, 3)
    b = square((6, 6), 1, 2, 3)
    z = square((6, 6), 4, 4, 2)
    assert evaluate_sequence([a, a], [a, a]) == 1.0
    assert evaluate_sequence([a, z, a, z], [a, a, a, a]) == 0.5
    assert evaluate_sequence([a, a, a], [b, b, a]) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        evaluate_sequence([a], [a, a])


def test_dataset_examples():
    a = square((6, 6), 1, 1, 3)
    rep = evaluate_dataset({"one": ([a], [a])})
    assert rep.mean_iou == 1.0
    table = rep.table()
    assert "40.1" in table and "41.9" in table and "PaperOurs" in table
    b = square((6, 6), 1, 2, 3)
    z = np.zeros((6, 6), bool)
    # per-sequence means 0.2 and 0.6
    s1 = ([a, z, z, z, z], [a, a, a, a, a])
    s2 = ([a, a, a, z, z], [a, a, a, a, a])
    rep = evaluate_dataset({"s1": s1, "s2": s2})
    assert rep.per_sequence == pytest.approx({"s1": 0.2, "s2": 0.6}, abs=1e-15)
    assert rep.mean_iou == pytest.approx(0.4, abs=1e-15)
    rep = evaluate_dataset({"x": ([a, z], [a, a]), "y": ([a, b], [a, a])})
    assert rep.mean_iou == pytest.approx((0.5 + 0.75) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        evaluate_dataset({})


def test_two_sequence_mean():
    rep = EvalReport.from_csv("sequence,iou\na,0.2\nb,0.6\n")
    assert rep.mean_iou == pytest.approx(0.4, abs=1e-15)


def test_baselines_exact():
    assert BASELINES == {"PCM": 40.1, "CVOS": 48.2, "KEY": 49.8, "NLC": 55.1, "FST": 55.8, "PaperOurs": 41.9}
    assert EvalReport({"a": 0.5}, 0.5).baselines == BASELINES


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text("abcdefgh_-", min_size=1, max_size=8), st.floats(0, 1), min_size=1, max_size=8))
def test_report_round_trip(per_seq):
    rep = EvalReport(per_seq, float(np.mean(list(per_seq.values()))))
    back = EvalReport.from_csv(rep.to_csv())
    assert back.per_sequence == rep.per_sequence
    assert list(back.per_sequence) == list(rep.per_sequence)
    assert abs(back.mean_iou - rep.mean_iou) <= 1e-9


def test_report_files(tmp_path):
    rep = EvalReport({"a": 0.25, "b": 0.5}, 0.375)
    rep.save(tmp_path / "r.csv", tmp_path / "r.txt")
    assert EvalReport.load(tmp_path / "r.csv").per_sequence == rep.per_sequence
    assert "37.5" in (tmp_path / "r.txt").read_text()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.randoms())
def test_mean_permutation_invariant(values, rnd):
    names = [f"s{i}" for i in range(len(values))]
    order = list(range(len(values)))
    rnd.shuffle(order)
    a = EvalReport.from_csv("sequence,iou\n" + "".join(f"{n},{v!r}\n" for n, v in zip(names, values)))
    b = EvalReport.from_csv(
        "sequence,iou\n" + "".join(f"{names[i]},{values[i]!r}\n" for i in order)
    )
    assert a.mean_iou == pytest.approx(b.mean_iou, rel=1e-12, abs=1e-15)
