import numpy as np
import pytest

from pprfcn.bench import FcPairBaseline, bench, random_boxes, write_bench_report
from pprfcn.errors import DomainError
from pprfcn.geometry import Box


def test_two_proposals():
    report, shared, fc = bench(N=2, D=8, repeats=1, height=16, width=16)
    assert report.pairs == 2
    assert shared.shape == (2, 4) and fc.shape == (2, 4)
    assert report.shared_median_ms > 0 and report.fc_median_ms > 0


def test_outputs_stable_across_repeats():
    _, s1, f1 = bench(N=5, D=8, repeats=1, height=16, width=16)
    _, s3, f3 = bench(N=5, D=8, repeats=3, height=16, width=16)
    np.testing.assert_array_equal(s1, s3)
    np.testing.assert_array_equal(f1, f3)


@pytest.mark.parametrize("kwargs", [{"N": 1}, {"N": 0}, {"repeats": 0}])
def test_invalid(kwargs):
    with pytest.raises(DomainError):
        bench(**{"D": 8, **kwargs})


def test_fc_pools_each_box_by_mean():
    # identity weights and non-negative features pass the two box means straight through
    rng = np.random.default_rng(1)
    feats = np.abs(rng.normal(size=(10, 10, 2))).astype(np.float32)
    fc = FcPairBaseline(D=2, R=4, hidden=4, rng=rng)
    fc.w1.value[...] = np.eye(4, dtype=fc.w1.value.dtype)
    fc.w2.value[...] = np.eye(4, dtype=fc.w2.value.dtype)
    boxes = [Box(1, 2, 5, 7), Box(0, 0, 3, 3)]
    out = fc.forward(feats, boxes, [(0, 1)])
    expect = np.concatenate([feats[2:7, 1:5].mean(axis=(0, 1)), feats[0:3, 0:3].mean(axis=(0, 1))])
    np.testing.assert_allclose(out[0], expect, rtol=1e-5)


def test_random_boxes_inside():
    rng = np.random.default_rng(0)
    for b in random_boxes(200, 20, 30, rng):
        assert 0 <= b.x1 < b.x2 <= 30 and 0 <= b.y1 < b.y2 <= 20
        assert 4 <= b.x2 - b.x1 <= 16 and 4 <= b.y2 - b.y1 <= 16


def test_report_csv(tmp_path):
    report, _, _ = bench(N=3, D=8, repeats=1, height=16, width=16)
    write_bench_report(report, tmp_path / "b.csv")
    header, row = (tmp_path / "b.csv").read_text(encoding="utf-8").splitlines()
    assert header.split(",")[:3] == ["N", "pairs", "D"]
    assert row.split(",")[:2] == ["3", "6"]
