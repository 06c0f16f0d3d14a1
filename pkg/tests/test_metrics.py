import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedseg.errors import DimensionError, UndefinedMetricError
from fedseg.metrics import (
    MetricRecord,
    assd,
    dice,
    evaluate,
    hausdorff,
    hd95,
    iou,
    read_records_csv,
    score,
    summarize,
    surface,
    write_records_csv,
    write_summary_csv,
)
from oracles import brute_assd, brute_hd, brute_hd95, set_dice_iou, surface_points

masks = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda shape: st.tuples(arrays(bool, shape), arrays(bool, shape)))


class TestOverlap:
    def test_half_overlap(self):
        g = np.array([[1, 1, 0, 0]], bool)
        p = np.array([[0, 1, 1, 0]], bool)
        assert dice(g, p) == 0.5 and iou(g, p) == pytest.approx(1 / 3)

    def test_empty_conventions(self):
        z = np.zeros((3, 3), bool)
        assert dice(z, z) == 1.0 and iou(z, z) == 1.0
        assert dice(z, ~z) == 0.0

    @given(masks)
    def test_against_set_oracle(self, pair):
        g, p = pair
        d, j = set_dice_iou(g, p)
        assert dice(g, p) == d and iou(g, p) == j

    @given(masks)
    def test_iou_dice_identity(self, pair):
        d = dice(*pair)
        assert abs(iou(*pair) - d / (2 - d)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice(np.zeros((2, 2)), np.zeros((2, 3)))


class TestDistances:
    def test_shifted_square(self):
        g = np.zeros((10, 10), bool)
        g[2:5, 2:5] = True
        p = np.roll(g, 3, axis=1)
        assert hausdorff(g, p) == 3.0
        assert hausdorff(g, p, boundary=True) == 3.0

    def test_identical_masks_zero(self):
        g = np.zeros((6, 6), bool)
        g[1:4, 2:5] = True
        assert hausdorff(g, g) == hd95(g, g) == assd(g, g) == 0.0

    def test_surface_definition(self):
        g = np.zeros((5, 5), bool)
        g[1:4, 1:4] = True
        s = surface(g)
        assert s.sum() == 8 and not s[2, 2]
        full = np.ones((3, 3), bool)
        assert surface(full).sum() == 8  # image border counts as background

    @given(masks)
    def test_against_brute_force(self, pair):
        g, p = pair
        if not g.any() or not p.any():
            with pytest.raises(UndefinedMetricError):
                hausdorff(g, p)
            return
        for boundary in (False, True):
            assert abs(hausdorff(g, p, boundary) - brute_hd(g, p, boundary)) <= 1e-9
            assert abs(hd95(g, p, boundary) - brute_hd95(g, p, boundary)) <= 1e-9
        assert abs(assd(g, p) - brute_assd(g, p)) <= 1e-9

    @given(masks)
    def test_ordering(self, pair):
        g, p = pair
        if g.any() and p.any():
            assert hd95(g, p) <= hausdorff(g, p) + 1e-12
            assert assd(g, p) <= hausdorff(g, p, boundary=True) + 1e-12

    def test_surface_oracle_agrees(self, rng):
        for _ in range(20):
            m = rng.random((9, 11)) > 0.4
            np.testing.assert_array_equal(np.argwhere(surface(m)).astype(float), surface_points(m))


class TestRecords:
    def test_undefined_kept_as_nan(self):
        r = score(3, np.ones((4, 4), bool), np.zeros((4, 4), bool))
        assert r.undefined and np.isnan(r.hd) and r.dice == 0.0

    def test_summary_skips_nan(self):
        recs = [MetricRecord(i, d, d, h, h, h) for i, (d, h) in enumerate([(0.5, 1.0), (0.7, np.nan), (0.9, 3.0)])]
        s = summarize(recs)
        assert s["dice"]["median"] == 0.7 and s["dice"]["n"] == 3
        assert s["hd"]["median"] == 2.0 and s["hd"]["n"] == 2

    def test_csv_round_trip(self, tmp_path):
        recs = [MetricRecord(1, 0.25, 0.125, 2.0, 1.5, 0.1), MetricRecord(2, 0.0, 0.0)]
        write_records_csv(tmp_path / "m.csv", recs)
        back = read_records_csv(tmp_path / "m.csv")
        assert back[0] == recs[0]
        assert back[1].sample_id == 2 and np.isnan(back[1].hd)
        write_summary_csv(tmp_path / "s.csv", {"FL": summarize(recs) | {"undefined": 1}})
        head, row = (tmp_path / "s.csv").read_text().splitlines()
        assert head.startswith("model,dice_median") and row.startswith("FL,") and row.endswith(",1")

    def test_evaluate_thresholds_predictions(self):
        class Fixed:
            def predict(self, x, batch_size=8):
                return x

        x = np.zeros((2, 1, 4, 4))
        x[0, 0, :2] = 0.9
        x[1, 0, :2] = 0.4
        y = np.zeros_like(x)
        y[:, 0, :2] = 1.0
        records, summary = evaluate(Fixed(), x, y, ids=[10, 11])
        assert [r.sample_id for r in records] == [10, 11]
        assert records[0].dice == 1.0 and records[1].dice == 0.0
        assert summary["undefined"] == 1
