import csv

import numpy as np
import pytest

from coat import attention as A
from coat import bench as BN
from coat import reference as R
from coat.errors import ContractError


def synthetic(power, ns=(256, 512, 1024, 2048, 4096)):
    return [BN.ScalingRecord("x", n, 64, 3, int(n ** power), int(8 * n ** power)) for n in ns]


class TestSlope:
    def test_quadratic(self):
        assert abs(BN.fit_loglog_slope(synthetic(2)) - 2.0) < 1e-9

    def test_linear(self):
        assert abs(BN.fit_loglog_slope(synthetic(1)) - 1.0) < 1e-9

    def test_peak_metric(self):
        assert abs(BN.fit_loglog_slope(synthetic(1), "peak_bytes") - 1.0) < 1e-9

    def test_too_few_points(self):
        with pytest.raises(ContractError):
            BN.fit_loglog_slope(synthetic(1)[:3])

    def test_truncated_records_ignored(self):
        recs = synthetic(1) + [BN.ScalingRecord("x", 8192, 64, 3, None, None, truncated=True)]
        assert abs(BN.fit_loglog_slope(recs) - 1.0) < 1e-9

    def test_mixed_configs_rejected(self):
        recs = synthetic(1)
        recs[0] = BN.ScalingRecord("y", 256, 64, 3, 256, 8)
        with pytest.raises(ContractError):
            BN.fit_loglog_slope(recs)


class TestMeasure:
    def test_ns_must_ascend(self):
        with pytest.raises(ContractError):
            BN.measure_scaling("factor_att", [512, 256, 1024, 4096])

    def test_range_required(self):
        with pytest.raises(ContractError):
            BN.measure_scaling("factor_att", [256, 512, 1024, 2048])

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            BN.measure_one("softmax", 64, 8)

    def test_min_repeats(self):
        with pytest.raises(ContractError):
            BN.measure_one("factor_att", 64, 8, repeats=3)

    @pytest.mark.parametrize("op", BN.OPS)
    def test_records(self, op):
        recs = BN.measure_scaling(op, [64, 128], C=8, repeats=5, require_range=False)
        assert [r.N for r in recs] == [64, 128]
        assert all(r.wall_ns > 0 and r.peak_bytes >= 0 and not r.truncated for r in recs)

    def test_full_att_peak_grows_quadratically(self):
        recs = BN.measure_scaling("full_att", [512, 1024], C=8, repeats=5, require_range=False)
        assert BN.growth_ratios(recs)[0] == pytest.approx(4.0, rel=0.25)

    def test_factor_att_peak_flat(self):
        recs = BN.measure_scaling("factor_att", [1024, 2048], C=16, repeats=5, require_range=False)
        assert BN.growth_ratios(recs)[0] <= 1.3

    def test_crpe_time_grows_with_window(self):
        t = {m: BN.measure_one("crpe", 4096, 32, m=m, repeats=5).wall_ns for m in (3, 7)}
        assert t[7] > 2.0 * t[3]  # (7/3)^2 ~ 5.4 in the asymptote

    def test_grid_for(self):
        assert BN.grid_for(256) == (16, 16) and BN.grid_for(512) == (16, 32) and BN.grid_for(7) == (1, 7)

    def test_doubling_sizes(self):
        assert BN.doubling_sizes() == [256, 512, 1024, 2048, 4096, 8192, 16384]

    @pytest.mark.parametrize("n", [256, 1024])
    def test_factor_kernel_correct_at_bench_sizes(self, n):
        gen = np.random.default_rng(n)
        q, k, v = (gen.uniform(-1, 1, (n, 8)).astype(np.float32) for _ in range(3))
        # loop reference is O(N C^2) so stays affordable at these sizes
        np.testing.assert_allclose(A.factorized_attention_kernel(q, k, v), R.factorized_attention(q, k, v),
                                   atol=1e-4)


class TestCSV:
    def test_round_trip(self, tmp_path):
        recs = synthetic(1)[:2] + [BN.ScalingRecord("x", 8192, 64, 3, None, None, truncated=True)]
        path = tmp_path / "b.csv"
        BN.write_csv(recs, path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["op", "N", "C", "M", "wall_ns", "peak_bytes"]
        assert rows[1] == ["x", "256", "64", "3", "256", "2048"]
        assert rows[3][4:] == ["", ""]
        assert BN.read_csv(path) == recs
