import json
import math

import numpy as np
import pytest

from dualvq.codebook import Codebook
from dualvq.metrics import (
    CodebookSeries,
    UtilizationReport,
    compression_ratio,
    emit_utilization,
    frechet_gaussian,
    gaussian_stats,
    l1_metric,
    l2_metric,
    load_utilization,
    psnr,
    sanitize_for_json,
    series_from_codebook,
)


class TestPsnr:
    def test_twenty_db(self):
        x = np.zeros((3, 4, 4))
        x_hat = x + 0.1          # MSE 0.01
        assert abs(psnr(x, x_hat) - 20.0) < 1e-9

    def test_identical_gives_inf(self):
        x = np.random.default_rng(80).uniform(size=(3, 8, 8))
        assert psnr(x, x.copy()) == float("inf")
        assert sanitize_for_json({"psnr": psnr(x, x.copy())}) == {"psnr": "inf"}

    def test_quarter_mse(self):
        x = np.zeros((3, 2, 2))
        assert abs(psnr(x, x + 0.5) - 6.020599913279624) < 1e-9

    def test_monotone_in_mse(self):
        x = np.zeros((3, 4, 4))
        values = [psnr(x, x + eps) for eps in (0.01, 0.05, 0.1, 0.3, 0.7)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)))


class TestL1L2:
    def test_identical(self):
        x = np.random.default_rng(81).uniform(size=(3, 5, 5))
        assert l1_metric(x, x.copy()) == 0.0
        assert l2_metric(x, x.copy()) == 0.0

    def test_constant_offset(self):
        x = np.full((3, 4, 4), 0.4)
        assert abs(l1_metric(x, x + 0.1) - 0.1) < 1e-12
        assert abs(l2_metric(x, x + 0.1) - 0.01) < 1e-12

    def test_loop_oracle(self):
        rng = np.random.default_rng(82)
        x = rng.uniform(size=(2, 3, 3))
        y = rng.uniform(size=(2, 3, 3))
        acc1 = acc2 = 0.0
        for a, b in zip(x.reshape(-1), y.reshape(-1)):
            acc1 += abs(a - b)
            acc2 += (a - b) ** 2
        assert abs(l1_metric(x, y) - acc1 / x.size) < 1e-12
        assert abs(l2_metric(x, y) - acc2 / x.size) < 1e-12


class TestFrechet:
    def test_identical_zero(self):
        rng = np.random.default_rng(83)
        mu = rng.normal(size=4)
        a = rng.normal(size=(4, 4))
        cov = a @ a.T
        assert frechet_gaussian(mu, cov, mu, cov) < 1e-9

    def test_mean_shift_only(self):
        assert abs(frechet_gaussian([0.0], [[1.0]], [3.0], [[1.0]]) - 9.0) < 1e-9

    def test_variance_term(self):
        assert abs(frechet_gaussian([0.0], [[1.0]], [0.0], [[4.0]]) - 1.0) < 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(84)
        mu1, mu2 = rng.normal(size=(2, 3))
        a, b = rng.normal(size=(2, 3, 3))
        c1, c2 = a @ a.T, b @ b.T
        d12 = frechet_gaussian(mu1, c1, mu2, c2)
        d21 = frechet_gaussian(mu2, c2, mu1, c1)
        assert abs(d12 - d21) < 1e-9

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(85)
        mu = rng.normal(size=3)
        a = rng.normal(size=(3, 3))
        cov = a @ a.T
        assert frechet_gaussian(mu, cov, mu + 0.05, cov) > 1e-4
        assert frechet_gaussian(mu, cov, mu, cov * 1.2) > 1e-4

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            frechet_gaussian([0.0, 0.0], np.eye(2), [0.0], np.eye(1))

    def test_rank_deficient_ok(self):
        feats = np.random.default_rng(86).normal(size=(4, 10))  # fewer rows than dims
        mu, cov = gaussian_stats(feats)
        val = frechet_gaussian(mu, cov, mu, cov)
        assert 0.0 <= val < 1e-9


class TestUtilization:
    def make_report(self):
        cb_g = Codebook(4, 2, entries=np.zeros((4, 2)))
        cb_g.record(np.array([0, 0, 1, 2]))
        cb_l = Codebook(8, 2, entries=np.zeros((8, 2)))
        cb_l.record(np.array([5, 5, 5]))
        return UtilizationReport(
            series=[series_from_codebook("global", cb_g), series_from_codebook("local", cb_l)],
            step=42, config_hash="abc123")

    def test_roundtrip(self, tmp_path):
        report = self.make_report()
        jp, cp = emit_utilization(report, str(tmp_path / "util"))
        back = load_utilization(jp)
        assert back == report

    def test_csv_layout(self, tmp_path):
        report = self.make_report()
        _, cp = emit_utilization(report, str(tmp_path / "util"))
        lines = open(cp).read().strip().split("\n")
        assert lines[0] == "codebook,entry_id,count"
        assert lines[1] == "global,0,2"
        assert len(lines) == 1 + 4 + 8

    def test_two_series_independent_k(self, tmp_path):
        report = self.make_report()
        jp, _ = emit_utilization(report, str(tmp_path / "util"))
        blob = json.load(open(jp))
        ks = {s["name"]: s["n_entries"] for s in blob["series"]}
        assert ks == {"global": 4, "local": 8}

    def test_collapsed_fraction(self):
        cb = Codebook(32, 2, entries=np.zeros((32, 2)))
        cb.record(np.zeros(100, dtype=np.int64))
        s = series_from_codebook("global", cb)
        assert s.active_fraction == 0.03125

    def test_validation_catches_bad_histogram(self):
        bad = UtilizationReport(series=[CodebookSeries("g", 2, [1, 1], 5, 1.0, 1.0)],
                                step=0, config_hash="x")
        with pytest.raises(ValueError):
            bad.validate()


class TestCompression:
    def test_paper_ratio(self):
        assert compression_ratio((256, 256, 3), (16, 16)) == 768.0

    def test_desk_ratio(self):
        assert compression_ratio((32, 32, 3), (8, 8)) == 48.0
