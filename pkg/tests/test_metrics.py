import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from gelsim import assignment, metrics
from gelsim.geometry import PointCloud, TriMesh


def brute_chamfer(a, b):
    d_ab = [min(np.linalg.norm(p - q) for q in b) for p in a]
    d_ba = [min(np.linalg.norm(q - p) for p in a) for q in b]
    return 0.5 * (np.mean(d_ab) + np.mean(d_ba))


def brute_sig_chamfer(a, b, q=0.01):
    def one(src, dst):
        d = sorted(min(np.linalg.norm(p - t) for t in dst) for p in src)
        k = max(1, math.ceil(q * len(d)))
        return np.mean(d[-k:])

    return 0.5 * (one(a, b) + one(b, a))


def brute_fscore(a, b, tau=1.0):
    p = np.mean([min(np.linalg.norm(x - y) for y in b) <= tau for x in a])
    r = np.mean([min(np.linalg.norm(y - x) for x in a) <= tau for y in b])
    return 0.0 if p + r == 0 else 200.0 * p * r / (p + r)


class TestHandCases:
    def test_chamfer_identical(self):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        assert metrics.l2_chamfer(pts, pts) == 0.0

    def test_chamfer_single_pair(self):
        assert metrics.l2_chamfer([[0, 0, 0]], [[0, 0, 2]]) == pytest.approx(2.0)

    def test_chamfer_asymmetric_sets(self):
        val = metrics.l2_chamfer([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]])
        assert val == pytest.approx(1.5)

    def test_sig_identical(self):
        pts = np.random.default_rng(1).normal(size=(50, 3))
        assert metrics.sig_l2_chamfer(pts, pts) == 0.0

    def test_sig_one_displaced(self):
        # 100 points spaced 20 mm apart on a line; one displaced 5 mm
        # perpendicular. Top-1% per direction is exactly that point.
        b = np.zeros((100, 3))
        b[:, 0] = 20.0 * np.arange(100)
        a = b.copy()
        a[40, 1] = 5.0
        assert metrics.sig_l2_chamfer(a, b) == pytest.approx(5.0)

    def test_emd_identical_permuted(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(12, 3))
        b = a[rng.permutation(12)]
        assert metrics.emd(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_emd_pair_case(self):
        a = [[0, 0, 0], [2, 0, 0]]
        b = [[1, 0, 0], [3, 0, 0]]
        assert metrics.emd(a, b) == pytest.approx(1.0)

    def test_emd_size_mismatch(self):
        with pytest.raises(metrics.MetricsError):
            metrics.emd([[0, 0, 0]], [[0, 0, 0], [1, 1, 1]])

    def test_fscore_identical(self):
        pts = np.random.default_rng(4).normal(size=(30, 3))
        assert metrics.fscore(pts, pts) == 100.0

    def test_fscore_far_apart(self):
        a = np.zeros((10, 3))
        b = np.zeros((10, 3)) + [10.0, 0, 0]
        assert metrics.fscore(a, b) == 0.0

    def test_fscore_half_match(self):
        a = np.array([[0, 0, 0], [5, 0, 0]], dtype=float)
        b = np.array([[0, 0, 0], [10, 0, 0]], dtype=float)
        assert metrics.fscore(a, b) == pytest.approx(50.0)


class TestOracleEquivalence:
    def test_against_brute_force(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            n = int(rng.integers(4, 64))
            m = int(rng.integers(4, 64))
            a = rng.uniform(-5, 5, size=(n, 3))
            b = rng.uniform(-5, 5, size=(m, 3))
            assert metrics.l2_chamfer(a, b) == pytest.approx(brute_chamfer(a, b), abs=1e-9)
            assert metrics.sig_l2_chamfer(a, b) == pytest.approx(brute_sig_chamfer(a, b), abs=1e-9)
            assert metrics.fscore(a, b, tau=2.0) == pytest.approx(
                brute_fscore(a, b, tau=2.0), abs=1e-9
            )

    def test_emd_matches_scipy_and_exhaustive(self):
        rng = np.random.default_rng(8)
        for trial in range(10):
            n = int(rng.integers(2, 7))
            a = rng.uniform(-5, 5, size=(n, 3))
            b = rng.uniform(-5, 5, size=(n, 3))
            diff = a[:, None] - b[None]
            cost = np.linalg.norm(diff, axis=2)
            perm = assignment.exhaustive(cost)
            expected = cost[np.arange(n), perm].mean()
            assert metrics.emd(a, b) == pytest.approx(expected, abs=1e-9)
        for trial in range(5):
            n = 64
            a = rng.uniform(-5, 5, size=(n, 3))
            b = rng.uniform(-5, 5, size=(n, 3))
            cost = np.linalg.norm(a[:, None] - b[None], axis=2)
            r, c = linear_sum_assignment(cost)
            assert metrics.emd(a, b) == pytest.approx(cost[r, c].mean(), abs=1e-9)

    def test_hungarian_beats_greedy(self):
        rng = np.random.default_rng(9)
        cost = rng.uniform(0, 1, size=(30, 30))
        col = assignment.hungarian(cost)
        exact = cost[np.arange(30), col].sum()
        taken = set()
        greedy = 0.0
        for i in range(30):
            order = np.argsort(cost[i])
            for j in order:
                if j not in taken:
                    taken.add(int(j))
                    greedy += cost[i, j]
                    break
        assert exact <= greedy + 1e-12

    def test_auction_gap(self):
        rng = np.random.default_rng(10)
        n = 600
        a = rng.uniform(0, 20, size=(n, 3))
        b = a[rng.permutation(n)] + rng.normal(0, 0.5, size=(n, 3))
        cost = np.linalg.norm(a[:, None] - b[None], axis=2)
        r, c = linear_sum_assignment(cost)
        exact = cost[r, c].mean()
        approx = metrics.emd(a, b)
        assert approx >= exact - 1e-9
        assert approx <= exact * 1.01 + 1e-9


class TestProperties:
    def test_rigid_invariance(self):
        rng = np.random.default_rng(11)
        a = rng.uniform(-5, 5, size=(40, 3))
        b = rng.uniform(-5, 5, size=(40, 3))
        theta = 0.83
        R = np.array(
            [[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]]
        )
        t = np.array([3.0, -2.0, 7.0])
        a2, b2 = a @ R.T + t, b @ R.T + t
        assert metrics.l2_chamfer(a2, b2) == pytest.approx(metrics.l2_chamfer(a, b), abs=1e-9)
        assert metrics.emd(a2, b2) == pytest.approx(metrics.emd(a, b), abs=1e-9)
        assert metrics.fscore(a2, b2) == pytest.approx(metrics.fscore(a, b), abs=1e-9)
        assert metrics.sig_l2_chamfer(a2, b2) == pytest.approx(
            metrics.sig_l2_chamfer(a, b), abs=1e-9
        )

    def test_chamfer_symmetry_and_translation(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(25, 3))
        b = rng.normal(size=(35, 3))
        assert metrics.l2_chamfer(a, b) == metrics.l2_chamfer(b, a)
        t = np.array([1.0, 2.0, 3.0])
        assert metrics.l2_chamfer(a + t, b + t) == pytest.approx(
            metrics.l2_chamfer(a, b), abs=1e-12
        )

    def test_sig_dominates_mean(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            a = rng.normal(size=(60, 3))
            b = rng.normal(size=(60, 3))
            assert metrics.sig_l2_chamfer(a, b) >= metrics.l2_chamfer(a, b) - 1e-12

    def test_fscore_monotone_in_tau(self):
        rng = np.random.default_rng(14)
        a = rng.normal(size=(50, 3))
        b = a + rng.normal(0, 0.5, size=(50, 3))
        scores = [metrics.fscore(a, b, tau=t) for t in (2.0, 1.0, 0.5, 0.25)]
        assert all(x >= y - 1e-12 for x, y in zip(scores, scores[1:]))


class TestImageMetrics:
    def test_identical(self):
        img = np.random.default_rng(15).uniform(size=(16, 16, 3))
        rep = metrics.image_metrics(img, img)
        assert rep.mean_l2 == 0.0
        assert rep.sig_l2 == 0.0
        assert math.isinf(rep.psnr)
        assert rep.to_dict()["PSNR"] == "inf"

    def test_uniform_mse(self):
        pred = np.zeros((10, 10, 3))
        gt = np.full((10, 10, 3), 0.1)
        rep = metrics.image_metrics(pred, gt)
        assert rep.psnr == pytest.approx(20.0)

    def test_black_vs_white(self):
        pred = np.zeros((8, 8, 3))
        gt = np.ones((8, 8, 3))
        rep = metrics.image_metrics(pred, gt)
        assert rep.mean_l2 == pytest.approx(np.sqrt(3.0))
        assert rep.sig_l2 == pytest.approx(np.sqrt(3.0))
        assert rep.psnr == pytest.approx(0.0)

    def test_sig_dominates_mean(self):
        rng = np.random.default_rng(16)
        for _ in range(5):
            pred = rng.uniform(size=(12, 12, 3))
            gt = rng.uniform(size=(12, 12, 3))
            rep = metrics.image_metrics(pred, gt)
            assert rep.sig_l2 >= rep.mean_l2

    def test_shape_mismatch(self):
        with pytest.raises(metrics.MetricsError):
            metrics.image_metrics(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))

    def test_out_of_range(self):
        with pytest.raises(metrics.MetricsError):
            metrics.image_metrics(np.full((8, 8, 3), 1.5), np.zeros((8, 8, 3)))


class TestCloudMetricsEntry:
    SQUARE = TriMesh(
        np.array([[0, 0, 0], [10, 0, 0], [10, 10, 0], [0, 10, 0]], dtype=float),
        np.array([[0, 1, 2], [0, 2, 3]]),
    )

    def test_mesh_vs_itself(self):
        rep = metrics.cloud_metrics(self.SQUARE, self.SQUARE, n=256, seed=5)
        # same mesh, different sample draws: distances small but nonzero
        assert rep.l2_cd < 0.5
        assert rep.fscore_1mm > 95.0

    def test_identical_clouds(self):
        cloud = PointCloud(np.random.default_rng(17).uniform(0, 10, size=(300, 3)))
        rep = metrics.cloud_metrics(cloud, cloud, n=128, seed=3)
        assert rep.n_sampled == 128

    def test_report_schema(self):
        cloud = PointCloud(np.random.default_rng(18).uniform(size=(64, 3)))
        rep = metrics.cloud_metrics(cloud, cloud, n=32, seed=0)
        d = rep.to_dict()
        assert list(d.keys()) == ["L2 CD", "Sig. L2 CD", "EMD", "F-Score", "n_sampled"]

    def test_subsample_deterministic(self):
        cloud = PointCloud(np.random.default_rng(19).uniform(size=(500, 3)))
        r1 = metrics.cloud_metrics(cloud, cloud, n=64, seed=9)
        r2 = metrics.cloud_metrics(cloud, cloud, n=64, seed=9)
        assert r1 == r2


def test_report_files(tmp_path):
    cloud_rows = [
        {"frame": 0, "L2 CD": 1.0, "Sig. L2 CD": 2.0, "EMD": 1.5, "F-Score": 80.0},
        {"frame": 1, "L2 CD": 2.0, "Sig. L2 CD": 3.0, "EMD": 2.5, "F-Score": 60.0},
    ]
    image_rows = [{"frame": 0, "Mean L2": 0.1, "Sig. L2": 0.2, "PSNR": 25.0}]
    path = tmp_path / "metrics_report.json"
    metrics.write_metrics_report(path, cloud_rows, image_rows)
    import json

    report = json.loads(path.read_text())
    assert report["schema_version"] == 1
    assert report["cloud"]["aggregate"]["L2 CD"] == pytest.approx(1.5)
    assert report["image"]["aggregate"]["PSNR"] == pytest.approx(25.0)

    csv_path = tmp_path / "metrics.csv"
    metrics.write_metrics_csv(csv_path, cloud_rows, ["frame", "L2 CD", "Sig. L2 CD", "EMD", "F-Score"])
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 3
