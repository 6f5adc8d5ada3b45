import math

import numpy as np
import pytest
from scipy import stats
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from diffreg.bench import (
    CSV_COLUMNS,
    BenchmarkReport,
    PairResult,
    add_gaussian_noise,
    generate_scene,
    generate_synthetic_transform,
    make_synthetic_pair,
    make_synthetic_pairs,
    run_benchmark,
)
from diffreg.errors import NoCorrespondence
from diffreg.geometry import PointCloud, RigidTransform, rpy_matrix


def decompose(T):
    """Roll, pitch, yaw in degrees for R = Rz(yaw) Ry(pitch) Rx(roll)."""
    return np.degrees(Rotation.from_matrix(T.rotation).as_euler("xyz"))


@pytest.fixture(scope="module")
def transforms():
    return [generate_synthetic_transform(s) for s in range(10_000)]


def test_euler_oracle_matches_rpy_convention(rng):
    r, p, y = rng.uniform(0, 0.3, 3)
    ang = np.radians(decompose(RigidTransform(rpy_matrix(r, p, y), np.zeros(3))))
    np.testing.assert_allclose(ang, [r, p, y], atol=1e-12)


def test_transform_ranges(transforms):
    t = np.array([T.translation for T in transforms])
    ang = np.array([decompose(T) for T in transforms])
    assert np.all(np.abs(t) <= [1.0, 2.0, 0.5])
    assert np.all(t.max(axis=0) > [0.99, 1.98, 0.49]) and np.all(t.min(axis=0) < [-0.99, -1.98, -0.49])
    assert ang[:, :2].min() >= -1e-9 and ang[:, :2].max() <= 2.0 + 1e-9
    assert ang[:, 2].min() >= -1e-9 and ang[:, 2].max() <= 15.0 + 1e-9


def test_yaw_is_uniform(transforms):
    yaw = np.array([decompose(T)[2] for T in transforms])
    assert stats.kstest(yaw, stats.uniform(0, 15).cdf).pvalue > 0.01


def test_transform_is_deterministic():
    assert generate_synthetic_transform(42).to_line() == generate_synthetic_transform(42).to_line()


def test_noise_statistics():
    cloud = PointCloud(np.zeros((34_000, 3)))
    d = add_gaussian_noise(cloud, 0.25, seed=3).points.ravel()
    assert abs(d.std() - 0.25) <= 0.05 * 0.25
    assert abs(d.mean()) < 0.01
    same = add_gaussian_noise(cloud, 0.0)
    assert np.array_equal(same.points, cloud.points)
    with pytest.raises(ValueError):
        add_gaussian_noise(cloud, -1.0)


def test_scene_deterministic_and_bounded():
    a, b = generate_scene(5, 2500), generate_scene(5, 2500)
    assert a.points.tobytes() == b.points.tobytes()
    assert len(a) == 2500
    assert np.all(np.abs(a.points[:, :2]) <= 12.0) and a.points[:, 2].min() >= 0 and a.points[:, 2].max() <= 12.0
    with pytest.raises(ValueError):
        generate_scene(0, 50)


def planar_orientations(points, k=20, planarity=0.05, min_share=0.02, sep_deg=20.0):
    """Distinct normal directions of planar neighborhoods, by local covariance eigen-analysis."""
    _, nn = cKDTree(points).query(points, k=k)
    normals = []
    for idx in nn:
        q = points[idx] - points[idx].mean(axis=0)
        evals, evecs = np.linalg.eigh(q.T @ q)
        if evals[0] <= planarity * evals[1]:
            normals.append(evecs[:, 0])
    normals = np.array(normals)
    clusters = []
    for n in normals:
        for c in clusters:
            if abs(n @ c[0]) > math.cos(math.radians(sep_deg)):
                c[1] += 1
                break
        else:
            clusters.append([n, 1])
    return sum(1 for c in clusters if c[1] >= min_share * len(points))


def test_scene_has_three_plane_orientations():
    # dense sampling so that neighborhoods resolve single faces
    for seed in range(5):
        assert planar_orientations(generate_scene(seed, 20_000).points, k=15, min_share=0.01) >= 3


def test_pair_noise_only_on_target():
    clean = make_synthetic_pair(4, 1000)
    noisy = make_synthetic_pair(4, 1000, noise=0.25)
    assert np.array_equal(clean.source.points, noisy.source.points)
    resid = noisy.target.points - clean.target.points
    assert 0.2 < resid.std() < 0.3
    assert len(make_synthetic_pairs(3, seed=1)) == 3


def fixed_register(outputs):
    it = iter(outputs)

    def register(source, target, cfg):
        out = next(it)
        if isinstance(out, Exception):
            raise out
        return out
    return register


def offset_pairs(n):
    return [make_synthetic_pair(k, 200) for k in range(n)]


def test_perfect_estimates():
    pairs = offset_pairs(3)
    rep = run_benchmark(pairs, register=fixed_register([p.ground_truth for p in pairs]))
    assert rep.mae("rte_cm") == 0 and rep.rmse("rre_deg") == 0 and rep.recall() == 100.0


def test_mae_and_rmse_closed_form():
    pairs = offset_pairs(2)
    outs = [RigidTransform(p.ground_truth.rotation, p.ground_truth.translation + [d, 0, 0])
            for p, d in zip(pairs, (0.03, 0.05))]
    rep = run_benchmark(pairs, register=fixed_register(outs))
    assert rep.mae("rte_cm") == pytest.approx(4.0, abs=1e-9)
    assert rep.rmse("rte_cm") == pytest.approx(math.sqrt(17), abs=1e-9)
    assert rep.rmse("rte_cm") >= rep.mae("rte_cm")


def test_failed_pair_counts_in_recall_denominator(tmp_path):
    pairs = offset_pairs(10)
    outs = [p.ground_truth for p in pairs[:9]] + [NoCorrespondence("none", stage="matching")]
    rep = run_benchmark(pairs, register=fixed_register(outs), csv_path=tmp_path / "r.csv",
                        cdf_path=tmp_path / "c.csv")
    assert rep.recall() == 90.0 and rep.failures == 1
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert lines[-1].split(",")[-1] == "failed:NoCorrespondence"
    assert len(lines) == 11


def test_recall_thresholds():
    rows = [PairResult("a", 10.0, 1.0, 1.0, "ok"), PairResult("b", 70.0, 1.0, 1.0, "ok"),
            PairResult("c", 10.0, 6.0, 1.0, "ok")]
    rep = BenchmarkReport(rows)
    assert rep.recall() == pytest.approx(100 / 3)
    assert rep.recall(rte_cm=80, rre_deg=10) == 100.0


def test_cdf_is_monotone_and_reaches_one(tmp_path, rng):
    rows = [PairResult(str(i), float(v), float(w), 1.0, "ok") for i, (v, w) in enumerate(rng.uniform(0, 9, (25, 2)))]
    rep = BenchmarkReport(rows)
    vals, probs = rep.cdf("rte_cm")
    assert np.all(np.diff(vals) >= 0) and np.all(np.diff(probs) > 0) and probs[-1] == 1.0
    rep.write_cdf_csv(tmp_path / "cdf.csv")
    lines = (tmp_path / "cdf.csv").read_text().splitlines()
    assert lines[0] == "metric,value,probability" and len(lines) == 51


def test_benchmark_requires_pairs():
    with pytest.raises(ValueError):
        run_benchmark([])
