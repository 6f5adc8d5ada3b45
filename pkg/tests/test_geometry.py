import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffreg.errors import DegenerateConfiguration, MalformedFile
from diffreg.geometry import (
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    compute_metrics,
    inverse,
    random_rotation,
    rotation_about_axis,
    rotation_angle_deg,
    rpy_matrix,
    weighted_svd_fit,
    weighted_svd_fit_batch,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def random_transform(rng, t_scale=5.0):
    return RigidTransform(random_rotation(rng), rng.uniform(-t_scale, t_scale, 3))


def test_identity_apply_leaves_cloud(rng):
    pts = rng.normal(size=(30, 3))
    out = apply_transform(PointCloud(pts), RigidTransform.identity())
    assert np.array_equal(out.points, pts)


def test_yaw_quarter_turn_maps_x_to_y():
    T = RigidTransform(rotation_about_axis("z", np.pi / 2), np.zeros(3))
    out = apply_transform(PointCloud([[1.0, 0.0, 0.0]]), T).points[0]
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-12)


def test_inverse_round_trip(rng):
    pts = rng.normal(size=(100, 3)) * 10
    T = random_transform(rng)
    back = apply_transform(apply_transform(PointCloud(pts), T), inverse(T)).points
    np.testing.assert_allclose(back, pts, atol=1e-10)


def test_intensity_survives_transform(rng):
    cloud = PointCloud(rng.normal(size=(5, 3)), np.arange(5.0))
    assert np.array_equal(apply_transform(cloud, random_transform(rng)).intensity, np.arange(5.0))


def test_compose_identity_and_inverse_identity(rng):
    T = random_transform(rng)
    I = RigidTransform.identity()
    c = compose(I, T)
    assert np.array_equal(c.rotation, T.rotation) and np.array_equal(c.translation, T.translation)
    inv_i = inverse(I)
    assert np.array_equal(inv_i.rotation, np.eye(3)) and np.allclose(inv_i.translation, 0)


def test_compose_with_inverse_is_identity_for_100_transforms(rng):
    for _ in range(100):
        T = random_transform(rng)
        c = compose(T, inverse(T))
        np.testing.assert_allclose(c.rotation, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(c.translation, 0.0, atol=1e-10)


def test_compose_order_applies_second_argument_first(rng):
    T1, T2 = random_transform(rng), random_transform(rng)
    p = rng.normal(size=(4, 3))
    np.testing.assert_allclose(compose(T1, T2).apply(p), T1.apply(T2.apply(p)), atol=1e-12)


def test_svd_fit_on_identical_sets_is_identity(rng):
    pts = rng.normal(size=(12, 3))
    T = weighted_svd_fit(pts, pts)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-10)


def test_svd_fit_exact_recovery_ten_points(rng):
    src = rng.normal(size=(10, 3)) * 4
    T = random_transform(rng)
    m = compute_metrics(weighted_svd_fit(src, T.apply(src)), T)
    assert m.rre_deg < 1e-6
    assert m.rte_cm / 100 < 1e-7


def test_svd_fit_ignores_zero_weight_outlier(rng):
    src = rng.normal(size=(5, 3)) * 3
    T = random_transform(rng)
    dst = T.apply(src)
    dst[4] += np.array([7.0, -3.0, 2.0])
    w = np.array([1.0, 0.5, 2.0, 1.0, 0.0])
    m = compute_metrics(weighted_svd_fit(src, dst, w), T)
    assert m.rre_deg < 1e-6 and m.rte_cm < 1e-5


def test_two_effective_pairs_are_rank_deficient(rng):
    # two weighted pairs leave the rotation about their joining line free
    src = rng.normal(size=(3, 3))
    T = random_transform(rng)
    dst = T.apply(src)
    dst[2] += 5.0
    with pytest.raises(DegenerateConfiguration):
        weighted_svd_fit(src, dst, [1.0, 1.0, 0.0])


def test_svd_fit_rejects_collinear_and_zero_weights():
    line = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        weighted_svd_fit(line, line + 1.0)
    pts = np.eye(3)
    with pytest.raises(DegenerateConfiguration):
        weighted_svd_fit(pts, pts, np.zeros(3))


def test_svd_fit_corrects_reflection(rng):
    src = rng.normal(size=(20, 3))
    dst = src * np.array([1.0, 1.0, -1.0])
    T = weighted_svd_fit(src, dst)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-9)


def test_batch_fit_matches_single_fit(rng):
    src = rng.normal(size=(6, 9, 3))
    dst = rng.normal(size=(6, 9, 3))
    w = rng.uniform(0, 1, size=(6, 9))
    R, t, valid = weighted_svd_fit_batch(src, dst, w)
    assert valid.all()
    for b in range(6):
        T = weighted_svd_fit(src[b], dst[b], w[b])
        np.testing.assert_allclose(R[b], T.rotation, atol=1e-10)
        np.testing.assert_allclose(t[b], T.translation, atol=1e-10)


def test_metrics_zero_for_equal_transforms(rng):
    T = random_transform(rng)
    m = compute_metrics(T, T)
    assert m.rte_cm == 0.0 and m.rre_deg == 0.0


def test_metrics_one_degree_one_centimeter():
    est = RigidTransform(rotation_about_axis("z", np.radians(1.0)), [0.01, 0.0, 0.0])
    m = compute_metrics(est, RigidTransform.identity())
    assert m.rte_cm == pytest.approx(1.0, abs=1e-9)
    assert m.rre_deg == pytest.approx(1.0, abs=1e-9)


def test_metrics_antipodal():
    T = RigidTransform(rpy_matrix(0.1, 0.2, 0.3), [1, 2, 3])
    flipped = RigidTransform(T.rotation @ rotation_about_axis("z", np.pi), T.translation)
    assert compute_metrics(flipped, T).rre_deg == pytest.approx(180.0, abs=1e-9)


def test_rotation_angle_matches_arccos_definition(rng):
    for _ in range(50):
        A, B = random_rotation(rng), random_rotation(rng)
        ref = np.degrees(np.arccos(np.clip((np.trace(A.T @ B) - 1) / 2, -1, 1)))
        assert rotation_angle_deg(A, B) == pytest.approx(ref, abs=1e-6)


def test_transform_line_round_trip(rng):
    T = random_transform(rng)
    back = RigidTransform.from_line(T.to_line())
    assert np.array_equal(back.rotation, T.rotation) and np.array_equal(back.translation, T.translation)
    with pytest.raises(MalformedFile):
        RigidTransform.from_line("1 2 3")


@given(seeds)
def test_transform_is_isometry(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(15, 3)) * 10
    out = random_transform(rng).apply(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-9)


@given(seeds, st.floats(min_value=1e-3, max_value=1e3))
def test_svd_fit_invariant_to_weight_scale(seed, scale):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(8, 3))
    dst = rng.normal(size=(8, 3))
    w = rng.uniform(0.1, 1.0, 8)
    a = weighted_svd_fit(src, dst, w)
    b = weighted_svd_fit(src, dst, w * scale)
    np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-9)
    np.testing.assert_allclose(a.translation, b.translation, atol=1e-9)


@given(seeds)
def test_svd_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(10, 3)) * rng.uniform(0.5, 20)
    T = random_transform(rng)
    est = weighted_svd_fit(src, T.apply(src))
    m = compute_metrics(est, T)
    assert m.rre_deg < 1e-6 and m.rte_cm / 100 < 1e-7
    assert est.is_valid(1e-9)
