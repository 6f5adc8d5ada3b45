import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffreg.descriptor import PairedState
from diffreg.diffusion import (
    LEAKY_SLOPE,
    DiffusionParams,
    KnnGraph,
    build_knn_graph,
    diffuse,
    diffusion_rhs,
    edgeconv_forward,
    explicit_step,
    softmax_attention,
)
from diffreg.errors import ShapeMismatch, StabilityViolation
from diffreg.params import ModelParams


def brute_knn(X, k):
    d = np.linalg.norm(X[:, None] - X[None], axis=-1)
    out = []
    for i in range(len(X)):
        order = sorted((d[i, j], j) for j in range(len(X)) if j != i)[:k]
        out.append([j for _, j in order])
    return np.array(out)


def random_state(rng, n, d):
    return PairedState(rng.normal(size=(n, d)), rng.normal(size=(n, d)))


def test_knn_collinear_points():
    X = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    g = build_knn_graph(X, 1)
    assert g.indices[1, 0] == 0
    assert g.distances[1, 0] == pytest.approx(1.0)


def test_knn_saturates_to_complete_graph(rng):
    X = rng.normal(size=(6, 4))
    g = build_knn_graph(X, 15)
    assert g.k == 5
    for i in range(6):
        assert sorted(g.indices[i].tolist()) == [j for j in range(6) if j != i]


def test_knn_matches_brute_force(rng):
    X = rng.normal(size=(500, 8))
    g = build_knn_graph(X, 15)
    np.testing.assert_array_equal(g.indices, brute_knn(X, 15))
    assert np.all(np.diff(g.distances, axis=1) >= 0)
    assert not np.any(g.indices == np.arange(500)[:, None])


def test_knn_ties_go_to_lower_index():
    X = np.array([[0.0], [1.0], [-1.0], [2.0]])
    g = build_knn_graph(X, 2)
    assert g.indices[0].tolist() == [1, 2]


def test_rhs_homogeneous_state_is_node_constant(rng):
    params = DiffusionParams(dim=4, k=3, seed=1)
    row = rng.normal(size=8)
    z = np.tile(row, (7, 1))
    state = PairedState.from_stacked(z)
    g = build_knn_graph(state.positions, 3)
    out = diffusion_rhs(state, g, params).stacked()
    np.testing.assert_allclose(out, np.tile(out[0], (7, 1)), atol=1e-14)


def test_rhs_zero_weights_is_zero(rng):
    params = DiffusionParams(dim=4, k=3, seed=1).zeroed()
    state = random_state(rng, 9, 4)
    g = build_knn_graph(state.positions, 3)
    assert np.all(diffusion_rhs(state, g, params).stacked() == 0)


def leaky(x, s):
    return np.where(x > 0, x, s * x)


def test_rhs_two_node_hand_forward():
    # dim 1: stacked width 2, hidden 2; weights chosen by hand
    w1 = np.array([[0.5, -1.0], [0.25, 0.0], [1.0, 0.5], [-0.5, 2.0]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, -0.5], [0.25, 0.75], [1.0, 1.0], [-1.0, 0.0]])
    b2 = np.array([0.0, 0.3])
    params = DiffusionParams(dim=1, hidden=2, k=1, diffusivity=0.0, w1=w1, b1=b1, w2=w2, b2=b2)
    z = np.array([[1.0, 2.0], [-1.0, 0.5]])
    g = KnnGraph(2, 1, np.array([[1], [0]]), np.array([[1.0], [1.0]]))
    expected = np.zeros((2, 2))
    h = np.zeros((2, 2))
    for i in range(2):
        j = 1 - i
        h[i] = leaky(np.concatenate([z[i], z[j] - z[i]]) @ w1 + b1, LEAKY_SLOPE)
    for i in range(2):
        j = 1 - i
        expected[i] = np.concatenate([h[i], h[j] - h[i], z[i]]) @ w2 + b2
    np.testing.assert_allclose(edgeconv_forward(z, g, params), expected, atol=1e-14)
    # by hand for node 0: layer 1 = leaky([1,2,-2,-1.5] @ w1 + b1)
    np.testing.assert_allclose(h[0], [LEAKY_SLOPE * (0.1 + 0.5 + 0.5 - 2.0 + 0.75),
                                      LEAKY_SLOPE * (-0.2 - 1.0 - 1.0 - 3.0)], atol=1e-15)


def test_rhs_shape_mismatch(rng):
    params = DiffusionParams(dim=4, k=3)
    state = random_state(rng, 5, 3)
    g = build_knn_graph(state.positions, 3)
    with pytest.raises(ShapeMismatch):
        diffusion_rhs(state, g, params)


def test_diffuse_zero_time_is_identity(rng):
    params = DiffusionParams(dim=4, k=3, t_final=0.0, seed=2)
    state = random_state(rng, 10, 4)
    out = diffuse(state, params)
    assert np.array_equal(out.stacked(), state.stacked())


def test_diffuse_linear_rhs_matches_exponential(rng):
    params = DiffusionParams(dim=3, k=2, t_final=1.0)
    state = random_state(rng, 12, 3)
    out = diffuse(state, params, rhs=lambda t, z, g: -z).stacked()
    exact = state.stacked() * np.exp(-1.0)
    assert np.all(np.abs(out - exact) <= 0.01 * np.abs(exact) + 0.01)


def test_diffuse_is_deterministic_and_rewires(rng):
    params = DiffusionParams(dim=8, k=4, seed=3)
    state = random_state(rng, 40, 8)
    a = diffuse(state, params, return_info=True)
    b = diffuse(state, params, return_info=True)
    assert a.state.stacked().tobytes() == b.state.stacked().tobytes()
    # one graph per attempted step start (initial state plus every accepted step but the last)
    assert a.graphs_built == a.stats.accepted
    assert a.stats.accepted >= 1


def test_explicit_step_constant_state_fixed(rng):
    z = np.tile(rng.normal(size=6), (20, 1))
    g = build_knn_graph(rng.normal(size=(20, 3)), 4)
    np.testing.assert_allclose(explicit_step(z, g, tau=0.9), z, atol=1e-12)


def test_explicit_step_two_nodes_meet_at_midpoint():
    z = np.array([[0.0, 4.0], [2.0, -2.0]])
    g = KnnGraph(2, 1, np.array([[1], [0]]), np.ones((2, 1)))
    out = explicit_step(z, g, attention=np.ones((2, 1)), tau=0.5)
    np.testing.assert_allclose(out, [[1.0, 1.0], [1.0, 1.0]], atol=1e-15)


def test_explicit_step_rejects_unstable_weights(rng):
    z = rng.normal(size=(5, 2))
    g = build_knn_graph(z, 2)
    with pytest.raises(StabilityViolation):
        explicit_step(z, g, attention=np.full((5, 2), 0.8), tau=1.0)
    with pytest.raises(StabilityViolation):
        explicit_step(z, g, attention=-np.ones((5, 2)) * 0.1, tau=1.0)


def test_softmax_attention_rows_sum_to_one(rng):
    z = rng.normal(size=(30, 5))
    a = softmax_attention(z, build_knn_graph(z, 6))
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
def test_explicit_step_max_norm_non_expansion(seed, tau):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(25, 4)) * rng.uniform(0.1, 10)
    g = build_knn_graph(z[:, 2:], 5)
    out = explicit_step(z, g, tau=tau)
    assert np.abs(out).max() <= np.abs(z).max()


def test_params_round_trip_through_model_file(tmp_path):
    p = DiffusionParams(dim=8, k=5, t_final=0.5, diffusivity=0.3, seed=11)
    path = tmp_path / "d.pdnw"
    p.to_model().save(path)
    q = DiffusionParams.from_model(ModelParams.load(path))
    assert q.k == 5 and q.t_final == 0.5 and q.diffusivity == 0.3 and q.seed == 11
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(p, name), getattr(q, name))


def test_params_validation():
    with pytest.raises(ValueError):
        DiffusionParams(dim=4, tau=1.5)
    with pytest.raises(ValueError):
        DiffusionParams(dim=4, t_final=-1.0)
    with pytest.raises(ShapeMismatch):
        DiffusionParams(dim=4, w1=np.zeros((3, 3)), b1=np.zeros(8), w2=np.zeros((24, 8)), b2=np.zeros(8))
