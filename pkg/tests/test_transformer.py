import numpy as np
import pytest
from scipy.linalg import expm
from hypothesis import given
from hypothesis import strategies as st

from diffreg.descriptor import PairedState
from diffreg.errors import ShapeMismatch
from diffreg.ode import integrate, integrate_fixed
from diffreg.params import ModelParams
from diffreg.transformer import (
    AttentionParams,
    OdeConfig,
    attention_logits,
    coupled_rhs,
    cross_attention,
    row_normalize,
    self_attention,
    self_attention_block,
    softmax_rows,
    transformer_ode,
)


def small_params(seed=0, dim=4, heads=2, head_dim=2, **zeroed):
    p = AttentionParams(dim=dim, heads=heads, head_dim=head_dim, seed=seed)
    if zeroed:
        p = p.replace(**{k: np.zeros_like(p[k]) for k in zeroed})
    return p


def oracle_norm(x, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        m = sum(row) / len(row)
        v = sum((r - m) ** 2 for r in row) / len(row)
        out[i] = [(r - m) / np.sqrt(v + eps) for r in row]
    return out


def plain_attention(q_in, kv_in, wq, wk, wv, w_out):
    """Textbook multi-head scaled dot-product attention, one head and one row at a time."""
    heads = []
    for h in range(wq.shape[0]):
        q, k, v = q_in @ wq[h], kv_in @ wk[h], kv_in @ wv[h]
        rows = []
        for i in range(q.shape[0]):
            scores = np.array([q[i] @ k[j] for j in range(k.shape[0])]) / np.sqrt(wq.shape[2])
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            rows.append(sum(a[j] * v[j] for j in range(v.shape[0])))
        heads.append(np.array(rows))
    return np.concatenate(heads, axis=1) @ w_out


def random_state(rng, n, d=4):
    return PairedState(rng.normal(size=(n, d)), rng.normal(size=(n, d)))


def test_single_node_attention_weight_is_one(rng):
    p = small_params(1)
    out, w = self_attention(random_state(rng, 1), p, return_weights=True)
    assert np.all(w == 1.0)
    assert np.all(np.isfinite(out))


def test_zero_position_path_reduces_to_plain_attention(rng):
    p = small_params(2, seq=True, sek=True)
    s = PairedState(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    fn = oracle_norm(s.features)
    expected = plain_attention(fn, fn, p["sq"], p["sk"], p["sv"], p["s_out"])
    np.testing.assert_allclose(self_attention(s, p), expected, atol=1e-9)


def test_logit_shift_leaves_softmax_unchanged(rng):
    L = rng.normal(size=(2, 5, 6))
    np.testing.assert_allclose(softmax_rows(L + 7.5), softmax_rows(L), atol=1e-14)
    np.testing.assert_allclose(softmax_rows(L + rng.normal(size=(2, 5, 1))), softmax_rows(L), atol=1e-14)


def test_combined_logits_add_feature_and_position_terms(rng):
    p = small_params(3)
    f, e = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    full = attention_logits(f, f, f, e, p["sq"], p["sk"], p["seq"], p["sek"])
    feat = attention_logits(f, f, f, e, p["sq"], p["sk"], 0 * p["seq"], p["sek"])
    pos = attention_logits(f, f, f, e, 0 * p["sq"], p["sk"], p["seq"], p["sek"])
    np.testing.assert_allclose(full, feat + pos, atol=1e-12)


def test_block_with_zero_ffn_is_normalized_residual(rng):
    p = small_params(4, ffn_s1=True, ffn_s1b=True, ffn_s2=True, ffn_s2b=True)
    s = random_state(rng, 5)
    expected = oracle_norm(s.features + self_attention(s, p))
    np.testing.assert_allclose(self_attention_block(s, p), expected, atol=1e-12)


def test_block_hand_computed_two_by_four():
    dim, f = 4, 2
    eye = np.eye(4)[None]
    weights = {name: np.zeros((1, 4, 4)) for name in ("seq", "sek", "cq", "ck", "cv", "ceq", "cek")}
    weights.update(sq=eye * 0, sk=eye * 0, sv=eye, s_out=np.eye(4), c_out=np.eye(4))
    weights.update(
        ffn_s1=np.array([[1.0, 0], [0, 1], [0, 0], [0, 0]]), ffn_s1b=np.zeros(f),
        ffn_s2=np.array([[1.0, 0, 0, 0], [0, 0, 0, -1]]), ffn_s2b=np.zeros(dim),
        ffn_c1=np.zeros((4, f)), ffn_c1b=np.zeros(f), ffn_c2=np.zeros((f, 4)), ffn_c2b=np.zeros(4),
        fc1=np.zeros((4, 4)), fc1b=np.zeros(4), fc2=np.zeros((4, 4)), fc2b=np.zeros(4),
    )
    p = AttentionParams(dim=4, heads=1, head_dim=4, ffn_hidden=f, weights=weights)
    F = np.array([[1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0]])
    s = PairedState(F, np.zeros((2, 4)))
    # zero queries/keys: uniform attention, so each row attends to the mean of the normalized rows
    fn = oracle_norm(F)
    att = np.tile(fn.mean(axis=0), (2, 1))
    x = oracle_norm(F + att)
    ffn = np.maximum(x[:, :2], 0) @ np.array([[1.0, 0, 0, 0], [0, 0, 0, -1]])
    np.testing.assert_allclose(self_attention_block(s, p), x + ffn, atol=1e-12)
    # the two normalized rows are negatives of each other, so their mean is zero
    np.testing.assert_allclose(att, 0.0, atol=1e-12)


def test_cross_attention_single_key_broadcasts_value(rng):
    p = small_params(5)
    su = random_state(rng, 4)
    v_att, v_pos = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    out, w = cross_attention(su, v_att, v_pos, p, return_weights=True)
    assert np.all(w == 1.0)
    vn = oracle_norm(v_att)
    row = np.concatenate([vn @ p["cv"][h] for h in range(2)], axis=1) @ p["c_out"]
    np.testing.assert_allclose(out, np.tile(row, (4, 1)), atol=1e-12)


def test_cross_attention_zero_position_path_is_plain(rng):
    p = small_params(6, ceq=True, cek=True)
    su = random_state(rng, 3)
    v_att, v_pos = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    att_u = self_attention(su, p)
    expected = plain_attention(oracle_norm(att_u), oracle_norm(v_att), p["cq"], p["ck"], p["cv"], p["c_out"])
    np.testing.assert_allclose(cross_attention(su, v_att, v_pos, p), expected, atol=1e-9)


def test_cross_attention_shape_checks(rng):
    p = small_params(6)
    with pytest.raises(ShapeMismatch):
        cross_attention(random_state(rng, 3), rng.normal(size=(4, 4)), rng.normal(size=(3, 4)), p)
    with pytest.raises(ShapeMismatch):
        self_attention(random_state(rng, 3, d=5), p)


def test_coupled_rhs_swap_symmetry(rng):
    p = small_params(7)
    su, sv = random_state(rng, 5), random_state(rng, 3)
    du, dv = coupled_rhs(su, sv, p)
    dv2, du2 = coupled_rhs(sv, su, p)
    np.testing.assert_allclose(du.stacked(), du2.stacked(), atol=1e-12)
    np.testing.assert_allclose(dv.stacked(), dv2.stacked(), atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_attention_rows_are_stochastic(seed):
    rng = np.random.default_rng(seed)
    p = small_params(seed % 11, dim=8, heads=3, head_dim=4)
    su = random_state(rng, int(rng.integers(1, 9)), 8)
    _, w = self_attention(su, p, return_weights=True)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    _, wc = cross_attention(su, rng.normal(size=(6, 8)), rng.normal(size=(6, 8)), p, return_weights=True)
    np.testing.assert_allclose(wc.sum(axis=-1), 1.0, atol=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_permuting_u_permutes_u_and_fixes_v(seed):
    rng = np.random.default_rng(seed)
    p = small_params(3, dim=8, heads=2, head_dim=4)
    su, sv = random_state(rng, 6, 8), random_state(rng, 4, 8)
    perm = rng.permutation(6)
    du, dv = coupled_rhs(su, sv, p)
    du_p, dv_p = coupled_rhs(PairedState(su.features[perm], su.positions[perm]), sv, p)
    np.testing.assert_allclose(du_p.stacked(), du.stacked()[perm], atol=1e-10)
    np.testing.assert_allclose(dv_p.stacked(), dv.stacked(), atol=1e-10)


def test_ode_zero_time_is_identity(rng):
    p = small_params(8)
    su, sv = random_state(rng, 3), random_state(rng, 4)
    ou, ov = transformer_ode(su, sv, p, OdeConfig(t_final=0.0))
    assert np.array_equal(ou.stacked(), su.stacked()) and np.array_equal(ov.stacked(), sv.stacked())


def test_ode_linear_decay(rng):
    p = small_params(9)
    su, sv = random_state(rng, 3), random_state(rng, 4)
    ou, ov = transformer_ode(su, sv, p, OdeConfig(t_final=2.0), rhs=lambda t, y: -y)
    for out, s in ((ou, su), (ov, sv)):
        exact = s.stacked() * np.exp(-2.0)
        assert np.all(np.abs(out.stacked() - exact) <= 0.01 * np.abs(exact) + 0.01)


def test_ode_identical_sides_stay_identical(rng):
    p = small_params(10)
    s = random_state(rng, 5)
    ou, ov = transformer_ode(s, s.copy(), p)
    assert np.array_equal(ou.stacked(), ov.stacked())


def test_integrator_order():
    f = lambda t, y: -y + np.sin(t)  # noqa: E731
    y0 = np.array([1.0])
    exact = (1.5 * np.exp(-1.0) + 0.5 * (np.sin(1.0) - np.cos(1.0)))
    e1 = abs(integrate_fixed(f, y0, 1.0, 4, order="low")[0] - exact)
    e2 = abs(integrate_fixed(f, y0, 1.0, 8, order="low")[0] - exact)
    assert e1 / e2 >= 8.0


def random_linear_system(rng):
    """``y' = A y`` mixing a rotating/decaying pair with a real mode, in a random basis."""
    a, w, lam = rng.uniform(-1.5, 0.5), rng.uniform(-2.0, 2.0), rng.uniform(-3.0, 1.0)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    A = Q @ np.array([[a, w, 0.0], [-w, a, 0.0], [0.0, 0.0, lam]]) @ Q.T
    return A, rng.normal(size=(3, 4)) * rng.uniform(0.1, 5.0), rng.uniform(0.5, 2.0)


@given(st.integers(0, 2**31 - 1))
def test_integrator_meets_tolerance_on_linear_systems(seed):
    A, y0, t_final = random_linear_system(np.random.default_rng(seed))
    y, _ = integrate(lambda t, y: A @ y, y0, t_final, rtol=0.01, atol=0.01)
    exact = expm(t_final * A) @ y0
    assert np.all(np.abs(y - exact) <= 0.01 * np.abs(exact) + 0.01)


def test_row_normalize_moments(rng):
    x = rng.normal(size=(6, 10)) * 5 + 3
    y = row_normalize(x)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5)


def test_attention_params_round_trip(tmp_path):
    p = AttentionParams(dim=16, heads=2, head_dim=8, seed=4)
    p.to_model().save(tmp_path / "a.pdnw")
    q = AttentionParams.from_model(ModelParams.load(tmp_path / "a.pdnw"))
    assert q.heads == 2 and q.head_dim == 8 and q.seed == 4
    for k in p.weights:
        assert np.array_equal(p[k], q[k])


def test_attention_params_validate_shapes():
    p = AttentionParams(dim=8, heads=2, head_dim=4)
    with pytest.raises(ShapeMismatch):
        p.replace(sq=np.zeros((2, 8, 3)))
