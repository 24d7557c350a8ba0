import numpy as np
import pytest

from partview import tensor as T
from partview.attention import (
    AttentionMode,
    classification_loss,
    classify,
    export_attention_maps,
    gru_step,
    init_attention_params,
    normalize_heatmap,
    one_hot,
    part_attention,
    shape_forward,
    total_loss,
    view_attention,
    view_feature_enhance,
)
from partview.errors import ConfigError, DimensionError
from partview.gradcheck import grad_check
from partview.imageio import read_pgm
from partview.optim import ParamStore
from partview.tensor import Tensor


def make_params(d=6, h=8, c=3, seed=0):
    store = ParamStore()
    init_attention_params(store, d, h, c, np.random.default_rng(seed))
    return store


# ---------------------------------------------------------------------------
# oracles


def part_attention_oracle(parts, s_p):
    """Direct nested evaluation of the bilinear attention equations."""
    k = parts.shape[0]
    scores = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            scores[i, j] = parts[i] @ s_p @ parts[j]
    q = np.zeros_like(scores)
    for i in range(k):
        e = np.exp(scores[i] - scores[i].max())
        q[i] = e / e.sum()
    context = np.zeros_like(parts)
    for i in range(k):
        for j in range(k):
            context[i] += q[i, j] * parts[j]
    return context.sum(axis=0), q


def gru_oracle(h_prev, x, store):
    def lin(gate, inp, hid):
        return (inp @ store[f"att.gru.{gate}.w"].data
                + hid @ store[f"att.gru.{gate}.u"].data
                + store[f"att.gru.{gate}.b"].data)

    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    z = sig(lin("update", x, h_prev))
    r = sig(lin("reset", x, h_prev))
    cand = np.tanh(x @ store["att.gru.candidate.w"].data
                   + (r * h_prev) @ store["att.gru.candidate.u"].data
                   + store["att.gru.candidate.b"].data)
    return (1 - z) * h_prev + z * cand


# ---------------------------------------------------------------------------
# part-level attention


def test_part_attention_single_part_is_identity():
    store = make_params()
    parts = Tensor(np.random.default_rng(1).normal(size=(1, 6)))
    f_i, q = part_attention(parts, store["att.part_bilinear"])
    assert np.array_equal(q.data, [[1.0]])
    assert np.array_equal(f_i.data, parts.data)


def test_part_attention_identical_parts_sum():
    store = make_params()
    u = np.random.default_rng(2).normal(size=6)
    parts = Tensor(np.tile(u, (4, 1)))
    f_i, q = part_attention(parts, store["att.part_bilinear"])
    assert np.allclose(q.data, 0.25, atol=1e-12)
    assert np.allclose(f_i.data, 4 * u, atol=1e-12)


def test_part_attention_hand_case_k2_identity_matrix():
    parts = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    s_p = Tensor(np.eye(2))
    f_i, q = part_attention(parts, s_p)
    want_f, want_q = part_attention_oracle(parts.data, s_p.data)
    assert np.allclose(q.data[0], [np.exp(1) / (np.exp(1) + 1), 1 / (np.exp(1) + 1)], atol=1e-12)
    assert np.allclose(q.data, want_q, atol=1e-12)
    assert np.allclose(f_i.data[0], want_f, atol=1e-12)


def test_part_attention_matches_oracle_randomized():
    rng = np.random.default_rng(3)
    for _ in range(10):
        k, d = int(rng.integers(1, 7)), int(rng.integers(2, 8))
        parts = rng.normal(size=(k, d))
        s_p = rng.normal(size=(d, d))
        f_i, q = part_attention(Tensor(parts), Tensor(s_p))
        want_f, want_q = part_attention_oracle(parts, s_p)
        assert np.allclose(q.data, want_q, atol=1e-12)
        assert np.allclose(f_i.data[0], want_f, atol=1e-12)


def test_part_attention_dimension_error():
    with pytest.raises(DimensionError):
        part_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 4))))


def test_attention_rows_sum_to_one_and_shift_invariance():
    rng = np.random.default_rng(5)
    parts = rng.normal(size=(5, 6)) * 3
    s_p = rng.normal(size=(6, 6))
    _, q = part_attention(Tensor(parts), Tensor(s_p))
    assert np.allclose(q.data.sum(axis=1), 1.0, atol=1e-10)
    # adding a constant to every bilinear score of a row leaves q unchanged
    scores = parts @ s_p @ parts.T
    shifted = T.softmax(Tensor(scores + 7.5), axis=1)
    assert np.allclose(q.data, shifted.data, atol=1e-12)


def test_part_attention_permutation_equivariance():
    rng = np.random.default_rng(7)
    parts = rng.normal(size=(5, 4))
    s_p = rng.normal(size=(4, 4))
    base, _ = part_attention(Tensor(parts), Tensor(s_p))
    for _ in range(5):
        perm = rng.permutation(5)
        out, _ = part_attention(Tensor(parts[perm]), Tensor(s_p))
        assert np.allclose(out.data, base.data, atol=1e-12)


# ---------------------------------------------------------------------------
# view-level attention


def test_view_attention_single_view():
    store = make_params()
    views = Tensor(np.random.default_rng(8).normal(size=(1, 6)))
    f, theta = view_attention(views, store["att.view_bilinear"])
    assert np.array_equal(theta.data, [[1.0]])
    assert np.array_equal(f.data, views.data)


def test_view_attention_identical_views():
    store = make_params()
    u = np.random.default_rng(9).normal(size=6)
    views = Tensor(np.tile(u, (3, 1)))
    f, _ = view_attention(views, store["att.view_bilinear"])
    assert np.allclose(f.data, 3 * u, atol=1e-12)


def test_na_mode_collapses_to_plain_sums():
    rng = np.random.default_rng(10)
    store = make_params()
    parts = [Tensor(rng.normal(size=(4, 6))) for _ in range(3)]
    f_is = []
    for p in parts:
        f_i, _ = part_attention(p, store["att.part_bilinear"], AttentionMode.NA)
        assert np.allclose(f_i.data[0], p.data.sum(axis=0), atol=1e-12)
        f_is.append(f_i)
    views = T.concat(f_is, axis=0)
    f, _ = view_attention(views, store["att.view_bilinear"], AttentionMode.NA)
    assert np.allclose(f.data[0], views.data.sum(axis=0), atol=1e-12)


# ---------------------------------------------------------------------------
# GRU


def test_gru_zero_state_zero_input_zero_bias():
    store = make_params()
    h = gru_step(T.zeros((1, 8)), T.zeros((1, 6)), store)
    assert np.array_equal(h.data, np.zeros((1, 8)))


def test_gru_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    store = make_params(d=2, h=2, seed=4)
    # give biases nonzero values so all gate terms are exercised
    for gate in ("update", "reset", "candidate"):
        store[f"att.gru.{gate}.b"].data[:] = rng.normal(size=(1, 2))
    h_prev = rng.normal(size=(1, 2))
    x = rng.normal(size=(1, 2))
    got = gru_step(Tensor(h_prev), Tensor(x), store)
    assert np.allclose(got.data, gru_oracle(h_prev, x, store), atol=1e-12)


def test_gru_saturated_update_gate_keeps_state():
    store = make_params()
    store["att.gru.update.b"].data[:] = -50.0  # z ~ 0 -> h ~ h_prev
    rng = np.random.default_rng(12)
    h_prev = rng.normal(size=(1, 8))
    x = rng.normal(size=(1, 6))
    h = gru_step(Tensor(h_prev), Tensor(x), store)
    assert np.allclose(h.data, h_prev, atol=1e-6)


# ---------------------------------------------------------------------------
# view feature enhancement


def test_enhance_single_view():
    store = make_params()
    rng = np.random.default_rng(13)
    views = Tensor(rng.normal(size=(1, 6)))
    f = Tensor(rng.normal(size=(1, 6)))
    g, ys = view_feature_enhance(views, f, store)
    h1 = gru_oracle(np.zeros((1, 8)), views.data + f.data, store)
    want = h1 @ store["att.out_proj"].data
    assert np.allclose(g.data, want, atol=1e-12)
    assert ys.shape == (1, 6)


def test_enhance_nr_mode_returns_global_feature_bitwise():
    store = make_params()
    rng = np.random.default_rng(14)
    views = Tensor(rng.normal(size=(4, 6)))
    f = Tensor(rng.normal(size=(1, 6)))
    g, ys = view_feature_enhance(views, f, store, AttentionMode.NR)
    assert g is f
    assert ys is None


def test_enhance_matches_unrolled_oracle():
    store = make_params()
    rng = np.random.default_rng(15)
    views = rng.normal(size=(3, 6))
    f = rng.normal(size=(1, 6))
    g, ys = view_feature_enhance(Tensor(views), Tensor(f), store)
    h = np.zeros((1, 8))
    outs = []
    for t in range(3):
        h = gru_oracle(h, views[t:t + 1] + f, store)
        outs.append(h @ store["att.out_proj"].data)
    stacked = np.concatenate(outs, axis=0)
    assert np.allclose(ys.data, stacked, atol=1e-12)
    assert np.allclose(g.data, stacked.max(axis=0, keepdims=True), atol=1e-12)


def test_max_over_step_outputs_is_permutation_invariant():
    rng = np.random.default_rng(16)
    ys = rng.normal(size=(6, 5))
    base = T.reduce_max(Tensor(ys), axis=0, keepdims=True).data
    for _ in range(5):
        shuffled = ys[rng.permutation(6)]
        assert np.array_equal(T.reduce_max(Tensor(shuffled), axis=0, keepdims=True).data, base)


# ---------------------------------------------------------------------------
# classifier and losses


def test_classify_zero_weights_uniform():
    store = make_params(c=4)
    store["att.cls.w"].data[:] = 0.0
    p = classify(Tensor(np.random.default_rng(17).normal(size=(1, 6))), store)
    assert np.allclose(p.data, 0.25, atol=1e-12)


def test_classify_huge_bias_picks_class():
    store = make_params(c=3)
    store["att.cls.b"].data[:] = [[0.0, 500.0, 0.0]]
    p = classify(Tensor(np.zeros((1, 6))), store)
    assert p.data[0, 1] > 1 - 1e-12


def test_classify_matches_formula():
    rng = np.random.default_rng(18)
    store = make_params(c=5)
    g = rng.normal(size=(1, 6))
    p = classify(Tensor(g), store)
    logits = g @ store["att.cls.w"].data + store["att.cls.b"].data
    e = np.exp(logits - logits.max())
    assert np.allclose(p.data, e / e.sum(), atol=1e-12)


def test_classification_loss_confident_correct_is_zero():
    p = Tensor(np.array([[0.0, 1.0, 0.0]]))
    assert float(classification_loss(p, one_hot(1, 3)).data) == 0.0


def test_classification_loss_uniform_13_classes():
    p = Tensor(np.full((1, 13), 1.0 / 13.0))
    loss = classification_loss(p, one_hot(4, 13))
    assert abs(float(loss.data) - np.log(13.0)) < 1e-12


def test_total_loss_arithmetic():
    mk = lambda v: Tensor(np.asarray(v))
    assert float(total_loss(mk(0.5), mk(0.5), psi=1.0).data) == 1.0
    assert float(total_loss(mk(0.7), mk(123.0), psi=0.0).data) == 0.7
    assert float(total_loss(mk(1.0), mk(3.0), psi=2.0).data) == 7.0


# ---------------------------------------------------------------------------
# full pipeline, modes, gradients


def build_forward(store, rng, k=3, v=4, d=6, mode=AttentionMode.FULL):
    parts = [Tensor(rng.normal(size=(k, d))) for _ in range(v)]
    return lambda: classification_loss(
        shape_forward(store, parts, mode).probabilities, one_hot(1, 3))


def test_every_mode_produces_valid_probabilities():
    rng = np.random.default_rng(19)
    store = make_params()
    parts = [Tensor(rng.normal(size=(3, 6))) for _ in range(4)]
    for mode in AttentionMode:
        out = shape_forward(store, parts, mode)
        assert abs(float(np.sum(out.probabilities.data)) - 1.0) < 1e-10
        assert len(out.part_attention_maps) == 4
        assert out.view_attention_map.shape == (4, 4)


def test_nr_mode_shape_feature_is_global_feature():
    rng = np.random.default_rng(20)
    store = make_params()
    parts = [Tensor(rng.normal(size=(3, 6))) for _ in range(4)]
    out = shape_forward(store, parts, AttentionMode.NR)
    assert out.shape_feature is out.global_feature


def test_end_to_end_gradients_all_parameters():
    # K=3, V=4, D=6, H=8, C=3 against central differences
    rng = np.random.default_rng(21)
    store = make_params(d=6, h=8, c=3, seed=9)
    f = build_forward(store, rng)
    assert grad_check(f, store, max_coords=4, rng=rng) < 1e-4


def test_mode_parsing():
    assert AttentionMode.parse("FULL") is AttentionMode.FULL
    assert AttentionMode.parse("nr") is AttentionMode.NR
    with pytest.raises(ConfigError):
        AttentionMode.parse("bogus")


# ---------------------------------------------------------------------------
# heatmap export


def test_export_uniform_matrix_all_zero(tmp_path):
    qp, tp = export_attention_maps(np.full((5, 5), 0.2), np.full((3, 3), 0.7), str(tmp_path))
    assert np.array_equal(read_pgm(qp), np.zeros((5, 5)))
    assert np.array_equal(read_pgm(tp), np.zeros((3, 3)))


def test_export_full_scale_heatmap_sizes(tmp_path):
    rng = np.random.default_rng(22)
    qp, tp = export_attention_maps(rng.random((20, 20)), rng.random((12, 12)), str(tmp_path))
    assert read_pgm(qp).shape == (20, 20)
    assert read_pgm(tp).shape == (12, 12)


def test_export_identity_dominant_bright_diagonal(tmp_path):
    m = np.eye(6) * 5.0 + 0.1
    qp, _ = export_attention_maps(m, np.eye(3), str(tmp_path), stem="diag_")
    img = read_pgm(qp)
    assert np.all(np.diag(img) == 1.0)
    off = img[~np.eye(6, dtype=bool)]
    assert np.all(off < 0.05)


def test_normalize_heatmap_range():
    rng = np.random.default_rng(23)
    m = rng.normal(size=(4, 4))
    n = normalize_heatmap(m)
    assert n.min() == 0.0 and n.max() == 1.0
