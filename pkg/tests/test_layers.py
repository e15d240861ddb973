import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import modalign.autodiff as ad
from modalign.errors import CapacityError, DataError, DimensionError
from modalign.gradcheck import check_gradients
from modalign.layers import (
    BiLstmParams,
    CharCnnParams,
    CharVocab,
    EmbeddingTable,
    LstmDirection,
    SelfAttnPoolParams,
    TextAwareAttnParams,
    Vocab,
    bilstm_forward,
    char_cnn_embed,
    embed_tokens,
    linear_forward,
    load_word_vectors,
    self_attention_pool,
    table_from_vectors,
    text_aware_attention,
)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------------------
# vocab + embeddings


def test_vocab_unk_fallback():
    v = Vocab(["cat", "dog"])
    assert v.index("cat") == 1
    assert v.index("unknown-token") == 0
    v_no_unk = Vocab(["cat"], unk=None)
    with pytest.raises(DataError, match="no UNK"):
        v_no_unk.index("dog")


def test_embed_tokens_is_row_lookup():
    rng = np.random.default_rng(0)
    table = EmbeddingTable.random(5, 4, rng)
    out = embed_tokens([3, 1, 3], table)
    np.testing.assert_array_equal(out.values[:, 0], table.matrix.values[3])
    np.testing.assert_array_equal(out.values[:, 1], table.matrix.values[1])
    np.testing.assert_array_equal(out.values[:, 2], table.matrix.values[3])


def test_embed_tokens_unseen_goes_to_unk_row():
    rng = np.random.default_rng(1)
    vocab = Vocab(["a", "b"])
    table = EmbeddingTable.random(len(vocab), 3, rng)
    ids = vocab.encode(["a", "zzz"])
    out = embed_tokens(ids, table)
    np.testing.assert_array_equal(out.values[:, 1], table.matrix.values[vocab.index("zzz")])
    assert vocab.index("zzz") == 0


def test_char_cnn_zero_filters_yield_bias():
    rng = np.random.default_rng(2)
    p = CharCnnParams.init(6, 3, 2, 4, rng)
    p.filters.values[:] = 0.0
    bias = rng.standard_normal(4)
    p.bias.values[:] = bias
    out = char_cnn_embed([2, 3, 4], p)
    np.testing.assert_array_equal(out.values, bias)


def test_char_cnn_single_char_word_padded():
    rng = np.random.default_rng(3)
    p = CharCnnParams.init(6, 3, 3, 2, rng)
    out = char_cnn_embed([4], p)
    assert out.values.shape == (2,)
    assert np.all(np.isfinite(out.values))


def test_char_cnn_filter_permutation_equivariance():
    rng = np.random.default_rng(4)
    p = CharCnnParams.init(8, 3, 2, 5, rng)
    perm = np.array([3, 0, 4, 1, 2])
    q = CharCnnParams(
        embeddings=p.embeddings,
        filters=ad.tensor(p.filters.values[perm]),
        bias=ad.tensor(p.bias.values[perm]),
        window=p.window,
    )
    word = [2, 5, 7, 3]
    np.testing.assert_array_equal(char_cnn_embed(word, q).values,
                                  char_cnn_embed(word, p).values[perm])


def test_char_cnn_hand_computed():
    # one filter, window 2, char dim 2, three characters
    emb = np.array([[0.0, 0.0], [1.0, -1.0], [0.5, 2.0], [-2.0, 0.3]])
    filt = np.array([[0.1, -0.2, 0.4, 0.8]])  # layout: channel-major over window
    p = CharCnnParams(
        embeddings=ad.tensor(emb, requires_grad=True),
        filters=ad.tensor(filt, requires_grad=True),
        bias=ad.tensor([0.05], requires_grad=True),
        window=2,
    )
    word = [1, 2, 3]
    # window at j covers chars (j, j+1); flattened [c0@j, c0@j+1, c1@j, c1@j+1]
    def score(a, b):
        return (0.1 * emb[a, 0] - 0.2 * emb[b, 0] + 0.4 * emb[a, 1] + 0.8 * emb[b, 1]) + 0.05

    expected = max(score(1, 2), score(2, 3))
    out = char_cnn_embed(word, p)
    assert abs(out.values[0] - expected) < 1e-12


def test_embed_tokens_requires_char_ids_with_cnn():
    rng = np.random.default_rng(5)
    table = EmbeddingTable.random(4, 3, rng)
    cnn = CharCnnParams.init(5, 2, 2, 2, rng)
    with pytest.raises(DataError):
        embed_tokens([0, 1], table, cnn, None)
    out = embed_tokens([0, 1], table, cnn, [[1, 2], [3]])
    assert out.values.shape == (5, 2)


# ---------------------------------------------------------------------------
# Bi-LSTM


def test_bilstm_zero_parameters_give_zero_states():
    d = LstmDirection(
        w_x=ad.tensor(np.zeros((8, 3)), requires_grad=True),
        w_h=ad.tensor(np.zeros((8, 2)), requires_grad=True),
        b=ad.tensor(np.zeros(8), requires_grad=True),
    )
    p = BiLstmParams(fwd=d, bwd=d, hidden_dim=2)
    out = bilstm_forward(ad.tensor(np.random.default_rng(0).standard_normal((3, 4))), p)
    np.testing.assert_array_equal(out.values, np.zeros((4, 4)))


def test_bilstm_single_step():
    rng = np.random.default_rng(6)
    p = BiLstmParams.init(3, 2, rng)
    out = bilstm_forward(ad.tensor(rng.standard_normal((3, 1))), p)
    assert out.values.shape == (4, 1)
    assert np.all(np.isfinite(out.values))


def test_bilstm_hand_recurrence_oracle():
    # scalar LSTM, two steps, gate order input/forget/output/candidate
    w_x = [0.5, -0.3, 0.8, 1.0]
    w_h = [0.2, 0.1, -0.4, 0.6]
    b = [0.05, 1.0, -0.1, 0.0]
    xs = [1.2, -0.7]

    def run(sequence):
        h = c = 0.0
        states = []
        for x in sequence:
            pre = [w_x[g] * x + w_h[g] * h + b[g] for g in range(4)]
            i, f, o = _sigmoid(pre[0]), _sigmoid(pre[1]), _sigmoid(pre[2])
            g = math.tanh(pre[3])
            c = f * c + i * g
            h = o * math.tanh(c)
            states.append(h)
        return states

    direction = LstmDirection(
        w_x=ad.tensor(np.array(w_x)[:, None], requires_grad=True),
        w_h=ad.tensor(np.array(w_h)[:, None], requires_grad=True),
        b=ad.tensor(np.array(b), requires_grad=True),
    )
    p = BiLstmParams(fwd=direction, bwd=direction, hidden_dim=1)
    out = bilstm_forward(ad.tensor(np.array(xs)[None, :]), p)
    fwd_expected = run(xs)
    bwd_expected = run(xs[::-1])[::-1]
    np.testing.assert_allclose(out.values[0], fwd_expected, atol=1e-10)
    np.testing.assert_allclose(out.values[1], bwd_expected, atol=1e-10)


def test_bilstm_direction_symmetry_on_reversed_input():
    rng = np.random.default_rng(7)
    p = BiLstmParams.init(3, 2, rng)
    mirrored = BiLstmParams(fwd=p.bwd, bwd=p.fwd, hidden_dim=2)
    x = rng.standard_normal((3, 5))
    out = bilstm_forward(ad.tensor(x), p).values
    out_rev = bilstm_forward(ad.tensor(x[:, ::-1].copy()), mirrored).values
    np.testing.assert_allclose(out_rev[:2], out[2:, ::-1], atol=1e-12)
    np.testing.assert_allclose(out_rev[2:], out[:2, ::-1], atol=1e-12)


# ---------------------------------------------------------------------------
# text-aware attention


def test_attention_weights_sum_to_one():
    rng = np.random.default_rng(8)
    p = TextAwareAttnParams.init(8, rng)
    for _ in range(10):
        h_word = ad.tensor(rng.standard_normal((4, 5)))
        h_cog = ad.tensor(rng.standard_normal((3, 5)))
        _, alpha = text_aware_attention(h_word, h_cog, p)
        assert abs(alpha.values.sum() - 1.0) < 1e-12
        assert np.all(alpha.values > 0)


def test_attention_degenerate_zero_signals():
    rng = np.random.default_rng(9)
    p = TextAwareAttnParams.init(8, rng)
    h_word = ad.tensor(rng.standard_normal((4, 3)))
    h_cog = ad.tensor(np.zeros((5, 3)))
    out, alpha = text_aware_attention(h_word, h_cog, p)
    np.testing.assert_allclose(alpha.values, np.full(5, 0.2), atol=1e-12)
    np.testing.assert_array_equal(out.values, np.zeros((5, 3)))


def test_attention_hand_computed_case():
    p = TextAwareAttnParams(u=ad.tensor(np.eye(2), requires_grad=True), n_max=2)
    h_word = ad.tensor(np.eye(2))
    h_cog_values = np.array([[0.5, -1.0], [2.0, 0.3]])
    h_cog = ad.tensor(h_cog_values)
    out, alpha = text_aware_attention(h_word, h_cog, p)

    compat = np.tanh(np.eye(2) @ np.eye(2) @ h_cog_values.T)
    scores = compat.max(axis=0)
    e = np.exp(scores - scores.max())
    alpha_expected = e / e.sum()
    np.testing.assert_allclose(alpha.values, alpha_expected, atol=1e-10)
    np.testing.assert_allclose(out.values, h_cog_values * alpha_expected[:, None], atol=1e-10)


def test_attention_capacity_error():
    rng = np.random.default_rng(10)
    p = TextAwareAttnParams.init(3, rng)
    with pytest.raises(CapacityError):
        text_aware_attention(ad.tensor(rng.standard_normal((2, 4))),
                             ad.tensor(rng.standard_normal((2, 4))), p)


def test_attention_mask_excludes_padding_exactly():
    rng = np.random.default_rng(11)
    p = TextAwareAttnParams.init(8, rng)
    h_word = rng.standard_normal((4, 3))
    h_cog = rng.standard_normal((3, 3))
    pad_word = np.concatenate([h_word, rng.standard_normal((4, 2))], axis=1)
    pad_cog = np.concatenate([h_cog, rng.standard_normal((3, 2))], axis=1)
    out_plain, alpha_plain = text_aware_attention(ad.tensor(h_word), ad.tensor(h_cog), p)
    out_masked, alpha_masked = text_aware_attention(
        ad.tensor(pad_word), ad.tensor(pad_cog), p, mask=[True, True, True, False, False])
    np.testing.assert_array_equal(alpha_masked.values, alpha_plain.values)
    np.testing.assert_array_equal(out_masked.values, out_plain.values)


def test_attention_mask_must_be_prefix():
    rng = np.random.default_rng(12)
    p = TextAwareAttnParams.init(8, rng)
    with pytest.raises(DataError):
        text_aware_attention(ad.tensor(rng.standard_normal((2, 3))),
                             ad.tensor(rng.standard_normal((2, 3))), p,
                             mask=[True, False, True])


# ---------------------------------------------------------------------------
# self-attention pooling


def test_pool_single_column_is_identity():
    rng = np.random.default_rng(13)
    p = SelfAttnPoolParams.init(3, rng)
    h = rng.standard_normal((3, 1))
    out = self_attention_pool(ad.tensor(h), p)
    np.testing.assert_allclose(out.values, h[:, 0], atol=1e-15)


def test_pool_zero_scorer_gives_column_mean():
    rng = np.random.default_rng(14)
    p = SelfAttnPoolParams.init(3, rng)
    p.v.values[:] = 0.0
    h = rng.standard_normal((3, 5))
    out = self_attention_pool(ad.tensor(h), p)
    np.testing.assert_allclose(out.values, h.mean(axis=1), atol=1e-12)


def test_pool_matches_direct_evaluation():
    rng = np.random.default_rng(15)
    p = SelfAttnPoolParams.init(3, rng)
    h = rng.standard_normal((3, 4))
    keys = np.tanh(p.w.values @ h + p.b.values[:, None])
    scores = keys.T @ p.v.values
    e = np.exp(scores - scores.max())
    alpha = e / e.sum()
    np.testing.assert_allclose(self_attention_pool(ad.tensor(h), p).values,
                               h @ alpha, atol=1e-10)


def test_pool_mask_matches_truncated_input():
    rng = np.random.default_rng(16)
    p = SelfAttnPoolParams.init(2, rng)
    h = rng.standard_normal((2, 5))
    out_full = self_attention_pool(ad.tensor(h[:, :3].copy()), p)
    out_masked = self_attention_pool(ad.tensor(h), p, mask=[True] * 3 + [False] * 2)
    np.testing.assert_array_equal(out_masked.values, out_full.values)


# ---------------------------------------------------------------------------
# linear projection


def test_linear_identity_and_bias():
    h = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = linear_forward(h, ad.tensor(np.eye(2)), ad.tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.values, h.values)
    b = np.array([0.5, -1.0])
    out = linear_forward(ad.tensor(np.zeros((2, 3))), ad.tensor(np.eye(2)), ad.tensor(b))
    np.testing.assert_array_equal(out.values, np.tile(b[:, None], 3))


def test_linear_matches_manual_product():
    rng = np.random.default_rng(17)
    w = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    h = rng.standard_normal((3, 4))
    out = linear_forward(ad.tensor(h), ad.tensor(w), ad.tensor(b))
    np.testing.assert_allclose(out.values, w @ h + b[:, None], atol=1e-12)


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear_forward(ad.tensor(np.zeros((3, 2))), ad.tensor(np.zeros((2, 4))),
                       ad.tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# word-vector file


def test_word_vector_round_trip(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("cat 0.25 -1.5 3.0\ndog 1.0 2.0 -0.125\n")
    tokens, matrix = load_word_vectors(str(path))
    assert tokens == ["cat", "dog"]
    vocab, table = table_from_vectors(tokens, matrix)
    assert table.frozen and table.dim == 3
    np.testing.assert_array_equal(table.matrix.values[vocab.index("cat")], [0.25, -1.5, 3.0])
    np.testing.assert_array_equal(table.matrix.values[vocab.index("out-of-vocab")], np.zeros(3))


def test_word_vector_bad_component(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("cat 0.25 oops 3.0\n")
    with pytest.raises(DataError, match=":1:"):
        load_word_vectors(str(path))


# ---------------------------------------------------------------------------
# end-to-end finite differences per layer


def test_layer_parameters_pass_finite_differences():
    rng = np.random.default_rng(18)
    table = EmbeddingTable.random(6, 3, rng, frozen=False)
    cnn = CharCnnParams.init(7, 2, 2, 3, rng)
    lstm = BiLstmParams.init(6, 2, rng)
    attn = TextAwareAttnParams.init(6, rng)
    pool = SelfAttnPoolParams.init(4, rng)
    w = ad.tensor(rng.standard_normal((2, 4)), requires_grad=True)
    b = ad.tensor(rng.standard_normal(2), requires_grad=True)
    h_word = ad.tensor(rng.standard_normal((3, 4)))
    h_cog = ad.tensor(rng.standard_normal((4, 4)))
    token_ids = [1, 4, 2, 5]
    char_ids = [[2, 3], [4], [5, 6, 2], [3, 3]]

    def build_loss():
        x = embed_tokens(token_ids, table, cnn, char_ids)  # (6, 4)
        states = bilstm_forward(x, lstm)                   # (4, 4)
        attended, _ = text_aware_attention(h_word, h_cog, attn)
        pooled = self_attention_pool(states, pool)         # (4,)
        projected = linear_forward(states, w, b)           # (2, 4)
        return ad.sum_all(projected) + ad.sum_all(pooled) + ad.sum_all(attended)

    leaves = dict(table.named_parameters("embed"))
    leaves.update(cnn.named_parameters("cnn"))
    leaves.update(lstm.named_parameters("lstm"))
    leaves.update(attn.named_parameters("attn"))
    leaves.update(pool.named_parameters("pool"))
    leaves.update({"linear.w": w, "linear.b": b})
    errs = check_gradients(build_loss, leaves)
    assert max(errs.values()) < 1e-6, errs


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_pool_weights_always_normalized(d, n, seed):
    rng = np.random.default_rng(seed)
    p = SelfAttnPoolParams.init(d, rng)
    h = rng.standard_normal((d, n)) * 3.0
    out = self_attention_pool(ad.tensor(h), p)
    # pooled vector lies in the convex hull of the columns
    assert out.values.min() >= h.min() - 1e-9
    assert out.values.max() <= h.max() + 1e-9
