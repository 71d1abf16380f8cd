import math

import numpy as np
import pytest

from schedsamp import autodiff as ad
from schedsamp.autodiff import Tensor
from schedsamp.errors import ConfigError, ContractError, DimensionError, SequenceLengthError
from schedsamp.transformer import (
    Transformer,
    TransformerConfig,
    causal_mask,
    multi_head_attention,
    positional_encoding,
)


def tiny(seed=0, **kw):
    cfg = dict(n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=9, max_len=12)
    cfg.update(kw)
    return Transformer(TransformerConfig(**cfg), seed=seed)


def test_config_validation():
    with pytest.raises(ConfigError):
        TransformerConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        TransformerConfig(vocab_size=2)
    with pytest.raises(ConfigError):
        TransformerConfig(pad_id=1, bos_id=1)


# -- positional encoding / masks -------------------------------------------

def test_positional_encoding_values():
    pe = positional_encoding(20, 8)
    np.testing.assert_array_equal(pe[0], [0, 1] * 4)
    np.testing.assert_allclose(pe[:, 0], np.sin(np.arange(20)), atol=1e-15)
    assert np.abs(pe).max() <= 1.0
    # third pair uses the frequency 10000^(4/8) = 100
    np.testing.assert_allclose(pe[7, 5], math.cos(7 / 100.0), atol=1e-15)


def test_positional_encoding_odd_width():
    with pytest.raises(ConfigError):
        positional_encoding(4, 7)


def test_causal_mask():
    assert causal_mask(1).tolist() == [[True]]
    assert causal_mask(3).tolist() == [[True, False, False], [True, True, False], [True, True, True]]


# -- attention -------------------------------------------------------------

def _identity_params(d):
    eye, zero = np.eye(d), np.zeros(d)
    return {"wq": Tensor(eye), "bq": Tensor(zero), "wk": Tensor(eye), "wv": Tensor(eye), "bv": Tensor(zero),
            "wo": Tensor(eye), "bo": Tensor(zero)}


def test_attention_single_position_returns_value():
    v = np.array([[[0.3, -1.2, 2.0, 0.5]]])
    out = multi_head_attention(v, v, v, None, 1, _identity_params(4)).data
    np.testing.assert_allclose(out, v, atol=1e-15)


def test_attention_uniform_over_unmasked():
    q = np.zeros((1, 1, 4))
    vals = np.random.default_rng(0).normal(size=(1, 3, 4))
    mask = np.array([[[True, True, False]]])
    out = multi_head_attention(q, np.zeros((1, 3, 4)), vals, mask, 2, _identity_params(4)).data
    np.testing.assert_allclose(out[0, 0], vals[0, :2].mean(0), atol=1e-15)


def test_attention_two_positions_scalar_oracle():
    rng = np.random.default_rng(5)
    d, h = 4, 2
    params = {k: Tensor(rng.normal(size=(d, d)) if k.startswith("w") else rng.normal(size=d))
              for k in ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}
    x = rng.normal(size=(1, 2, d))
    out = multi_head_attention(x, x, x, None, h, params).data[0]

    p = {k: v.data.tolist() for k, v in params.items()}
    rows = x[0].tolist()

    def proj(row, w, b=None):
        return [sum(row[i] * w[i][j] for i in range(d)) + (b[j] if b else 0.0) for j in range(d)]

    q = [proj(r, p["wq"], p["bq"]) for r in rows]
    k = [proj(r, p["wk"]) for r in rows]
    v = [proj(r, p["wv"], p["bv"]) for r in rows]
    dk = d // h
    for t in range(2):
        ctx = []
        for head in range(h):
            sl = range(head * dk, (head + 1) * dk)
            s = [sum(q[t][i] * k[u][i] for i in sl) / math.sqrt(dk) for u in range(2)]
            m = max(s)
            e = [math.exp(z - m) for z in s]
            w = [z / sum(e) for z in e]
            ctx += [sum(w[u] * v[u][i] for u in range(2)) for i in sl]
        expected = proj(ctx, p["wo"], p["bo"])
        np.testing.assert_allclose(out[t], expected, rtol=1e-12, atol=1e-13)


def test_attention_fully_masked_row():
    x = np.ones((1, 2, 4))
    with pytest.raises(ContractError):
        multi_head_attention(x, x, x, np.zeros((1, 2, 2), dtype=bool), 2, _identity_params(4))


# -- encoder / decoder ------------------------------------------------------

def test_encode_shape_and_overlength():
    model = tiny()
    mem = model.encode([[4, 5, 6, 0]])
    assert mem.states.shape == (1, 4, 8) and len(mem) == 4
    assert mem.src_pad_mask.tolist() == [[False, False, False, True]]
    with pytest.raises(SequenceLengthError):
        model.encode(np.full((1, 13), 4))
    with pytest.raises(SequenceLengthError):
        model.decode(np.full((1, 13), 4), mem)


def test_encode_pad_invariance():
    model = tiny(3)
    short = model.encode([[4, 7, 5, 0]]).states.data
    longer = model.encode([[4, 7, 5, 0, 0, 0, 0]]).states.data
    np.testing.assert_allclose(short[0, :3], longer[0, :3], rtol=0, atol=1e-9)
    tgt = [[1, 6, 4]]
    a = model.decode(tgt, model.encode([[4, 7, 5, 0]])).data
    b = model.decode(tgt, model.encode([[4, 7, 5, 0, 0, 0]])).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_id_and_embedding_paths_bitwise_equal():
    model = tiny(1)
    mem = model.encode([[4, 5, 6], [7, 8, 0]])
    ids = np.array([[1, 4, 5, 6], [1, 7, 8, 0]])
    by_id = model.decode(ids, mem).data
    by_vec = model.decode(ad.embedding_lookup(model.tgt_embed, ids), mem).data
    assert by_id.shape == (2, 4, 9)
    np.testing.assert_array_equal(by_id, by_vec)


def test_decode_rejects_wrong_embedding_width():
    model = tiny()
    with pytest.raises(DimensionError):
        model.decode(Tensor(np.zeros((1, 3, 6))), model.encode([[4, 5]]))


def test_out_of_range_ids():
    with pytest.raises(ContractError):
        tiny().encode([[4, 99]])


@pytest.mark.parametrize("seed", range(5))
def test_causality_embedding_perturbation(seed):
    model = tiny(seed)
    rng = np.random.default_rng(seed)
    mem = model.encode(rng.integers(4, 9, size=(2, 5)))
    base = rng.normal(size=(2, 6, 8))
    ref = model.decode(Tensor(base), mem).data
    for j in range(6):
        pert = base.copy()
        pert[:, j] += rng.normal(size=(2, 8)) * 3
        out = model.decode(Tensor(pert), mem).data
        np.testing.assert_array_equal(out[:, :j], ref[:, :j])
        assert np.abs(out[:, j:] - ref[:, j:]).max() > 0


def test_parameter_names_and_counts():
    cfg = TransformerConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, vocab_size=9)
    a, b = Transformer(cfg, 0), Transformer(cfg, 1)
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    d, f, v = 8, 16, 9
    attn = 4 * d * d + 3 * d
    ln = 2 * d
    expected = v * d + (2 * ln + attn + 2 * d * f + f + d) + ln + (3 * ln + 2 * attn + 2 * d * f + f + d) + ln + v
    assert a.num_parameters() == expected


def test_weight_tying_single_storage():
    model = tiny()
    assert model.src_embed is model.tgt_embed is model.generator_weight
    src = [[4, 5, 6]]
    before_enc = model.encode(src).states.data.copy()
    before_logits = model.decode([[1, 4]], model.encode(src)).data.copy()
    model.tgt_embed.data[4] += 1.0
    assert np.abs(model.encode(src).states.data - before_enc).max() > 0
    assert np.abs(model.decode([[1, 4]], model.encode(src)).data - before_logits).max() > 0


def test_untied_model_has_extra_tables():
    model = tiny(share_embeddings=False, share_decoder_out_embedding=False)
    names = dict(model.named_parameters())
    assert "src_embed" in names and "generator.weight" in names
    assert model.src_embed is not model.tgt_embed


def test_eval_determinism_and_dropout_stream():
    model = tiny(2, dropout_rate=0.3)
    src, tgt = [[4, 5, 6, 7]], [[1, 4, 5]]
    a = model.decode(tgt, model.encode(src)).data
    b = model.decode(tgt, model.encode(src)).data
    np.testing.assert_array_equal(a, b)
    r1 = np.random.default_rng(9)
    r2 = np.random.default_rng(9)
    c = model.decode(tgt, model.encode(src, r1), r1).data
    d = model.decode(tgt, model.encode(src, r2), r2).data
    np.testing.assert_array_equal(c, d)
    assert np.abs(c - a).max() > 0


def test_greedy_eos_favouring_model_is_empty():
    model = tiny()
    model.params["generator.bias"].data[model.config.eos_id] = 1e3
    assert model.greedy_decode([[4, 5, 6], [7, 8, 0]], 10) == [[], []]


def test_greedy_length_bound():
    model = tiny(4)
    model.params["generator.bias"].data[5] = 1e3
    out = model.greedy_decode([[4, 5, 6]], 7)
    assert out == [[5] * 7]
    assert all(len(h) <= 3 for h in tiny(5).greedy_decode([[4, 5], [6, 7]], 3))


def test_state_dict_round_trip():
    a, b = tiny(0), tiny(1)
    b.load_state_dict(a.state_dict())
    src = [[4, 5, 6]]
    np.testing.assert_array_equal(a.decode([[1, 4]], a.encode(src)).data, b.decode([[1, 4]], b.encode(src)).data)
    with pytest.raises(ContractError):
        b.load_state_dict({"x": np.zeros(1)})
