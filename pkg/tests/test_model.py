import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdiscap.corpus import BOS, EOS
from gdiscap.decoding import DecoderState, decode_distribution
from gdiscap.losses import xe_loss
from gdiscap.model import CaptionModel, ModelConfig, pad_captions, sinusoidal_positions
from gdiscap.system import CheckpointError, GdisCap, load_checkpoint, save_checkpoint
from gdiscap.corpus import Vocabulary
from gdiscap.tensor import Adam, Tensor, backward


def _ln(row, gain, bias, eps):
    mu = sum(row) / len(row)
    var = sum((x - mu) ** 2 for x in row) / len(row)
    return [g * (x - mu) / math.sqrt(var + eps) + b for x, g, b in zip(row, gain, bias)]


def _lin(row, w, b=None):
    out = [sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))]
    return out if b is None else [o + bb for o, bb in zip(out, b)]


def scalar_encoder(model, x):
    """Plain-python single-head encoder layer: LN(x + attn), LN(x + mlp)."""
    p = {n: v.data.tolist() for n, v in model.named_parameters()}
    h = [_lin(r, p["input_proj.weight"], p["input_proj.bias"]) for r in x]
    q = [_lin(r, p["enc.0.attn.wq.weight"]) for r in h]
    k = [_lin(r, p["enc.0.attn.wk.weight"]) for r in h]
    v = [_lin(r, p["enc.0.attn.wv.weight"]) for r in h]
    d = len(h[0])
    att_out = []
    for i in range(len(h)):
        s = [sum(a * b for a, b in zip(q[i], k[j])) / math.sqrt(d) for j in range(len(h))]
        m = max(s)
        e = [math.exp(z - m) for z in s]
        w = [z / sum(e) for z in e]
        mix = [sum(w[j] * v[j][c] for j in range(len(h))) for c in range(d)]
        att_out.append(_lin(mix, p["enc.0.attn.wo.weight"]))
    eps = model.config.ln_eps
    h = [_ln([a + b for a, b in zip(h[i], att_out[i])], p["enc.0.ln1.gain"], p["enc.0.ln1.bias"], eps)
         for i in range(len(h))]
    out = []
    for r in h:
        f = [max(0.0, z) for z in _lin(r, p["enc.0.mlp.fc1.weight"], p["enc.0.mlp.fc1.bias"])]
        f = _lin(f, p["enc.0.mlp.fc2.weight"], p["enc.0.mlp.fc2.bias"])
        out.append(_ln([a + b for a, b in zip(r, f)], p["enc.0.ln2.gain"], p["enc.0.ln2.bias"], eps))
    return out


def test_encoder_matches_scalar_oracle():
    cfg = ModelConfig(vocab_size=6, d_in=2, d_model=2, heads=1, d_ff=2, enc_layers=1, dec_layers=1, max_len=3)
    model = CaptionModel(cfg, seed=4)
    rng = np.random.default_rng(9)
    for _, p in model.named_parameters():  # non-trivial gains and biases too
        p.data[...] = rng.normal(size=p.data.shape)
    x = [[0.3, -1.2], [0.8, 0.5]]
    got = model.encode(np.array(x)).vectors.data
    np.testing.assert_allclose(got, scalar_encoder(model, x), atol=1e-9)


def test_encode_single_region_and_width_error(tiny_model):
    out = tiny_model.encode(np.ones((1, 4)))
    assert out.vectors.shape == (1, 8) and out.n_regions == 1
    with pytest.raises(ValueError):
        tiny_model.encode(np.ones((2, 5)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_encode_permutation_equivariant(seed, n):
    cfg = ModelConfig(vocab_size=6, d_in=3, d_model=4, heads=2, d_ff=8, enc_layers=2, dec_layers=1, max_len=4)
    model = CaptionModel(cfg, seed=1)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    a = model.encode(x).vectors.data
    b = model.encode(x[perm]).vectors.data
    np.testing.assert_allclose(a[perm], b, atol=1e-10)


def test_decode_distribution_contract(tiny_model):
    rng = np.random.default_rng(0)
    mem = Tensor(rng.normal(size=(3, 8)))
    p = decode_distribution(tiny_model, DecoderState(mem, [BOS, 4, 5]))
    assert p.shape == (tiny_model.config.vocab_size,)
    assert np.all((p > 0) & (p < 1))
    assert abs(p.sum() - 1.0) < 1e-9


def test_decode_distribution_invariant_to_memory_row_order(tiny_model):
    rng = np.random.default_rng(1)
    mem = rng.normal(size=(4, 8))
    a = decode_distribution(tiny_model, DecoderState(Tensor(mem), [BOS, 5]))
    b = decode_distribution(tiny_model, DecoderState(Tensor(mem[[2, 0, 3, 1]]), [BOS, 5]))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_scaling_changes_distribution(tiny_model):
    rng = np.random.default_rng(2)
    mem = rng.normal(size=(4, 8))
    scale = np.array([0.6, 1.4, 0.9, 0.5])[:, None]
    a = decode_distribution(tiny_model, DecoderState(Tensor(mem), [BOS]))
    b = decode_distribution(tiny_model, DecoderState(Tensor(mem * scale), [BOS]))
    assert 0.5 * np.abs(a - b).sum() > 0


def test_zeroed_cross_attention_ignores_memory(tiny_model):
    for layer in tiny_model.dec:
        layer.cross_attn.wo.weight.data[...] = 0.0
    rng = np.random.default_rng(3)
    a = decode_distribution(tiny_model, DecoderState(Tensor(rng.normal(size=(3, 8))), [BOS, 4]))
    b = decode_distribution(tiny_model, DecoderState(Tensor(rng.normal(size=(5, 8))), [BOS, 4]))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_prefix_checks(tiny_model):
    mem = Tensor(np.ones((2, 8)))
    with pytest.raises(ValueError):
        decode_distribution(tiny_model, DecoderState(mem, [4]))
    with pytest.raises(ValueError):
        decode_distribution(tiny_model, DecoderState(mem, [BOS] + [4] * 7))


def test_decoder_is_causal(tiny_model):
    mem = Tensor(np.random.default_rng(4).normal(size=(3, 8)))
    a = tiny_model.decoder_logprobs(np.array([[BOS, 4, 5, 6]]), mem).data
    b = tiny_model.decoder_logprobs(np.array([[BOS, 4, 9, 7]]), mem).data
    np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)


def test_padded_batch_matches_single(tiny_model):
    rng = np.random.default_rng(5)
    feats = [rng.normal(size=(3, 4)), rng.normal(size=(5, 4))]
    batch, valid = tiny_model.encode_batch(feats)
    single = tiny_model.encode(feats[0]).vectors.data
    np.testing.assert_allclose(batch.data[0, :3], single, atol=1e-10)
    lp_b = tiny_model.decoder_logprobs(np.array([[BOS, 4], [BOS, 4]]), batch, valid).data[0]
    lp_s = tiny_model.decoder_logprobs(np.array([[BOS, 4]]), Tensor(single)).data[0]
    np.testing.assert_allclose(lp_b, lp_s, atol=1e-10)


def test_pad_captions():
    inputs, targets, mask = pad_captions([[5, 6], [7]], max_len=20)
    np.testing.assert_array_equal(inputs, [[BOS, 5, 6], [BOS, 7, 0]])
    np.testing.assert_array_equal(targets, [[5, 6, EOS], [7, EOS, 0]])
    np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 1, 0]])


def test_sinusoidal_positions_first_rows():
    pe = sinusoidal_positions(3, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)])


def test_overfit_reproduces_caption(tiny_model):
    from gdiscap.decoding import greedy_decode

    mem = Tensor(np.random.default_rng(6).normal(size=(3, 8)))
    caption = [4, 7, 5, 8]
    opt = Adam(tiny_model.parameters(), lr=0.02)
    for _ in range(150):
        opt.zero_grad()
        backward(xe_loss(tiny_model, mem, [caption]))
        opt.step()
    assert greedy_decode(tiny_model, mem).tokens == caption


def test_checkpoint_round_trip(tmp_path, tiny_vocab, tiny_system):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_system, tiny_vocab, {"note": 1})
    back, vocab, extra = load_checkpoint(path)
    assert vocab.id_to_token == tiny_vocab.id_to_token and extra == {"note": 1}
    for (n1, p1), (n2, p2) in zip(tiny_system.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_full_scale_preset():
    cfg = ModelConfig.full_scale(100)
    assert cfg.d_model == 512 and cfg.d_in == 2048
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=6, heads=4)
