import numpy as np
import pytest

from cmlformer import tensor as T
from cmlformer.model import (CMLFormer, ModelConfig, decode_dual, encode, heads_forward, load_checkpoint,
                             parameter_count, save_checkpoint)

from conftest import tiny_config
from helpers import ref_vanilla

B, TS, TB, TM = 2, 7, 6, 5


def inputs(r, V, lens=(TS, TB, TM)):
    return [r.integers(5, V, size=(B, n)) for n in lens]


# --- shapes and masking --------------------------------------------------

def test_encoder_shapes():
    cfg = ModelConfig(hidden_dim=32, num_heads=2).with_vocab(50)
    m = CMLFormer(cfg)
    out = m.encode(np.random.default_rng(0).integers(5, 50, size=(2, 16)))
    assert out.hidden.shape == (2, 16, 32)
    assert len(out.attentions) == cfg.num_layers and out.attentions[0].shape == (2, 2, 16, 16)


def test_head_and_decoder_shapes(tiny_model, rng):
    V = tiny_model.config.src_vocab
    src, base, mix = inputs(rng, V)
    enc = tiny_model.encode(src)
    h = tiny_model.heads_forward(enc)
    assert h.mlm_logits.shape == (B, TS, V)
    assert h.spp_logits.shape == h.tlc_logits.shape == (B, TS)
    assert h.btsp_logit.shape == h.cmi_pred.shape == (B,)
    d = tiny_model.decode_dual(enc, base, mix)
    assert d.base_logits.shape == (B, TB, V) and d.mix_logits.shape == (B, TM, V)


def test_oversize_sequence(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.encode(np.full((1, 33), 5))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=10, num_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(coupling_mode="sideways")
    assert ModelConfig(coupling_mode="async").coupling_mode == "asynchronous"


def test_pad_tail_invariance(tiny_model, rng):
    ids = rng.integers(5, 40, size=(1, 9))
    mask = np.array([[1] * 6 + [0] * 3], bool)
    a = tiny_model.encode(ids, mask)
    ids2 = ids.copy()
    ids2[0, 6:] = rng.permutation(ids2[0, 6:]) + 1
    b = tiny_model.encode(ids2, mask)
    np.testing.assert_array_equal(a.hidden.data[0, :6], b.hidden.data[0, :6])
    for att in a.attentions:
        assert np.all(att[..., 6:] == 0)


def test_attention_rows_sum_to_one(tiny_model, rng):
    mask = np.ones((B, TS), bool)
    mask[1, 4:] = False
    for att in tiny_model.encode(rng.integers(5, 40, size=(B, TS)), mask).attentions:
        np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-5)


# --- coupling ---------------------------------------------------------------

def test_mode_none_ignores_mix_stream(rng):
    m = CMLFormer(tiny_config(mode="none"), seed=3)
    src, base, mix = inputs(rng, 40)
    enc = m.encode(src)
    a = m.decode_dual(enc, base, mix).base_logits.data
    b = m.decode_dual(enc, base, rng.integers(5, 40, size=(B, TM + 2))).base_logits.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("mode", ["synchronous", "asynchronous"])
def test_coupled_modes_depend_on_other_stream(mode, rng):
    m = CMLFormer(tiny_config(mode=mode), seed=3)
    src, base, mix = inputs(rng, 40)
    enc = m.encode(src)
    a = m.decode_dual(enc, base, mix).base_logits.data
    mix2 = mix.copy()
    mix2[:, 0] = np.where(mix2[:, 0] == 5, 6, 5)
    b = m.decode_dual(enc, base, mix2).base_logits.data
    assert np.abs(a - b).max() > 0


@pytest.mark.parametrize("mode", ["none", "synchronous", "asynchronous"])
def test_causality(mode, rng):
    m = CMLFormer(tiny_config(mode=mode), seed=4)
    src, base, mix = inputs(rng, 40)
    enc = m.encode(src)
    ref = m.decode_dual(enc, base, mix)
    for t in range(TB):
        base2 = base.copy()
        base2[:, t] = np.where(base2[:, t] == 7, 8, 7)
        out = m.decode_dual(enc, base2, mix)
        assert np.array_equal(out.base_logits.data[:, :t], ref.base_logits.data[:, :t])
        assert np.array_equal(out.mix_logits.data[:, :t], ref.mix_logits.data[:, :t])


@pytest.mark.parametrize("mode", ["synchronous", "asynchronous"])
def test_stream_swap_symmetry(mode, rng):
    cfg = tiny_config(mode=mode)
    m = CMLFormer(cfg, seed=5)
    swapped = {}
    for name, p in m.params.items():
        if name.startswith("dec_base"):
            name = "dec_mix" + name[len("dec_base"):]
        elif name.startswith("dec_mix"):
            name = "dec_base" + name[len("dec_mix"):]
        swapped[name] = p
    src, base, mix = inputs(rng, 40, (TS, 6, 6))
    enc = encode(m.params, cfg, src)
    a = decode_dual(m.params, cfg, enc, base, mix)
    b = decode_dual(swapped, cfg, enc, mix, base)
    np.testing.assert_allclose(a.base_logits.data, b.mix_logits.data, rtol=0, atol=1e-13)
    np.testing.assert_allclose(a.mix_logits.data, b.base_logits.data, rtol=0, atol=1e-13)


def test_mode_none_matches_vanilla_reference(rng):
    cfg = tiny_config(mode="none")
    m = CMLFormer(cfg, seed=9)
    P = {k: v.data for k, v in m.params.items()}
    src, base, mix = inputs(rng, 40)
    enc = m.encode(src)
    out = m.decode_dual(enc, base, mix)
    mem, (rb, rm) = ref_vanilla(P, cfg, src, base, mix)
    assert np.abs(enc.hidden.data - mem).max() <= 1e-10
    assert np.abs(out.base_logits.data - rb).max() <= 1e-10
    assert np.abs(out.mix_logits.data - rm).max() <= 1e-10


def test_unknown_mode_at_call_time(tiny_model, rng):
    cfg = tiny_config()
    cfg.coupling_mode = "bogus"
    src, base, mix = inputs(rng, 40)
    with pytest.raises(ValueError):
        decode_dual(tiny_model.params, cfg, tiny_model.encode(src), base, mix)


# --- gradients through heads ----------------------------------------------

@pytest.mark.parametrize("head", ["mlm_logits", "spp_logits", "tlc_logits", "btsp_logit", "cmi_pred"])
def test_every_head_reaches_encoder(head, tiny_model, rng):
    out = getattr(heads_forward(tiny_model.params, tiny_model.encode(rng.integers(5, 40, size=(B, TS)))), head)
    T.backward((out * out).sum())
    g = tiny_model.params["enc.0.attn.q.w"].grad
    assert g is not None and np.linalg.norm(g) > 0


# --- parameter counting -----------------------------------------------------

def test_tiny_parameter_count():
    cfg = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, max_seq_len=32).with_vocab(100)
    per_layer = 4 * (16 * 16 + 16) + (16 * 32 + 32 + 32 * 16 + 16) + 2 * 2 * 16
    assert parameter_count(cfg) == 100 * 16 + 32 * 16 + 2 * per_layer == 6560
    assert CMLFormer(cfg).num_parameters("enc.") == 6560


def test_layer_linearity():
    cfg = tiny_config()
    delta = parameter_count(tiny_config(num_layers=3)) - parameter_count(cfg)
    assert parameter_count(tiny_config(num_layers=4)) - parameter_count(cfg) == 2 * delta


@pytest.mark.parametrize("mode", ["none", "synchronous", "asynchronous"])
def test_counts_match_allocated(mode):
    m = CMLFormer(tiny_config(mode=mode))
    assert parameter_count(m.config, "model") == m.num_parameters()
    assert parameter_count(m.config, "decoders") == m.num_parameters("dec_")


def test_base_size_encoder_count():
    d, f, L, V, n = 768, 3072, 12, 32000, 512
    block = 4 * (d * d + d) + (d * f + f + f * d + d) + 2 * 2 * d
    assert parameter_count(ModelConfig.base()) == V * d + n * d + L * block == 110_023_680


# --- init and checkpoints ---------------------------------------------------

def test_init_deterministic_and_scaled():
    a, b = CMLFormer(tiny_config(), seed=1), CMLFormer(tiny_config(), seed=1)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    w = a.params["enc.tok_emb"].data
    assert abs(w.std() - 0.02) < 0.005
    assert np.all(a.params["enc.0.attn.q.b"].data == 0)
    assert not np.array_equal(w, CMLFormer(tiny_config(), seed=2).params["enc.tok_emb"].data)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    p = tmp_path / "m.npz"
    tiny_model.save(p, ["[PAD]"], extra={"epoch": 3})
    ck = load_checkpoint(p)
    assert ck.config == tiny_model.config and ck.kind == "pretrain" and ck.extra == {"epoch": 3}
    assert set(ck.params) == set(tiny_model.params)
    for k, v in tiny_model.params.items():
        assert ck.params[k].data.dtype == v.data.dtype
        assert ck.params[k].data.tobytes() == v.data.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.npz"
    np.savez(p, a=np.zeros(2))
    with pytest.raises(ValueError, match="not a cmlformer checkpoint"):
        load_checkpoint(p)
    save_checkpoint(p, tiny_config(), {}, "pretrain")
    assert load_checkpoint(p).params == {}
