import math

import pytest
import torch
import torch.nn.functional as F

from xlingtts import checkpoint as ckpt
from xlingtts.ttsmodel import ModelConfig, TtsModel, model_preset, shift_right

from conftest import fd_grad, rel_err, sample_indices, tiny_model_config


@pytest.fixture
def model64(tiny_corpus):
    torch.manual_seed(1)
    return TtsModel(tiny_model_config(tiny_corpus)).double().eval()


def _inputs(corpus, T=10, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    lang = corpus.languages[0]
    phones = torch.tensor([list(lang.phone_ids[:3])])
    mel = torch.randn(1, T, corpus.config.n_mels, generator=g, dtype=dtype)
    return phones, mel, torch.tensor([0]), torch.tensor([0])


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(n_phones=5, n_speakers=2, n_languages=2, d_enc=63)
    with pytest.raises(ValueError):
        ModelConfig(n_phones=5, n_speakers=2, n_languages=2, d_spk_emb=8, d_lang_emb=16)
    full = model_preset("full", n_phones=5, n_speakers=2, n_languages=2)
    assert (full.d_enc, full.d_dec, full.d_spk_emb, full.d_lang_emb) == (512, 768, 128, 128)


def test_speaker_network_deterministic_and_distinct(tiny_model):
    a = tiny_model.speaker_network(torch.tensor([0, 0, 1]))
    torch.testing.assert_close(a[0], a[1], rtol=0, atol=0)
    assert not torch.allclose(a[0], a[2])
    with pytest.raises(IndexError):
        tiny_model.speaker_network(torch.tensor([99]))
    with pytest.raises(IndexError):
        tiny_model.language_network(torch.tensor([3]))


def test_speaker_network_gradient_wrt_table_row(model64):
    w = torch.randn(model64.config.d_spk_emb, dtype=torch.float64)
    table = model64.speaker_net.table.weight
    f = lambda: (model64.speaker_network(torch.tensor([1])) @ w).sum()  # noqa: E731
    f().backward()
    for j in range(table.shape[1]):
        assert rel_err(table.grad[1, j].item(), fd_grad(f, table, (1, j))) < 1e-3


def test_mtl_heads_shapes_and_uniform_ce(tiny_model):
    s = tiny_model.speaker_network(torch.tensor([0, 3]))
    l = tiny_model.language_network(torch.tensor([0, 1]))
    spk, lang = tiny_model.mtl_heads(s, l)
    assert spk.shape == (2, tiny_model.config.n_speakers)
    assert lang.shape == (2, tiny_model.config.n_languages)
    assert torch.isfinite(F.log_softmax(spk, -1)).all()
    K = tiny_model.config.n_speakers
    assert F.cross_entropy(torch.zeros(1, K), torch.tensor([0])).item() == pytest.approx(math.log(K))


def test_encode_shape_and_empty(tiny_model):
    phones = torch.tensor([[1, 2, 3, 4, 2]])
    assert tiny_model.encode(phones).shape == (1, 5, tiny_model.config.d_enc)
    with pytest.raises(ValueError):
        tiny_model.encode(torch.zeros(1, 0, dtype=torch.long))


def test_encode_ignores_padding_content(tiny_model):
    phones = torch.tensor([[1, 2, 3, 0, 0]])
    mask = torch.tensor([[True, True, True, False, False]])
    a = tiny_model.encode(phones, mask)
    b = tiny_model.encode(torch.tensor([[1, 2, 3, 4, 7]]), mask)
    torch.testing.assert_close(a[:, :3], b[:, :3], atol=1e-6, rtol=0)
    c = tiny_model.encode(torch.tensor([[1, 2, 3]]))
    torch.testing.assert_close(a[:, :3], c, atol=1e-6, rtol=0)


def test_encoder_jacobian_finite_differences(model64):
    phones = torch.tensor([[1, 2, 3]])
    proj = torch.randn(3, model64.config.d_enc, dtype=torch.float64)
    f = lambda: (model64.encode(phones)[0] * proj).sum()  # noqa: E731
    f().backward()
    emb = model64.phone_emb.weight
    for idx in [(1, 0), (2, 3), (3, 7), (2, 5)]:
        assert rel_err(emb.grad[idx].item(), fd_grad(f, emb, idx)) < 1e-3
    for name, p in model64.encoder.named_parameters():
        for idx in sample_indices(p, 1, seed=len(name)):
            assert rel_err(p.grad[idx].item(), fd_grad(f, p, idx)) < 1e-3, name


def test_decoder_causality(model64, tiny_corpus):
    phones, mel, spk, lang = _inputs(tiny_corpus)
    out = model64(phones, mel, spk, lang)["mel_pred"]
    assert out.shape == mel.shape
    for j in range(mel.shape[1]):
        perturbed = mel.clone()
        perturbed[:, j:] += torch.randn_like(perturbed[:, j:])
        out2 = model64(phones, perturbed, spk, lang)["mel_pred"]
        assert (out2[:, :j] - out[:, :j]).abs().max().item() <= 1e-6 if j else True


def test_decoder_rejects_too_many_frames(tiny_model, tiny_corpus):
    phones, _, spk, lang = _inputs(tiny_corpus, dtype=torch.float32)
    mel = torch.zeros(1, tiny_model.config.max_frames + 1, tiny_corpus.config.n_mels)
    with pytest.raises(ValueError, match="max_frames"):
        tiny_model(phones, mel, spk, lang)


def test_decoder_mse_gradient_finite_differences(model64, tiny_corpus):
    phones, target, spk, lang = _inputs(tiny_corpus, T=6)
    f = lambda: F.mse_loss(model64(phones, shift_right(target), spk, lang)["mel_pred"], target)  # noqa: E731
    f().backward()
    params = dict(model64.named_parameters())
    for name in ["decoder.0.self_attn.q.weight", "decoder.0.cross_attn.v.weight", "decoder.0.ff.0.weight",
                 "prenet.0.weight", "dec_in.weight", "mel_out.weight", "mel_out.bias"]:
        p = params[name]
        for idx in sample_indices(p, 2, seed=len(name)):
            assert rel_err(p.grad[idx].item(), fd_grad(f, p, idx)) < 1e-3, name


def test_infer_stop_rule(tiny_model):
    with torch.no_grad():
        tiny_model.stop_out.bias.fill_(50.0)
    r = tiny_model.infer([1, 2], 0, 0, max_frames=20)
    assert r.mel.shape == (1, tiny_model.config.n_mels) and not r.hit_max


def test_infer_hits_max_flagged(tiny_model):
    with torch.no_grad():
        tiny_model.stop_out.bias.fill_(-50.0)
    r = tiny_model.infer([1, 2], 0, 0, max_frames=7)
    assert r.mel.shape[0] == 7 and r.hit_max


def test_infer_matches_teacher_forced_on_own_output(model64):
    with torch.no_grad():
        model64.stop_out.bias.fill_(-50.0)
    phones = [1, 3, 2]
    r = model64.infer(phones, 2, 0, max_frames=12)
    out = model64(torch.tensor([phones]), shift_right(r.mel[None]), torch.tensor([2]), torch.tensor([0]))
    torch.testing.assert_close(out["mel_pred"][0], r.mel, atol=1e-5, rtol=0)


def test_infer_accepts_cross_lingual_pair(tiny_model, tiny_corpus):
    spk = tiny_corpus.speakers_of(0)[0]
    r = tiny_model.infer(tiny_corpus.languages[2].phone_ids[:3], spk, 2, max_frames=5)
    assert r.mel.shape[1] == tiny_corpus.config.n_mels


def test_condition_injection_zero_is_identity(tiny_model):
    states = torch.randn(2, 5, tiny_model.config.d_enc)
    zero = torch.zeros(2, tiny_model.config.d_spk_emb)
    torch.testing.assert_close(tiny_model.condition_injection(states, zero, zero), states, rtol=0, atol=0)


def test_condition_injection_broadcasts_per_row(tiny_model):
    states = torch.randn(1, 6, tiny_model.config.d_enc)
    l = tiny_model.language_network(torch.tensor([0]))
    a = tiny_model.condition_injection(states, tiny_model.speaker_network(torch.tensor([0])), l)
    b = tiny_model.condition_injection(states, tiny_model.speaker_network(torch.tensor([3])), l)
    diff = b - a
    torch.testing.assert_close(diff, diff[:, :1].expand_as(diff), atol=1e-6, rtol=0)
    assert diff.abs().max() > 0


def test_gradient_reaches_used_speaker_row_only(tiny_model, tiny_corpus):
    tiny_model.train()
    phones, mel, _, lang = _inputs(tiny_corpus, dtype=torch.float32)
    out = tiny_model(phones.repeat(2, 1), shift_right(mel).repeat(2, 1, 1), torch.tensor([1, 1]), lang.repeat(2))
    F.mse_loss(out["mel_pred"], mel.repeat(2, 1, 1)).backward()
    g = tiny_model.speaker_net.table.weight.grad
    assert g[1].abs().sum() > 0
    others = torch.cat([g[:1], g[2:]])
    assert torch.count_nonzero(others) == 0


def test_add_speaker_initialised_to_mean(tiny_model):
    table = tiny_model.speaker_net.table.weight.detach().clone()
    head = tiny_model.speaker_head[2].weight.detach().clone()
    new = tiny_model.add_speaker()
    assert new == table.shape[0] == tiny_model.config.n_speakers - 1
    torch.testing.assert_close(tiny_model.speaker_net.table.weight[new], table.mean(0))
    torch.testing.assert_close(tiny_model.speaker_head[2].weight[new], head.mean(0))
    assert tiny_model.mtl_heads(tiny_model.speaker_network(torch.tensor([new])),
                                tiny_model.language_network(torch.tensor([0])))[0].shape[-1] == new + 1


def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_model):
    tiny_model.stage_history = ["baseline"]
    path = ckpt.save_tts(tmp_path / "m.ckpt", tiny_model, {"note": "x"})
    back = ckpt.load_tts(path)
    assert back.config == tiny_model.config and back.stage_history == ["baseline"]
    for (k, a), (k2, b) in zip(tiny_model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    again = ckpt.save_tts(tmp_path / "m2.ckpt", back, {"note": "x"})
    assert path.read_bytes() == again.read_bytes()
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_xvec(path)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(b"nope" + bytes(20))
