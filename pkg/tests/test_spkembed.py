import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xlingtts.spkembed import XVectorConfig, XVectorModel, cosine_distance, l2_distance, pad_mels, stats_pool

from conftest import fd_grad, rel_err, sample_indices


@pytest.fixture
def xvec():
    torch.manual_seed(0)
    return XVectorModel(XVectorConfig(n_mels=6, n_speakers=5, hidden=8, d_xvec=4)).double().eval()


def test_stats_pool_hand_computed():
    h = torch.tensor([[1.0, 2.0, 3.0, 4.0],
                      [3.0, 2.0, 5.0, 4.0],
                      [5.0, 2.0, 7.0, 4.0]], dtype=torch.float64)
    pooled = stats_pool(h[None], var_floor=1e-6)[0]
    mean = [3.0, 2.0, 5.0, 4.0]
    # population variance: ((-2)^2 + 0 + 2^2) / 3 = 8/3 for columns 0 and 2; constant columns floored
    std = [math.sqrt(8 / 3), math.sqrt(1e-6), math.sqrt(8 / 3), math.sqrt(1e-6)]
    np.testing.assert_allclose(pooled.numpy(), mean + std, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 5)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_stats_pool_matches_brute_force(h):
    pooled = stats_pool(torch.from_numpy(h)[None])[0].numpy()
    T, C = h.shape
    mean = [sum(h[t, c] for t in range(T)) / T for c in range(C)]
    var = [sum((h[t, c] - mean[c]) ** 2 for t in range(T)) / T for c in range(C)]
    std = [math.sqrt(max(v, 1e-6)) for v in var]
    np.testing.assert_allclose(pooled, mean + std, rtol=1e-12, atol=1e-12)


def test_masked_pool_equals_unpadded():
    torch.manual_seed(1)
    a, b = torch.randn(5, 3), torch.randn(9, 3)
    padded = torch.zeros(2, 9, 3)
    padded[0, :5], padded[1] = a, b
    mask = torch.arange(9)[None] < torch.tensor([5, 9])[:, None]
    pooled = stats_pool(padded, mask)
    torch.testing.assert_close(pooled[0], stats_pool(a[None])[0])
    torch.testing.assert_close(pooled[1], stats_pool(b[None])[0])


def test_embedding_width_length_independent():
    torch.manual_seed(0)
    x = XVectorModel(XVectorConfig())
    assert x.embed(torch.randn(40, 20)).shape == x.embed(torch.randn(400, 20)).shape == (32,)


def test_too_short_names_minimum():
    x = XVectorModel(XVectorConfig())
    assert x.min_frames == 9
    with pytest.raises(ValueError, match="at least 9 frames"):
        x.embed(torch.randn(8, 20))


def test_batched_embed_matches_single(xvec):
    torch.manual_seed(2)
    mels = [torch.randn(12, 6, dtype=torch.float64), torch.randn(20, 6, dtype=torch.float64)]
    padded, lengths = pad_mels([m.numpy() for m in mels])
    batch = xvec.embed(padded.double(), lengths)
    for i, m in enumerate(mels):
        torch.testing.assert_close(batch[i], xvec.embed(m))


def test_embed_gradient_wrt_mel_finite_differences(xvec):
    torch.manual_seed(3)
    mel = torch.randn(14, 6, dtype=torch.float64, requires_grad=True)
    f = lambda: xvec.embed(mel).pow(2).sum()  # noqa: E731
    f().backward()
    for idx in sample_indices(mel, 12):
        assert rel_err(mel.grad[idx].item(), fd_grad(f, mel, idx)) < 1e-3


def test_embed_gradient_wrt_params_finite_differences(xvec):
    torch.manual_seed(4)
    mel = torch.randn(14, 6, dtype=torch.float64)
    f = lambda: xvec.embed(mel).pow(2).sum()  # noqa: E731
    f().backward()
    for name, p in xvec.named_parameters():
        if name.startswith("output"):
            continue
        for idx in sample_indices(p, 2, seed=len(name)):
            assert rel_err(p.grad[idx].item(), fd_grad(f, p, idx)) < 1e-3, name


def test_duplicating_frames_of_constant_input(xvec):
    frame = torch.randn(6, dtype=torch.float64)
    mel = frame.expand(12, 6).clone()
    doubled = mel.repeat_interleave(2, dim=0)
    torch.testing.assert_close(xvec.embed(mel), xvec.embed(doubled), atol=1e-5, rtol=0)


def test_classify_logits_and_uniform_ce(xvec):
    logits = xvec.classify(xvec.embed(torch.randn(12, 6, dtype=torch.float64)))
    assert logits.shape == (5,)
    uniform = torch.zeros(1, 5)
    assert F.cross_entropy(uniform, torch.tensor([2])).item() == pytest.approx(math.log(5))


def test_add_speaker_row_is_mean(xvec):
    w = xvec.output.weight.detach().clone()
    new = xvec.add_speaker()
    assert new == 5 and xvec.config.n_speakers == 6
    torch.testing.assert_close(xvec.output.weight[5], w.mean(0))
    torch.testing.assert_close(xvec.output.weight[:5], w)


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance(v, -v) == pytest.approx(2.0)
    assert cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cosine_distance([0, 0], [1, 0])


def test_l2_examples():
    assert l2_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert l2_distance([0, 0], [3, 4]) == 5.0
    with pytest.raises(ValueError):
        l2_distance([0, 0], [1, 2, 3])
    t = l2_distance(torch.tensor([0.0, 0.0]), torch.tensor([3.0, 4.0]))
    assert isinstance(t, torch.Tensor) and t.item() == 5.0


nonzero_vec = arrays(np.float64, 5, elements=st.floats(-100, 100, allow_nan=False)).filter(
    lambda v: np.linalg.norm(v) > 1e-6)


@settings(max_examples=200, deadline=None)
@given(nonzero_vec, nonzero_vec)
def test_cosine_properties(a, b):
    d = cosine_distance(a, b)
    assert 0.0 <= d <= 2.0
    assert d == pytest.approx(cosine_distance(b, a), abs=1e-12)
    assert cosine_distance(a, a) == pytest.approx(0.0, abs=1e-9)
    assert cosine_distance(a, -a) == pytest.approx(2.0, abs=1e-9)


def test_l2_metric_axioms_random_triples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, b, c = rng.normal(size=(3, 8)) * rng.uniform(0.01, 10)
        assert l2_distance(a, b) == pytest.approx(l2_distance(b, a))
        assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-12
        assert l2_distance(a, b) > 0 and l2_distance(a, a) == 0
