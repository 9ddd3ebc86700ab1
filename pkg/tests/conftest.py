import numpy as np
import pytest
import torch

from xlingtts.corpus import CorpusConfig, build_corpus
from xlingtts.ttsmodel import ModelConfig, TtsModel

torch.set_num_threads(1)

# filled by test_acceptance.report, printed at the end of the session
ACCEPTANCE = {}

TINY_CORPUS = CorpusConfig(n_languages=3, speakers_per_language=2, phones_per_language=4,
                           n_mels=6, max_utts_per_language=12, imbalance_ratio=2.0,
                           min_phones=3, max_phones=4, min_duration=2, max_duration=3)


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_corpus(TINY_CORPUS, seed=7)


def tiny_model_config(corpus, **kw):
    base = dict(n_phones=corpus.n_phones, n_speakers=len(corpus.speakers),
                n_languages=len(corpus.languages), n_mels=corpus.config.n_mels,
                d_enc=8, d_dec=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16,
                d_spk_emb=4, d_lang_emb=4, d_prenet=8, d_mtl_hidden=8, max_frames=60,
                dropout=0.0, prenet_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(tiny_corpus):
    torch.manual_seed(0)
    return TtsModel(tiny_model_config(tiny_corpus)).eval()


def fd_grad(f, x: torch.Tensor, index, eps: float = 1e-4) -> float:
    """Central finite difference of scalar f() w.r.t. x[index] (x modified in place)."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + eps
        up = f().item()
        x[index] = orig - eps
        down = f().item()
        x[index] = orig
    return (up - down) / (2 * eps)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def sample_indices(t: torch.Tensor, n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    flat = rng.choice(t.numel(), size=min(n, t.numel()), replace=False)
    return [tuple(int(i) for i in np.unravel_index(k, t.shape)) for k in flat]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
