import numpy as np
import pytest

from fedselflearn.corpus import CorpusConfig, generate_corpus
from fedselflearn.decoder import NBestList
from fedselflearn.numerics import ParamVector
from fedselflearn.transducer import TransducerDims, TransducerModel

MICRO = TransducerDims(feat_dim=3, enc_hidden=3, pred_hidden=3, embed_dim=2, joint_hidden=4, vocab_size=3)


def micro_model(seed, dims=MICRO, gain=1.0):
    return TransducerModel.initialize(dims, seed=seed, gain=gain)


def random_pair(rng, dims=MICRO, t=(2, 5), u=(0, 4)):
    x = rng.normal(size=(int(rng.integers(t[0], t[1] + 1)), dims.feat_dim))
    y = tuple(int(v) for v in rng.integers(1, dims.vocab_size + 1, size=int(rng.integers(u[0], u[1] + 1))))
    return x, y


def numeric_grad(f, params, eps=1e-6):
    """Central finite differences of a scalar function of a ParamVector."""
    v = params.values
    out = np.empty_like(v)
    for i in range(v.size):
        up, dn = v.copy(), v.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (f(ParamVector(up, params.layout)) - f(ParamVector(dn, params.layout))) / (2 * eps)
    return out


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def nbest_of(seqs, logps):
    return NBestList.from_scored(list(zip(seqs, logps)))


TINY_CORPUS = CorpusConfig(pretrain_size=80, rehearsal_size=40, n_devices=6, utts_per_device=24, eval_size=30)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY_CORPUS, seed=3)


@pytest.fixture(scope="session")
def tiny_dims(tiny_corpus):
    return TransducerDims(feat_dim=tiny_corpus.config.feat_dim, enc_hidden=8, pred_hidden=8, embed_dim=4,
                          joint_hidden=8, vocab_size=len(tiny_corpus.vocab))


@pytest.fixture(scope="session")
def tiny_params(tiny_dims):
    return TransducerModel.initialize(tiny_dims, seed=5).params


CRITERIA = {}


def record_criterion(number, ok, detail):
    """Store one acceptance outcome for the end-of-session summary, then assert it."""
    CRITERIA[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
