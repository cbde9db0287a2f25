"""Small neural transducer and its exact alignment-marginal loss.

Encoder and prediction network are single-layer gated recurrent nets; the
joint network is ``log_softmax(W_o tanh(W_e enc + W_p pred + b) + b_o)``.
Blank is output symbol 0 and label tokens use ids ``1..vocab_size``.

The loss is ``-log P(y|x)`` under the standard transducer lattice: a path
starts at node (0, 0), emits labels (moving u) or blanks (moving t), and
ends with a blank from node (T-1, U).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import autodiff as ad
from .numerics.params import Layout, ParamVector
from .validation import check_features, check_tokens

BLANK = 0


@dataclass(frozen=True)
class TransducerDims:
    feat_dim: int = 16
    enc_hidden: int = 32
    pred_hidden: int = 32
    embed_dim: int = 16
    joint_hidden: int = 32
    vocab_size: int = 40

    @property
    def n_out(self):
        return self.vocab_size + 1

    def to_dict(self):
        return asdict(self)


def make_layout(dims):
    he, hp, hj, v1 = dims.enc_hidden, dims.pred_hidden, dims.joint_hidden, dims.n_out
    return Layout((
        ("encoder.w_in", (dims.feat_dim, 2 * he)),
        ("encoder.w_rec", (he, 2 * he)),
        ("encoder.bias", (2 * he,)),
        ("embeddings", (v1, dims.embed_dim)),
        ("prediction.w_in", (dims.embed_dim, 2 * hp)),
        ("prediction.w_rec", (hp, 2 * hp)),
        ("prediction.bias", (2 * hp,)),
        ("joint.w_enc", (he, hj)),
        ("joint.w_pred", (hp, hj)),
        ("joint.bias", (hj,)),
        ("joint.w_out", (hj, v1)),
        ("joint.bias_out", (v1,)),
    ))


def init_params(dims, rng, gain=1.0):
    layout = make_layout(dims)
    segs = {}
    for name, shape in layout.segments:
        if len(shape) == 1:
            segs[name] = np.zeros(shape)
        elif name == "embeddings":
            segs[name] = rng.normal(0.0, gain, size=shape)
        else:
            segs[name] = rng.normal(0.0, gain / np.sqrt(shape[0]), size=shape)
    return ParamVector.from_segments(layout, segs)


def _tensors(params):
    """Segment tensors for a ParamVector (constants) or pass through a mapping."""
    if isinstance(params, ParamVector):
        return {k: ad.Tensor(v) for k, v in params.segments().items()}
    return params


def pad_features(feats):
    """Stack (T_i, D) arrays into (B, T_max, D) plus the length vector."""
    lens = np.array([f.shape[0] for f in feats], dtype=np.int64)
    out = np.zeros((len(feats), int(lens.max()), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, lens


def encode(P, feats):
    """Encoder followed by its joint projection, (B, T, H_j)."""
    P = _tensors(P)
    xw = ad.matmul(ad.as_tensor(feats), P["encoder.w_in"]) + P["encoder.bias"]
    h0 = np.zeros((1, P["encoder.w_rec"].shape[0]))
    hs = ad.gated_rnn(xw, h0, P["encoder.w_rec"])
    return ad.matmul(hs, P["joint.w_enc"])


def predict(P, tokens_in):
    """Prediction network on (B, U+1) inputs whose first column is blank."""
    P = _tensors(P)
    emb = ad.getitem(P["embeddings"], tokens_in)
    xw = ad.matmul(emb, P["prediction.w_in"]) + P["prediction.bias"]
    h0 = np.zeros((1, P["prediction.w_rec"].shape[0]))
    hs = ad.gated_rnn(xw, h0, P["prediction.w_rec"])
    return ad.matmul(hs, P["joint.w_pred"]) + P["joint.bias"]


def joint_logprobs(P, enc_proj, pred_proj):
    """(B, T, U+1, V+1) log-posteriors over output symbols."""
    P = _tensors(P)
    s = ad.expand_dims(enc_proj, 2) + ad.expand_dims(pred_proj, 1)
    logits = ad.matmul(ad.tanh(s), P["joint.w_out"]) + P["joint.bias_out"]
    return ad.log_softmax(logits, axis=-1)


def pad_targets(token_seqs):
    """Prediction inputs (B, U_max+1) and next-label ids (B, max(U_max, 1))."""
    u_lens = np.array([len(y) for y in token_seqs], dtype=np.int64)
    u_max = int(u_lens.max()) if len(u_lens) else 0
    inputs = np.zeros((len(token_seqs), u_max + 1), dtype=np.int64)
    nxt = np.zeros((len(token_seqs), max(u_max, 1)), dtype=np.int64)
    for i, y in enumerate(token_seqs):
        inputs[i, 1 : len(y) + 1] = y
        nxt[i, : len(y)] = y
    return inputs, nxt, u_lens


def lattice_logprob(lp, next_labels, t_lens, u_lens):
    """log P(y|x) per batch row by the forward recursion over lattice rows.

    Within row t the label moves form a linear recurrence in u, solved in
    closed form:  alpha[t, u] = C[t, u] + logcumsumexp(a[t] - C[t])[u]
    where a[t, k] = alpha[t-1, k] + blank[t-1, k] and C[t] is the running
    sum of label log-probabilities along row t.
    """
    B, T, U1, _ = lp.shape
    blank = ad.getitem(lp, (slice(None), slice(None), slice(None), 0))
    if U1 > 1:
        bi = np.arange(B)[:, None, None]
        ti = np.arange(T)[None, :, None]
        ui = np.arange(U1 - 1)[None, None, :]
        label = ad.getitem(lp, (bi, ti, ui, next_labels[:, None, : U1 - 1]))
        csum = ad.concat([np.zeros((B, T, 1)), ad.cumsum(label, axis=-1)], axis=-1)
    else:
        csum = ad.as_tensor(np.zeros((B, T, 1)))
    rows = [ad.getitem(csum, (slice(None), 0))]
    if T > 1:
        shift = ad.getitem(blank, (slice(None), slice(0, T - 1))) - ad.getitem(csum, (slice(None), slice(1, T)))
        for t in range(1, T):
            a = rows[-1] + ad.getitem(shift, (slice(None), t - 1))
            rows.append(ad.logcumsumexp(a) + ad.getitem(csum, (slice(None), t)))
    alpha = ad.stack(rows, axis=1)
    b = np.arange(B)
    last_t = np.asarray(t_lens) - 1
    return ad.getitem(alpha, (b, last_t, u_lens)) + ad.getitem(blank, (b, last_t, u_lens))


def sequence_logprob(P, enc_proj, t_lens, token_seqs, utt_index=None):
    """Differentiable log P(y_i | x_{utt_index[i]}) for a list of label sequences."""
    P = _tensors(P)
    if utt_index is not None:
        utt_index = np.asarray(utt_index, dtype=np.int64)
        enc_proj = ad.getitem(enc_proj, utt_index)
        t_lens = np.asarray(t_lens)[utt_index]
        t_max = int(t_lens.max())
        if t_max < enc_proj.shape[1]:
            enc_proj = ad.getitem(enc_proj, (slice(None), slice(0, t_max)))
    inputs, nxt, u_lens = pad_targets(token_seqs)
    pred = predict(P, inputs)
    lp = joint_logprobs(P, enc_proj, pred)
    return lattice_logprob(lp, nxt, t_lens, u_lens)


def batch_logprob(P, feats, token_seqs):
    """log P(y_i|x_i) for paired lists of feature matrices and label sequences."""
    x, t_lens = pad_features(feats)
    enc = encode(P, x)
    return sequence_logprob(P, enc, t_lens, token_seqs)


class PredictionState:
    """Step-wise prediction network used by the decoders (numpy only)."""

    def __init__(self, segs):
        self.emb = segs["embeddings"]
        self.w_in = segs["prediction.w_in"]
        self.w_rec = segs["prediction.w_rec"]
        self.bias = segs["prediction.bias"]
        self.w_pred = segs["joint.w_pred"]
        self.jbias = segs["joint.bias"]
        self.hdim = self.w_rec.shape[0]

    def step(self, tokens, h):
        z = self.emb[tokens] @ self.w_in + self.bias + h @ self.w_rec
        f = 0.5 * (1.0 + np.tanh(0.5 * z[..., : self.hdim]))
        c = np.tanh(z[..., self.hdim :])
        h = h + f * (c - h)
        return h, h @ self.w_pred + self.jbias

    def initial(self, n):
        return self.step(np.zeros(n, dtype=np.int64), np.zeros((n, self.hdim)))


def joint_step(segs, enc_t, pred_out):
    """Log-posteriors for encoder projection rows against prediction outputs."""
    logits = np.tanh(enc_t + pred_out) @ segs["joint.w_out"] + segs["joint.bias_out"]
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class TransducerModel:
    """Parameters plus dimensions; all methods are pure in (params, inputs)."""

    def __init__(self, dims, params):
        if params.layout != make_layout(dims):
            raise ValueError("parameter layout does not match model dimensions")
        self.dims = dims
        self.params = params

    @classmethod
    def initialize(cls, dims, seed=0, gain=1.0):
        return cls(dims, init_params(dims, np.random.default_rng(seed), gain))

    def with_params(self, params):
        return TransducerModel(self.dims, params)

    def _check(self, x, y):
        x = check_features(x, self.dims.feat_dim)
        y = check_tokens(y, self.dims.vocab_size)
        return x, y

    def forward_lattice(self, x, y):
        """log P(k | t, u) as a (T, U+1, V+1) array."""
        x, y = self._check(x, y)
        enc = encode(self.params, x[None])
        inputs, _, _ = pad_targets([y])
        lp = joint_logprobs(self.params, enc, predict(self.params, inputs))
        return lp.value[0]

    def posterior_logprob(self, x, y):
        x, y = self._check(x, y)
        return float(batch_logprob(self.params, [x], [y]).value[0])

    def loss(self, x, y):
        """Transducer loss -log P(y|x)."""
        return -self.posterior_logprob(x, y)

    def batch_logprob(self, feats, token_seqs):
        feats = [check_features(f, self.dims.feat_dim) for f in feats]
        token_seqs = [check_tokens(y, self.dims.vocab_size) for y in token_seqs]
        return batch_logprob(self.params, feats, token_seqs).value.copy()
