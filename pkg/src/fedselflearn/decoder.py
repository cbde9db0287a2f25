"""Beam search n-best decoding, n-best normalization and confidence filtering.

The search is frame-synchronous with a per-frame label budget, batched
over utterances; prefixes reaching the same label sequence are merged by a
rolling hash.  Surviving hypotheses are rescored with the exact lattice
log-probability, so ``Hypothesis.log_prob`` is ``log P(y|x)`` and not the
search score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .transducer import PredictionState, encode, joint_step, pad_features, sequence_logprob
from .validation import check_features, check_probability_band

_HASH_MUL = np.uint64(1_000_003)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    log_prob: float
    served: bool = False


@dataclass(frozen=True)
class NBestList:
    hypotheses: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def __getitem__(self, i):
        return self.hypotheses[i]

    @property
    def top(self):
        return self.hypotheses[0]

    @property
    def log_probs(self):
        return np.array([h.log_prob for h in self.hypotheses])

    @property
    def token_seqs(self):
        return [h.tokens for h in self.hypotheses]

    @classmethod
    def from_scored(cls, scored, m=None):
        """Build a list from (tokens, log_prob) pairs: dedupe, order, truncate."""
        best = {}
        for tokens, lp in scored:
            tokens = tuple(int(t) for t in tokens)
            if tokens not in best or lp > best[tokens]:
                best[tokens] = float(lp)
        ordered = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
        if m is not None:
            ordered = ordered[:m]
        return cls(tuple(Hypothesis(t, lp, served=(i == 0)) for i, (t, lp) in enumerate(ordered)))


def _segments(model_or_params):
    params = getattr(model_or_params, "params", model_or_params)
    return params, params.segments()


class _Beam:
    """Batched hypothesis set: arrays indexed by (utterance, slot)."""

    def __init__(self, score, hsh, h, g, toks, lens):
        self.score, self.hsh, self.h, self.g, self.toks, self.lens = score, hsh, h, g, toks, lens

    @classmethod
    def empty(cls, like, width):
        B = like.score.shape[0]
        return cls(np.full((B, width), -np.inf), np.zeros((B, width), dtype=np.uint64),
                   np.zeros((B, width, like.h.shape[-1])), np.zeros((B, width, like.g.shape[-1])),
                   np.zeros((B, width, like.toks.shape[-1]), dtype=np.int64),
                   np.zeros((B, width), dtype=np.int64))

    def concat(self, other):
        return _Beam(*(np.concatenate([a, b], axis=1) for a, b in zip(self._arrays(), other._arrays())))

    def _arrays(self):
        return self.score, self.hsh, self.h, self.g, self.toks, self.lens


def _select(src, row, parent, sym, score, pred, width):
    """Merge candidates with equal label sequences and keep the best ``width`` per row.

    Candidates are (row, parent slot in ``src``, symbol, score); symbol 0
    keeps the parent's prefix, any other symbol appends to it.
    """
    keep = np.isfinite(score)
    row, parent, sym, score = row[keep], parent[keep], sym[keep], score[keep]
    if not len(score):
        return _Beam.empty(src, width)
    parent_hash = src.hsh[row, parent]
    with np.errstate(over="ignore"):
        hsh = np.where(sym == 0, parent_hash, parent_hash * _HASH_MUL + sym.astype(np.uint64))
    order = np.lexsort((sym, parent, hsh, row))
    row, parent, sym, score, hsh = row[order], parent[order], sym[order], score[order], hsh[order]
    starts = np.flatnonzero(np.r_[True, (row[1:] != row[:-1]) | (hsh[1:] != hsh[:-1])])
    merged = np.logaddexp.reduceat(score, starts)
    row, parent, sym, hsh = row[starts], parent[starts], sym[starts], hsh[starts]

    order = np.lexsort((hsh, -merged, row))
    row, merged, hsh, parent, sym = row[order], merged[order], hsh[order], parent[order], sym[order]
    rank = np.arange(len(row)) - np.searchsorted(row, row, side="left")
    sel = rank < width
    row, merged, hsh, parent, sym, rank = (a[sel] for a in (row, merged, hsh, parent, sym, rank))

    out = _Beam.empty(src, width)
    out.score[row, rank] = merged
    out.hsh[row, rank] = hsh
    out.h[row, rank] = src.h[row, parent]
    out.g[row, rank] = src.g[row, parent]
    out.toks[row, rank] = src.toks[row, parent]
    out.lens[row, rank] = src.lens[row, parent]
    emit = sym != 0
    if emit.any():
        er, ek, es = row[emit], rank[emit], sym[emit]
        out.toks[er, ek, out.lens[er, ek]] = es
        out.lens[er, ek] += 1
        out.h[er, ek], out.g[er, ek] = pred.step(es, out.h[er, ek])
    return out


def _search(segs, enc, t_lens, beam, max_symbols=3):
    """Frame-synchronous beam search with up to ``max_symbols`` labels per frame.

    Within a frame, a hypothesis either takes blank (and waits for the next
    frame) or emits a label and stays; after ``max_symbols`` labels it must
    take blank.  Returns per-utterance token tuples.
    """
    B, t_max, _ = enc.shape
    pred = PredictionState(segs)
    h0, g0 = pred.initial(1)
    rows = np.arange(B)
    start = _Beam(np.full((B, beam), -np.inf), np.zeros((B, beam), dtype=np.uint64),
                  np.broadcast_to(h0, (B, beam, h0.shape[-1])).copy(),
                  np.broadcast_to(g0, (B, beam, g0.shape[-1])).copy(),
                  np.zeros((B, beam, max(t_max * max_symbols, 1)), dtype=np.int64),
                  np.zeros((B, beam), dtype=np.int64))
    start.score[:, 0] = 0.0
    hyps = start

    for t in range(t_max):
        live = t < t_lens
        active = hyps
        done = _Beam.empty(hyps, 0)
        for s in range(max_symbols + 1):
            lp = joint_step(segs, enc[:, t][:, None, :], active.g)
            lp[~live] = -np.inf
            lp[~live, :, 0] = 0.0 if s == 0 else -np.inf
            union = done.concat(active)
            kd, ka = done.score.shape[1], active.score.shape[1]
            # blank candidates: finished hypotheses carried over plus blank extensions
            r_done = np.repeat(rows, kd)
            r_act = np.repeat(rows, ka)
            cand_row = np.r_[r_done, r_act]
            cand_parent = np.r_[np.tile(np.arange(kd), B), kd + np.tile(np.arange(ka), B)]
            cand_score = np.r_[done.score.ravel(), (active.score + lp[:, :, 0]).ravel()]
            done = _select(union, cand_row, cand_parent, np.zeros_like(cand_row), cand_score, pred, beam)
            if s == max_symbols or not np.isfinite(active.score).any():
                break
            lab = active.score[:, :, None] + lp[:, :, 1:]
            flat = lab.reshape(B, -1)
            n_pre = min(2 * beam, flat.shape[1])
            pre = np.argpartition(-flat, n_pre - 1, axis=1)[:, :n_pre]
            pre_score = np.take_along_axis(flat, pre, axis=1)
            # labels that cannot beat the current beam-th finished hypothesis are dropped
            floor = np.sort(done.score, axis=1)[:, -beam] if done.score.shape[1] >= beam else np.full(B, -np.inf)
            pre_score = np.where(pre_score > floor[:, None], pre_score, -np.inf)
            parent, sym = np.divmod(pre, lp.shape[-1] - 1)
            active = _select(active, np.repeat(rows, n_pre), parent.ravel(), sym.ravel() + 1,
                             pre_score.ravel(), pred, beam)
        hyps = done

    out = []
    for b in range(B):
        out.append([tuple(hyps.toks[b, k, : hyps.lens[b, k]].tolist())
                    for k in range(beam) if np.isfinite(hyps.score[b, k])])
    return out


def beam_decode_batch(model, feats, beam=8, m=4, max_symbols=3, chunk=64):
    """n-best lists for a batch of feature sequences, ``chunk`` utterances at a time."""
    if not (beam >= m >= 1):
        raise ValueError(f"need beam >= m >= 1, got beam={beam}, m={m}")
    if max_symbols < 1:
        raise ValueError("max_symbols must be >= 1")
    params, segs = _segments(model)
    feats = [check_features(f) for f in feats]
    # length-sorted chunks keep padding small; results are per utterance either way
    order = sorted(range(len(feats)), key=lambda i: (feats[i].shape[0], i))
    out = [None] * len(feats)
    for i in range(0, len(order), chunk):
        idx = order[i : i + chunk]
        for j, nb in zip(idx, _beam_chunk(params, segs, [feats[j] for j in idx], beam, m, max_symbols)):
            out[j] = nb
    return out


def _beam_chunk(params, segs, feats, beam, m, max_symbols):
    x, t_lens = pad_features(feats)
    enc = encode(params, x).value
    candidates = _search(segs, enc, t_lens, beam, max_symbols)
    utt_index, seqs = [], []
    for b, hyps in enumerate(candidates):
        for h in dict.fromkeys(hyps):
            utt_index.append(b)
            seqs.append(h)
    scores = sequence_logprob(params, enc, t_lens, seqs, utt_index=utt_index).value
    grouped = [[] for _ in feats]
    for b, seq, s in zip(utt_index, seqs, scores):
        grouped[b].append((seq, s))
    return [NBestList.from_scored(g, m) for g in grouped]


def beam_decode(model, x, beam=8, m=4, max_symbols=3):
    return beam_decode_batch(model, [x], beam=beam, m=m, max_symbols=max_symbols)[0]


def greedy_decode_batch(model, feats, max_symbols=3):
    """Best-path decoding, at most ``max_symbols`` labels per frame."""
    params, segs = _segments(model)
    feats = [check_features(f) for f in feats]
    x, t_lens = pad_features(feats)
    enc = encode(params, x).value
    B = len(feats)
    pred = PredictionState(segs)
    h, g = pred.initial(B)
    out = [[] for _ in range(B)]
    for t in range(enc.shape[1]):
        live = t < t_lens
        for _ in range(max_symbols):
            lp = joint_step(segs, enc[:, t], g)
            sym = lp.argmax(axis=-1)
            emit = live & (sym != 0)
            if not emit.any():
                break
            idx = np.flatnonzero(emit)
            h_new, g_new = pred.step(sym[idx], h[idx])
            h[idx], g[idx] = h_new, g_new
            for i in idx:
                out[i].append(int(sym[i]))
            live = emit
    return [tuple(o) for o in out]


def normalize_nbest(log_probs):
    """Normalized hypothesis probabilities p_i / sum_j p_j, via logsumexp."""
    lp = np.asarray(getattr(log_probs, "log_probs", log_probs), dtype=np.float64)
    if lp.size == 0:
        raise ValueError("empty n-best list")
    m = lp.max()
    w = np.exp(lp - m)
    return w / w.sum()


def confidence(nbest, mode="posterior"):
    """Top-hypothesis confidence: n-best posterior, or its per-token geometric mean."""
    p = float(normalize_nbest(nbest)[0])
    if mode == "posterior":
        return p
    if mode == "per_token":
        n = max(len(nbest.top.tokens), 1)
        return p ** (1.0 / n)
    raise ValueError(f"unknown confidence mode {mode!r}")


def confidence_filter(nbest, low=0.05, high=0.95, mode="posterior"):
    """True when the top hypothesis confidence lies in [low, high]."""
    low, high = check_probability_band(low, high)
    c = confidence(nbest, mode)
    return low <= c <= high
