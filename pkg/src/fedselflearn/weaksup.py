"""Feedback costs and weak-supervision losses.

Costs are treated as external feedback: gradients flow through hypothesis
probabilities only.  Tokens are word-level, so token and word error rates
coincide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import autodiff as ad
from .transducer import encode, pad_features, sequence_logprob

COST_KINDS = ("semantic", "binary_ser", "wer", "semantic_plus_wer")


@dataclass(frozen=True)
class WeakLabel:
    """Slot annotations (type, tokens) and an optional alternate transcript."""

    slots: tuple = field(default_factory=tuple)
    transcript: tuple | None = None

    def __post_init__(self):
        slots = tuple((str(k), tuple(v)) for k, v in self.slots)
        for k, v in slots:
            if not v:
                raise ValueError(f"slot {k!r} has an empty token list")
        object.__setattr__(self, "slots", slots)
        if self.transcript is not None:
            object.__setattr__(self, "transcript", tuple(self.transcript))


@dataclass(frozen=True)
class FeedbackSignal:
    cost: float
    kind: str = "semantic"
    noisy: bool = False
    sigma: float = 0.0

    def __post_init__(self):
        hi = 2.0 if self.noisy else 1.0
        if self.kind in ("semantic", "binary_ser") and not (0.0 <= self.cost <= hi):
            raise ValueError(f"{self.kind} cost {self.cost} outside [0, {hi}]")
        if self.kind == "binary_ser" and not self.noisy and self.cost not in (0.0, 1.0):
            raise ValueError("noise-free binary cost must be 0 or 1")


def semantic_cost(hyp, label):
    """Fraction of slots whose tokens are not all present in ``hyp``."""
    slots = label.slots if isinstance(label, WeakLabel) else tuple(label)
    if not slots:
        raise ValueError("semantic cost needs at least one slot")
    present = set(hyp)
    errors = sum(1 for _, toks in slots if not set(toks) <= present)
    return errors / len(slots)


def edit_distance(hyp, ref):
    """Token-level Levenshtein distance."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer_cost(hyp, ref):
    if len(ref) == 0:
        raise ValueError("reference is empty")
    return edit_distance(hyp, ref) / len(ref)


def binary_ser_cost(hyp, transcript):
    if transcript is None:
        raise ValueError("binary feedback needs a transcript")
    return 0.0 if tuple(hyp) == tuple(transcript) else 1.0


def hypothesis_cost(hyp, label, kind="semantic"):
    """Cost of one hypothesis against a weak label."""
    if kind == "semantic":
        return semantic_cost(hyp, label)
    if kind == "wer":
        if label.transcript is None:
            raise ValueError("wer cost needs a transcript in the weak label")
        return wer_cost(hyp, label.transcript)
    if kind == "binary_ser":
        return binary_ser_cost(hyp, label.transcript)
    if kind == "semantic_plus_wer":
        return semantic_cost(hyp, label) + hypothesis_cost(hyp, label, "wer")
    raise ValueError(f"unknown cost kind {kind!r}")


def _phi(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _Phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian with std ``sigma`` conditioned on [0, 1]."""

    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def mean(self):
        s = self.sigma
        if s == 0:
            return 0.0
        z = _Phi(1.0 / s) - 0.5
        return s * (_phi(0.0) - _phi(1.0 / s)) / z

    @property
    def variance(self):
        s = self.sigma
        if s == 0:
            return 0.0
        b = 1.0 / s
        z = _Phi(b) - 0.5
        second = 1.0 - b * _phi(b) / z
        return s * s * second - self.mean ** 2

    def sample(self, rng, size=None):
        """Rejection sampling from N(0, sigma^2) restricted to [0, 1]."""
        n = 1 if size is None else int(np.prod(size))
        if self.sigma == 0:
            out = np.zeros(n)
        else:
            out = np.empty(n)
            filled = 0
            while filled < n:
                need = n - filled
                draw = rng.normal(0.0, self.sigma, size=max(2 * need, 16))
                ok = draw[(draw >= 0.0) & (draw <= 1.0)][:need]
                out[filled : filled + ok.size] = ok
                filled += ok.size
        return float(out[0]) if size is None else out.reshape(size)


def add_noise(cost, noise, rng):
    """M' = M + (-1)^M U' for a binary cost M."""
    if cost not in (0, 1):
        raise ValueError("noise law is defined for binary costs")
    u = noise.sample(rng)
    return float(cost + (-1.0) ** cost * u)


def noisy_feedback(cost, noise, rng):
    noisy = noise.sigma > 0
    value = add_noise(cost, noise, rng) if noisy else float(cost)
    return FeedbackSignal(value, kind="binary_ser", noisy=noisy, sigma=noise.sigma)


def nbest_logprobs(P, feats, nbests):
    """Differentiable log P(y_ij | x_i) for every hypothesis of every n-best list.

    Returns the flat tensor plus the utterance index of each entry.
    """
    x, t_lens = pad_features(feats)
    enc = encode(P, x)
    utt_index, seqs = [], []
    for i, nb in enumerate(nbests):
        if len(nb) == 0:
            raise ValueError("empty n-best list")
        for h in nb:
            utt_index.append(i)
            seqs.append(h.tokens)
    utt_index = np.array(utt_index)
    return sequence_logprob(P, enc, t_lens, seqs, utt_index=utt_index), utt_index


def _normalized_log(logp, utt_index, n_utts):
    """log p-hat per hypothesis, normalized within each utterance's n-best."""
    parts = []
    for i in range(n_utts):
        idx = np.flatnonzero(utt_index == i)
        seg = ad.getitem(logp, idx)
        parts.append(seg - ad.logsumexp(seg, axis=0))
    return ad.concat(parts, axis=0)


def expected_cost_batch(P, feats, nbests, costs):
    """Mean over utterances of sum_i p-hat(y_i|x) M(y_i, z).

    ``costs`` holds one sequence of per-hypothesis costs for each n-best list.
    """
    logp, utt_index = nbest_logprobs(P, feats, nbests)
    log_hat = _normalized_log(logp, utt_index, len(nbests))
    flat_costs = np.concatenate([np.asarray(c, dtype=np.float64) for c in costs])
    if flat_costs.size != utt_index.size:
        raise ValueError("cost count does not match n-best sizes")
    return ad.tsum(ad.exp(log_hat) * flat_costs) * (1.0 / len(nbests))


def expected_cost_loss(P, x, nbest, label=None, costs=None, kind="semantic"):
    """Expected cost of one utterance over its n-best list."""
    if len(nbest) == 0:
        raise ValueError("empty n-best list")
    if costs is None:
        costs = [hypothesis_cost(h.tokens, label, kind) for h in nbest]
    return expected_cost_batch(P, [x], [nbest], [costs])


def sample_hypothesis(nbest, rng, served_only=False):
    """Index of the hypothesis acted on: sampled from p-hat, or the served top-1."""
    if len(nbest) == 0:
        raise ValueError("empty n-best list")
    if served_only:
        return 0
    p = np.exp(nbest.log_probs - nbest.log_probs.max())
    return int(rng.choice(len(nbest), p=p / p.sum()))


def reinforce_batch(P, feats, nbests, chosen, rewards, normalized=True):
    """Mean over utterances of stop_grad(M') * log p(y_chosen|x).

    With ``normalized`` the log-probability is the n-best normalized one,
    which makes the estimator unbiased for the n-best expected cost.
    """
    logp, utt_index = nbest_logprobs(P, feats, nbests)
    if normalized:
        logp = _normalized_log(logp, utt_index, len(nbests))
    starts = np.searchsorted(utt_index, np.arange(len(nbests)))
    picked = ad.getitem(logp, starts + np.asarray(chosen))
    return ad.tsum(picked * np.asarray(rewards, dtype=np.float64)) * (1.0 / len(nbests))


def reinforce_loss(P, x, nbest, feedback, rng, served_only=False, normalized=True):
    """Single-sample policy-gradient loss.

    ``feedback`` maps the chosen hypothesis tokens to a :class:`FeedbackSignal`
    (or a float); it is called only for the hypothesis acted on.
    Returns ``(loss, chosen_index)``.
    """
    k = sample_hypothesis(nbest, rng, served_only)
    signal = feedback(nbest[k].tokens)
    reward = signal.cost if isinstance(signal, FeedbackSignal) else float(signal)
    return reinforce_batch(P, [x], [nbest], [k], [reward], normalized), k
