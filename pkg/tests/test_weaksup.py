import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import truncnorm

from fedselflearn.decoder import beam_decode
from fedselflearn.evaluation import score_set
from fedselflearn.numerics import autodiff as ad, backprop
from fedselflearn.transducer import batch_logprob
from fedselflearn.weaksup import (FeedbackSignal, NoiseModel, WeakLabel, add_noise, binary_ser_cost,
                                  edit_distance, expected_cost_batch, expected_cost_loss, hypothesis_cost,
                                  noisy_feedback, reinforce_batch, reinforce_loss, semantic_cost, wer_cost)

from conftest import MICRO, micro_model, nbest_of, numeric_grad, rel_err


def test_worked_example_semantic_cost():
    hyp = "play hello by beyond in main speaker".split()
    label = WeakLabel((("artist", ("beyonce",)), ("song", ("halo",)), ("device", ("main", "speaker"))))
    assert semantic_cost(hyp, label) == 2 / 3


def test_semantic_cost_extremes():
    label = WeakLabel((("a", (1,)), ("b", (2, 3)), ("c", (4,))))
    assert semantic_cost((9, 4, 3, 2, 1), label) == 0.0
    assert semantic_cost((), label) == 1.0
    with pytest.raises(ValueError):
        semantic_cost((1,), WeakLabel(()))
    with pytest.raises(ValueError):
        WeakLabel((("a", ()),))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(1, 8), min_size=1, max_size=3), min_size=1, max_size=4),
       st.lists(st.integers(1, 8), max_size=8), st.integers(1, 8))
def test_semantic_cost_grid_and_monotone(slot_tokens, hyp, extra):
    label = WeakLabel(tuple((f"s{i}", tuple(t)) for i, t in enumerate(slot_tokens)))
    k = len(slot_tokens)
    c = semantic_cost(hyp, label)
    assert 0.0 <= c <= 1.0
    assert abs(c * k - round(c * k)) < 1e-12
    assert semantic_cost(list(hyp) + [extra], label) <= c


def test_wer_cost_examples():
    assert wer_cost((1, 2, 3), (1, 2, 3)) == 0.0
    assert wer_cost(("a", "x", "c"), ("a", "b", "c")) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        wer_cost((1,), ())


def brute_edit(a, b):
    """Exhaustive edit-path search: minimum over all alignments by recursion."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(brute_edit(a[1:], b) + 1, brute_edit(a, b[1:]) + 1, brute_edit(a[1:], b[1:]) + (a[0] != b[0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_edit_distance_matches_exhaustive_search(a, b):
    assert edit_distance(a, b) == brute_edit(tuple(a), tuple(b))


def test_binary_ser_cost():
    assert binary_ser_cost((1, 2), (1, 2)) == 0.0
    assert binary_ser_cost((1, 3), (1, 2)) == 1.0
    assert binary_ser_cost((1, 2, 2), (1, 2)) == 1.0
    with pytest.raises(ValueError):
        binary_ser_cost((1,), None)


def test_mean_binary_cost_equals_set_ser(tiny_corpus, tiny_params):
    from fedselflearn.decoder import greedy_decode_batch

    utts = tiny_corpus.eval_sets["general_old"]
    hyps = greedy_decode_batch(tiny_params, tiny_corpus.features(utts))
    scores = score_set(hyps, utts)
    assert scores.ser == pytest.approx(np.mean([binary_ser_cost(h, u.tokens) for h, u in zip(hyps, utts)]))


def test_hypothesis_cost_kinds():
    label = WeakLabel((("a", (1,)), ("b", (2,))), transcript=(1, 5, 2))
    hyp = (1, 5, 3)
    assert hypothesis_cost(hyp, label, "semantic") == 0.5
    assert hypothesis_cost(hyp, label, "wer") == pytest.approx(1 / 3)
    assert hypothesis_cost(hyp, label, "binary_ser") == 1.0
    assert hypothesis_cost(hyp, label, "semantic_plus_wer") == pytest.approx(0.5 + 1 / 3)
    with pytest.raises(ValueError):
        hypothesis_cost(hyp, label, "bleu")
    with pytest.raises(ValueError):
        hypothesis_cost(hyp, WeakLabel((("a", (1,)),)), "wer")


def test_feedback_signal_ranges():
    FeedbackSignal(1.0, "binary_ser")
    FeedbackSignal(1.7, "binary_ser", noisy=True, sigma=0.2)
    with pytest.raises(ValueError):
        FeedbackSignal(0.5, "binary_ser")
    with pytest.raises(ValueError):
        FeedbackSignal(1.5, "semantic")


# noise

def test_zero_sigma_noise_is_identity():
    rng = np.random.default_rng(0)
    assert add_noise(0, NoiseModel(0.0), rng) == 0.0
    assert add_noise(1, NoiseModel(0.0), rng) == 1.0
    assert NoiseModel(0.0).mean == 0.0


@pytest.mark.parametrize("sigma", [0.05, 0.1, 0.2, 0.4, 1.0, 3.0])
def test_truncated_normal_moments_match_scipy(sigma):
    ref = truncnorm(0.0, 1.0 / sigma, loc=0.0, scale=sigma)
    nm = NoiseModel(sigma)
    assert nm.mean == pytest.approx(ref.mean(), rel=1e-10)
    assert nm.variance == pytest.approx(ref.var(), rel=1e-8)
    assert nm.mean < 0.5


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([0, 1]), st.floats(0.0, 2.0), st.integers(0, 2**32 - 1))
def test_noisy_cost_stays_in_unit_interval(cost, sigma, seed):
    v = add_noise(cost, NoiseModel(sigma), np.random.default_rng(seed))
    assert 0.0 <= v <= 1.0


def test_noise_mean_within_three_standard_errors():
    nm = NoiseModel(0.2)
    u = nm.sample(np.random.default_rng(1), size=100_000)
    assert u.min() >= 0.0 and u.max() <= 1.0
    se = u.std(ddof=1) / np.sqrt(u.size)
    assert abs(u.mean() - nm.mean) < 3 * se


def test_noise_requires_binary_cost_and_valid_sigma():
    with pytest.raises(ValueError):
        add_noise(0.5, NoiseModel(0.1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        NoiseModel(-0.1)


def test_noisy_feedback_signal():
    sig = noisy_feedback(1, NoiseModel(0.3), np.random.default_rng(0))
    assert sig.noisy and sig.kind == "binary_ser" and 0.0 <= sig.cost <= 1.0
    assert noisy_feedback(1, NoiseModel(0.0), np.random.default_rng(0)).cost == 1.0


# expected cost and REINFORCE

def fixed_instance(seed, n_hyps=4):
    rng = np.random.default_rng(seed)
    model = micro_model(seed, gain=1.5)
    x = rng.normal(size=(int(rng.integers(3, 6)), MICRO.feat_dim))
    seqs = list(dict.fromkeys(tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(0, 4))))
                              for _ in range(12)))[:n_hyps]
    lps = model.batch_logprob([x] * len(seqs), seqs)
    return model, x, nbest_of(seqs, lps)


def test_equal_costs_give_constant_loss_and_zero_gradient():
    model, x, nb = fixed_instance(0)
    value, g = backprop(lambda P: expected_cost_loss(P, x, nb, costs=[0.4] * len(nb)), model.params)
    assert value == pytest.approx(0.4, abs=1e-12)
    assert np.abs(g.values).max() < 1e-12


def test_expected_cost_arithmetic():
    # two hypotheses whose model probabilities are in ratio 0.7 : 0.3
    model, x, _ = fixed_instance(1)
    seqs = [(1,), (2,)]
    lps = model.batch_logprob([x, x], seqs)
    nb = nbest_of(seqs, lps)
    p = np.exp(nb.log_probs - np.logaddexp.reduce(nb.log_probs))
    value, _ = backprop(lambda P: expected_cost_loss(P, x, nb, costs=[0.0, 1.0]), model.params)
    assert value == pytest.approx(p[1], abs=1e-12)
    cost = expected_cost_batch(model.params, [x], [nb], [[0.0, 1.0]])
    assert float(cost.value) == pytest.approx(p[1], abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_expected_cost_gradient_matches_finite_differences(seed):
    model, x, nb = fixed_instance(seed)
    costs = list(np.random.default_rng(seed).uniform(size=len(nb)))

    def f(P):
        return expected_cost_loss(P, x, nb, costs=costs)

    _, g = backprop(f, model.params)
    num = numeric_grad(lambda q: float(f(q).value), model.params, eps=1e-5)
    assert rel_err(g.values, num) < 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 50), st.floats(-3, 3))
def test_expected_cost_shift_invariance(seed, c):
    model, x, nb = fixed_instance(seed)
    costs = np.random.default_rng(seed).uniform(size=len(nb))
    v1, g1 = backprop(lambda P: expected_cost_loss(P, x, nb, costs=costs), model.params)
    v2, g2 = backprop(lambda P: expected_cost_loss(P, x, nb, costs=costs + c), model.params)
    assert v2 == pytest.approx(v1 + c, abs=1e-10)
    np.testing.assert_allclose(g1.values, g2.values, atol=1e-10)


def test_semantic_expected_cost_uses_label():
    model, x, nb = fixed_instance(2)
    label = WeakLabel((("a", nb[0].tokens[:1] or (1,)),))
    v, _ = backprop(lambda P: expected_cost_loss(P, x, nb, label=label), model.params)
    costs = [semantic_cost(h.tokens, label) for h in nb]
    v2, _ = backprop(lambda P: expected_cost_loss(P, x, nb, costs=costs), model.params)
    assert v == v2
    with pytest.raises(ValueError):
        expected_cost_loss(model.params, x, nbest_of([], []), costs=[])


def test_zero_reward_gives_zero_gradient():
    model, x, nb = fixed_instance(3)
    _, g = backprop(lambda P: reinforce_loss(P, x, nb, lambda y: 0.0, np.random.default_rng(0))[0],
                    model.params)
    assert np.all(g.values == 0)


def test_singleton_reinforce_is_logprob_gradient():
    model, x, nb = fixed_instance(4, n_hyps=1)
    y = nb[0].tokens
    _, g = backprop(lambda P: reinforce_loss(P, x, nb, lambda h: FeedbackSignal(1.0, "binary_ser"),
                                             np.random.default_rng(0), normalized=False)[0], model.params)
    _, g_ref = backprop(lambda P: ad.tsum(batch_logprob(P, [x], [y])), model.params)
    np.testing.assert_allclose(g.values, g_ref.values, atol=1e-12)


def test_reinforce_exact_expectation_equals_expected_cost_gradient():
    # summing the single-sample estimator over the n-best, weighted by p-hat, is the analytic gradient
    model, x, nb = fixed_instance(5)
    costs = np.random.default_rng(5).uniform(size=len(nb))
    p = np.exp(nb.log_probs - np.logaddexp.reduce(nb.log_probs))
    total = np.zeros_like(model.params.values)
    for k in range(len(nb)):
        _, g = backprop(lambda P: reinforce_batch(P, [x], [nb], [k], [costs[k]]), model.params)
        total += p[k] * g.values
    _, g_ref = backprop(lambda P: expected_cost_loss(P, x, nb, costs=costs), model.params)
    np.testing.assert_allclose(total, g_ref.values, atol=1e-10)


def test_reinforce_sampling_frequencies_follow_phat():
    model, x, nb = fixed_instance(6)
    p = np.exp(nb.log_probs - np.logaddexp.reduce(nb.log_probs))
    rng = np.random.default_rng(0)
    seen = []
    counts = np.zeros(len(nb))
    for _ in range(4000):
        _, k = reinforce_loss(model.params, x, nb, lambda y: seen.append(y) or 1.0, rng)
        counts[k] += 1
    assert seen and all(isinstance(y, tuple) for y in seen)
    np.testing.assert_allclose(counts / counts.sum(), p, atol=0.03)


def test_served_only_always_picks_top():
    model, x, nb = fixed_instance(7)
    rng = np.random.default_rng(0)
    asked = []
    for _ in range(20):
        _, k = reinforce_loss(model.params, x, nb, lambda y: asked.append(y) or 1.0, rng, served_only=True)
        assert k == 0
    assert set(asked) == {nb.top.tokens}


def test_beam_nbest_feeds_weak_losses():
    model = micro_model(9, gain=1.5)
    x = np.random.default_rng(9).normal(size=(4, MICRO.feat_dim))
    nb = beam_decode(model, x, beam=6, m=4)
    label = WeakLabel((("a", (1,)),))
    v, g = backprop(lambda P: expected_cost_loss(P, x, nb, label=label), model.params)
    assert 0.0 <= v <= 1.0 and np.all(np.isfinite(g.values))


def test_combinations_of_costs_are_bounded():
    label = WeakLabel((("a", (1,)), ("b", (2,))), transcript=(1, 2))
    for hyp in itertools.product(range(0, 3), repeat=2):
        assert 0.0 <= hypothesis_cost(hyp, label, "semantic_plus_wer") <= 2.0
