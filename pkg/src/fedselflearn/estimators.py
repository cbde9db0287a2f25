"""scikit-learn style front ends for supervised pre-training and federated self-learning."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ExperimentConfig
from .decoder import beam_decode_batch, greedy_decode_batch
from .evaluation import corpus_wer
from .fedsim import run_experiment
from .numerics import OptimizerState, adam_step, autodiff as ad, backprop
from .transducer import TransducerDims, TransducerModel, batch_logprob
from .validation import check_features, check_paired, check_tokens

log = logging.getLogger(__name__)


def supervised_train(params, X, y, epochs=15, lr=3e-3, batch_size=16, seed=0, eval_fn=None,
                     target=None):
    """Minibatch Adam on the transducer loss.

    ``eval_fn(params) -> float`` is called after each epoch; training stops
    early once it drops to ``target``.  With an ``eval_fn`` the best-scoring
    parameters are returned.  Returns (params, history).
    """
    rng = np.random.default_rng(seed)
    opt = OptimizerState("adam", lr=lr)
    history = []
    best, best_wer = params, np.inf
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        losses = []
        for i in range(0, len(X), batch_size):
            idx = order[i : i + batch_size]
            fx, fy = [X[j] for j in idx], [y[j] for j in idx]
            value, grad = backprop(lambda P: -ad.mean(batch_logprob(P, fx, fy)), params)
            params = adam_step(opt, params, grad)
            losses.append(value)
        rec = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if eval_fn is not None:
            rec["wer"] = float(eval_fn(params))
            if rec["wer"] < best_wer:
                best, best_wer = params, rec["wer"]
        history.append(rec)
        log.info("epoch %d loss %.4f wer %s", rec["epoch"], rec["loss"], rec.get("wer"))
        if target is not None and rec.get("wer", np.inf) <= target:
            break
    return (best if eval_fn is not None and history else params), history


class TransducerRecognizer(BaseEstimator):
    """Sequence recognizer: feature matrices in, token-id tuples out.

    Parameters mirror the model and pre-training options; ``fit`` trains from
    a fresh initialization (or ``warm_start`` params) with Adam.
    """

    def __init__(self, vocab_size=40, feat_dim=16, enc_hidden=32, pred_hidden=32, embed_dim=16,
                 joint_hidden=32, epochs=15, lr=3e-3, batch_size=16, target_wer=None, decode="greedy",
                 beam=8, nbest=4, random_state=0, warm_start=None):
        self.vocab_size = vocab_size
        self.feat_dim = feat_dim
        self.enc_hidden = enc_hidden
        self.pred_hidden = pred_hidden
        self.embed_dim = embed_dim
        self.joint_hidden = joint_hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.target_wer = target_wer
        self.decode = decode
        self.beam = beam
        self.nbest = nbest
        self.random_state = random_state
        self.warm_start = warm_start

    def _dims(self):
        return TransducerDims(self.feat_dim, self.enc_hidden, self.pred_hidden, self.embed_dim,
                              self.joint_hidden, self.vocab_size)

    def _check_X(self, X):
        X, _ = check_paired(X)
        return [check_features(x, self.feat_dim) for x in X]

    def fit(self, X, y, eval_set=None):
        """Train on paired (features, tokens).  ``eval_set=(X_dev, y_dev)`` enables early stopping."""
        X, y = check_paired(X, y)
        X = [check_features(x, self.feat_dim) for x in X]
        y = [check_tokens(t, self.vocab_size) for t in y]
        dims = self._dims()
        model = TransducerModel.initialize(dims, seed=self.random_state)
        params = model.params
        if self.warm_start is not None:
            params.check_compatible(self.warm_start)
            params = self.warm_start
        eval_fn = None
        if eval_set is not None:
            Xd, yd = check_paired(*eval_set)
            Xd = [check_features(x, self.feat_dim) for x in Xd]
            yd = [check_tokens(t, self.vocab_size) for t in yd]
            eval_fn = lambda P: corpus_wer(greedy_decode_batch(P, Xd), yd)  # noqa: E731
        params, self.history_ = supervised_train(
            params, X, y, self.epochs, self.lr, self.batch_size, self.random_state, eval_fn,
            self.target_wer)
        self.model_ = model.with_params(params)
        return self

    @property
    def params_(self):
        check_is_fitted(self, "model_")
        return self.model_.params

    def set_model(self, params):
        """Adopt externally trained parameters (e.g. a checkpoint) as the fitted state."""
        self.model_ = TransducerModel(self._dims(), params)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        if self.decode == "greedy":
            return greedy_decode_batch(self.model_, X)
        return [nb.top.tokens for nb in beam_decode_batch(self.model_, X, self.beam, self.nbest)]

    def predict_nbest(self, X):
        check_is_fitted(self, "model_")
        return beam_decode_batch(self.model_, self._check_X(X), self.beam, self.nbest)

    def predict_log_proba(self, X, y):
        """log P(y|x) for each pair, summed over alignments."""
        check_is_fitted(self, "model_")
        X, y = check_paired(X, y)
        return self.model_.batch_logprob(X, y)

    def score(self, X, y):
        """1 - WER so that larger is better."""
        X, y = check_paired(X, y)
        return 1.0 - corpus_wer(self.predict(X), [tuple(t) for t in y])


class FederatedSelfLearner(BaseEstimator):
    """Continual federated self-learning from a pre-trained recognizer.

    ``fit(corpus, init_params)`` runs the configured rounds on the corpus'
    device streams; afterwards ``student_`` and ``teacher_`` hold the final
    global and teacher parameters and ``result_`` the reports and snapshots.
    """

    def __init__(self, config=None, workers=1, out_dir=None):
        self.config = config
        self.workers = workers
        self.out_dir = out_dir

    def fit(self, corpus, init_params, progress=None):
        cfg = self.config if self.config is not None else ExperimentConfig()
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.result_ = run_experiment(cfg, corpus, init_params, self.out_dir, self.workers, progress)
        self.student_ = self.result_.student
        self.teacher_ = self.result_.teacher
        return self

    def predict(self, X):
        check_is_fitted(self, "student_")
        X, _ = check_paired(X)
        return greedy_decode_batch(self.student_, [check_features(x) for x in X])

    def score(self, X, y):
        X, y = check_paired(X, y)
        return 1.0 - corpus_wer(self.predict(X), [tuple(t) for t in y])
