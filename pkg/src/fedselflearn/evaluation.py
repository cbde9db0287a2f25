"""WER / SER / WERR evaluation, forgetting and divergence detection."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import beam_decode_batch, greedy_decode_batch
from .weaksup import binary_ser_cost, edit_distance, semantic_cost


@dataclass
class SetScores:
    wer: float
    ser: float
    semantic_cost: float
    errors: int
    ref_tokens: int
    werr: float | None = None


@dataclass
class EvalSnapshot:
    round: int
    sets: dict = field(default_factory=dict)

    def to_dict(self):
        return {"round": self.round, "sets": {k: asdict(v) for k, v in self.sets.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["round"], {k: SetScores(**v) for k, v in d["sets"].items()})

    def wer(self, name):
        return self.sets[name].wer


def decode(params, feats, how="greedy", beam=8, nbest=4, chunk=512):
    """Top-1 hypotheses for a list of feature matrices."""
    out = []
    for i in range(0, len(feats), chunk):
        part = feats[i : i + chunk]
        if how == "greedy":
            out += greedy_decode_batch(params, part)
        elif how == "beam":
            out += [nb.top.tokens for nb in beam_decode_batch(params, part, beam, nbest)]
        else:
            raise ValueError(f"unknown decode mode {how!r}")
    return out


def corpus_wer(hyps, refs):
    """Total edit distance over total reference tokens."""
    if len(refs) == 0:
        raise ValueError("empty evaluation set")
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return errors / sum(len(r) for r in refs)


def score_set(hyps, utts):
    refs = [u.tokens for u in utts]
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    n_ref = sum(len(r) for r in refs)
    ser = float(np.mean([binary_ser_cost(h, r) for h, r in zip(hyps, refs)]))
    sem = float(np.mean([semantic_cost(h, u.slots) for h, u in zip(hyps, utts)]))
    return SetScores(errors / n_ref, ser, sem, errors, n_ref)


def werr(initial_wer, current_wer):
    """Relative WER reduction; positive means improvement."""
    if initial_wer <= 0:
        raise ValueError("WERR is undefined for a zero initial WER")
    return (initial_wer - current_wer) / initial_wer


class Evaluator:
    """Scores a model on fixed eval sets; features are synthesized once."""

    def __init__(self, corpus, how="greedy", beam=8, nbest=4):
        self.sets = dict(sorted(corpus.eval_sets.items()))
        self.feats = {k: corpus.features(v) for k, v in self.sets.items()}
        self.how, self.beam, self.nbest = how, beam, nbest
        self.initial = None

    def snapshot(self, params, round):
        snap = EvalSnapshot(round)
        for name, utts in self.sets.items():
            hyps = decode(params, self.feats[name], self.how, self.beam, self.nbest)
            snap.sets[name] = score_set(hyps, utts)
        if self.initial is None:
            self.initial = snap
        for name, s in snap.sets.items():
            base = self.initial.sets[name].wer
            s.werr = werr(base, s.wer) if base > 0 else None
        return snap


@dataclass
class DivergenceDetector:
    """Flags sustained relative WER degradation on one eval set."""

    threshold: float = 0.2
    patience: int = 3
    set_name: str = "general_old"
    initial: float | None = None
    streak: int = 0
    diverged_at: int | None = None

    def update(self, snapshot):
        wer = snapshot.wer(self.set_name)
        if self.initial is None:
            self.initial = wer
            return False
        if wer >= (1.0 + self.threshold) * self.initial:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience and self.diverged_at is None:
            self.diverged_at = snapshot.round
        return self.diverged_at is not None


def forgetting_report(snapshots, old_set="general_old", new_set="delta", threshold=0.02):
    """Per-set WERR trajectories and a forgetting flag.

    Forgetting is flagged when the final old-set WERR is below ``-threshold``
    while the new-set WERR is above ``+threshold``.  WERR values are fractions.
    """
    if len(snapshots) < 2:
        raise ValueError("forgetting report needs at least two snapshots")
    traj = {}
    for s in snapshots:
        for name, sc in s.sets.items():
            traj.setdefault(name, []).append((s.round, sc.werr))
    final = snapshots[-1].sets
    old_werr, new_werr = final[old_set].werr, final[new_set].werr
    return {
        "trajectories": traj,
        "old_werr": old_werr,
        "new_werr": new_werr,
        "forgetting": old_werr < -threshold and new_werr > threshold,
    }


def compare_forgetting(report, reference):
    """Relative reduction of old-set degradation and retained new-set gain vs a reference run."""
    ref_old, old = reference["old_werr"], report["old_werr"]
    reduction = (ref_old - old) / ref_old if ref_old < 0 else 0.0
    retained = report["new_werr"] / reference["new_werr"] if reference["new_werr"] > 0 else float("nan")
    return {
        "degradation_reduction": reduction,
        "retained_gain": retained,
        "reduced_forgetting": reduction > 0,
    }


def write_table(rows, path, columns=None, delimiter="\t"):
    """Delimited text table (one row per setting) for side-by-side comparison."""
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)
