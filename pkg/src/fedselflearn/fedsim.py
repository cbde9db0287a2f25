"""Federated self-learning rounds with EMA teacher, weak supervision and rehearsal.

Devices never hand raw features or transcripts to the server: the server
object only receives parameter deltas and counters.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import augment
from .decoder import beam_decode_batch, confidence_filter
from .evaluation import DivergenceDetector, EvalSnapshot, Evaluator
from .numerics import OptimizerState, ParamVector, autodiff as ad, backprop, mean_of, save_checkpoint, sgd_step
from .numerics import step as optimizer_step
from .transducer import batch_logprob
from .weaksup import (NoiseModel, add_noise, expected_cost_batch, hypothesis_cost, reinforce_batch,
                      sample_hypothesis)

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class DivergenceAbort(SimulationError):
    pass


@dataclass
class Device:
    id: int
    stream: object
    local_steps: int = 1
    batch_size: int = 8
    lr: float = 0.1


@dataclass
class CloudPseudoDevice:
    id: int
    data: list
    features: object = None

    def __post_init__(self):
        if not self.data:
            raise SimulationError("cloud pseudo-device has no labeled data")


@dataclass
class ServerState:
    global_params: ParamVector
    teacher_params: ParamVector
    optimizer: OptimizerState
    ema_rate: float = 0.99
    ema_every: int = 10
    ema_enabled: bool = True
    round: int = 0

    @classmethod
    def start(cls, params, cfg):
        """Server at round 0 from a pre-trained model; the teacher starts equal to it."""
        opt = OptimizerState(cfg.federation.server_optimizer, lr=cfg.federation.server_lr)
        return cls(params, params, opt, cfg.ema.rate, cfg.ema.update_every, cfg.ema.enabled)


@dataclass
class LocalResult:
    delta: ParamVector
    n_utts: int = 0
    n_accepted: int = 0
    n_rejected: int = 0
    losses: dict = field(default_factory=dict)


@dataclass
class RoundReport:
    round: int
    n_devices: int
    n_pseudo_devices: int
    n_utterances: int
    n_accepted: int
    n_rejected: int
    losses: dict
    teacher_updated: bool
    eval: dict | None = None
    diverged: bool = False

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def ema_update(teacher, student, rate, r, every):
    """delta * teacher + (1 - delta) * student on rounds divisible by ``every``."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"EMA rate must lie in (0, 1), got {rate}")
    teacher.check_compatible(student)
    if r % every != 0:
        return teacher
    return ParamVector(rate * teacher.values + (1.0 - rate) * student.values, teacher.layout)


def device_rng(seed, r, kind, ident):
    return np.random.default_rng(np.random.SeedSequence([seed, r, kind, ident]))


def _step_loss(P, batch_feats, aug_feats, pseudo, weak_terms, n):
    """Combined (equal weight) loss for one local batch as a scalar tensor."""
    total = None
    if pseudo:
        idx = [i for i, _ in pseudo]
        lp = batch_logprob(P, [aug_feats[i] for i in idx], [y for _, y in pseudo])
        total = -ad.tsum(lp) * (1.0 / n)
    for term in weak_terms:
        t = term(P)
        total = t if total is None else total + t
    return total


def _weak_term(cfg, feats, batch, nbests, rng, stats):
    """Weak-supervision loss closure for a batch and the student's n-best lists."""
    mode, w = cfg.weak.mode, cfg.weak.weight
    if mode in ("expected_semantic", "expected_semantic_plus_wer"):
        kind = "semantic" if mode == "expected_semantic" else "semantic_plus_wer"
        costs = [[hypothesis_cost(h.tokens, u.weak_label, kind) for h in nb] for u, nb in zip(batch, nbests)]
        stats["weak_cost"] = float(np.mean([np.dot(_phat(nb), c) for nb, c in zip(nbests, costs)]))
        return lambda P: expected_cost_batch(P, feats, nbests, costs) * w
    noise = NoiseModel(cfg.weak.noise_sigma)
    chosen, rewards = [], []
    for u, nb in zip(batch, nbests):
        k = sample_hypothesis(nb, rng, cfg.weak.served_only)
        if mode == "reinforce_binary":
            cost = u.feedback(nb[k].tokens).cost
            reward = add_noise(cost, noise, rng) if noise.sigma > 0 else cost
        else:
            reward = hypothesis_cost(nb[k].tokens, u.weak_label, "semantic")
        chosen.append(k)
        rewards.append(reward)
    stats["weak_cost"] = float(np.mean(rewards))
    normalized = cfg.weak.normalized
    return lambda P: reinforce_batch(P, feats, nbests, chosen, rewards, normalized) * w


def _phat(nb):
    lp = nb.log_probs
    p = np.exp(lp - lp.max())
    return p / p.sum()


def draw_batches(device):
    """Pull up to ``local_steps`` batches off the device stream."""
    batches = []
    for _ in range(device.local_steps):
        batch = device.stream.take(device.batch_size)
        if not batch:
            break
        batches.append(batch)
    return batches


def decode_batches(params, batches, cfg):
    """n-best lists for many batches with a single decoder call."""
    feats = [u.features for b in batches for u in b]
    flat = beam_decode_batch(params, feats, cfg.decode.beam, cfg.decode.nbest) if feats else []
    out, i = [], 0
    for b in batches:
        out.append(flat[i : i + len(b)])
        i += len(b)
    return out


def local_train(device, w_start, teacher, cfg, rng, batches=None, teacher_nbests=None,
                student_nbests=None):
    """Run N local SGD steps on a device and return its delta and counters.

    ``batches`` and the teacher's n-best lists may be prepared by the caller
    so that decoding is shared across devices; ``student_nbests`` covers the
    first step only, where the student still equals ``w_start``.
    """
    if batches is None:
        batches = draw_batches(device)
    if teacher_nbests is None and cfg.self_label:
        teacher_nbests = decode_batches(teacher, batches, cfg)
    params = w_start
    res = LocalResult(ParamVector.zeros(w_start.layout))
    opt = OptimizerState("sgd", lr=device.lr)
    loss_log = {}
    for step_i, batch in enumerate(batches):
        n = len(batch)
        res.n_utts += n
        feats = [u.features for u in batch]
        pseudo, aug = [], None
        if cfg.self_label:
            for i, nb in enumerate(teacher_nbests[step_i]):
                if confidence_filter(nb, cfg.filter.low, cfg.filter.high, cfg.filter.mode):
                    pseudo.append((i, nb.top.tokens))
            res.n_accepted += len(pseudo)
            res.n_rejected += n - len(pseudo)
            aug = [augment(f, cfg.augment, rng) for f in feats]
        weak_terms, stats = [], {}
        if cfg.weak.mode != "off":
            if step_i == 0 and student_nbests is not None:
                nbests = student_nbests
            else:
                nbests = beam_decode_batch(params, feats, cfg.decode.beam, cfg.decode.nbest)
            weak_terms.append(_weak_term(cfg, feats, batch, nbests, rng, stats))
        if not pseudo and not weak_terms:
            continue

        def loss_fn(P):
            return _step_loss(P, feats, aug, pseudo, weak_terms, n)

        value, grad = backprop(loss_fn, params)
        params = sgd_step(opt, params, grad)
        loss_log.setdefault("total", []).append(value)
        if "weak_cost" in stats:
            loss_log.setdefault("weak_cost", []).append(stats["weak_cost"])
    res.delta = params - w_start
    res.losses = {k: float(np.mean(v)) for k, v in loss_log.items()}
    return res


def rehearsal_train(pseudo, w_start, cfg, rng, local_steps=None, lr=None, batch_size=None):
    """Supervised steps on historical transcribed data at a cloud pseudo-device."""
    steps = cfg.federation.local_steps if local_steps is None else local_steps
    lr = cfg.federation.local_lr if lr is None else lr
    bs = cfg.rehearsal.batch_size if batch_size is None else batch_size
    opt = OptimizerState("sgd", lr=lr)
    params = w_start
    losses = []
    n_utts = 0
    for _ in range(steps):
        idx = rng.choice(len(pseudo.data), size=min(bs, len(pseudo.data)), replace=False)
        utts = [pseudo.data[i] for i in sorted(idx)]
        feats = [pseudo.features(u) for u in utts]
        if cfg.rehearsal.augment:
            feats = [augment(f, cfg.augment, rng) for f in feats]
        labels = [u.tokens for u in utts]
        value, grad = backprop(lambda P: -ad.mean(batch_logprob(P, feats, labels)), params)
        params = sgd_step(opt, params, grad)
        losses.append(value)
        n_utts += len(utts)
    out = LocalResult(params - w_start, n_utts=n_utts)
    if losses:
        out.losses = {"rehearsal": float(np.mean(losses))}
    return out


def _split(flat, groups):
    out, i = [], 0
    for g in groups:
        out.append(flat[i : i + len(g)])
        i += len(g)
    return out


def aggregate(results):
    """Mean of deltas in a fixed (kind, id) order so execution order never matters."""
    ordered = [r.delta for _, r in sorted(results, key=lambda kv: kv[0])]
    return mean_of(ordered)


def run_round(server, devices, pseudo_devices, cfg, run_seed=0, evaluator=None, pool=None):
    """One round: sample, broadcast, local training, aggregate, server step, EMA."""
    r = server.round + 1
    avail = [d for d in devices if d.stream.remaining > 0]
    if not avail:
        raise SimulationError(f"round {r}: no device has data left to sample")
    rng = device_rng(run_seed, r, 0, 0)
    k = min(cfg.federation.devices_per_round, len(avail))
    picks = sorted(int(i) for i in rng.choice(len(avail), size=k, replace=False))
    sampled = [avail[i] for i in picks]
    w = server.global_params
    teacher = server.teacher_params

    batches = [draw_batches(d) for d in sampled]
    shared_t = shared_s = [None] * len(sampled)
    if cfg.self_label:
        shared_t = _split(decode_batches(teacher, [b for bs in batches for b in bs], cfg), batches)
    if cfg.weak.mode != "off":
        firsts = [bs[:1] for bs in batches]
        shared_s = [nb[0] if nb else None for nb in _split(decode_batches(w, [b for bs in firsts for b in bs], cfg), firsts)]
    prepared = {d.id: (bs, t, s_) for d, bs, t, s_ in zip(sampled, batches, shared_t, shared_s)}

    def run_device(dev):
        bs, t_nb, s_nb = prepared[dev.id]
        rng_d = device_rng(run_seed, r, 1, dev.id)
        return (0, dev.id), local_train(dev, w, teacher, cfg, rng_d, bs, t_nb, s_nb)

    def run_pseudo(p):
        return (1, p.id), rehearsal_train(p, w, cfg, device_rng(run_seed, r, 2, p.id))

    jobs = [(run_device, d) for d in sampled] + [(run_pseudo, p) for p in pseudo_devices]
    if pool is not None:
        results = list(pool.map(lambda job: job[0](job[1]), jobs))
    else:
        results = [fn(arg) for fn, arg in jobs]

    n_utts = sum(res.n_utts for _, res in results)
    if n_utts > 0:
        pseudo_grad = aggregate(results).scale(-1.0)
        new_global = optimizer_step(server.optimizer, w, pseudo_grad)
    else:
        new_global = w
    teacher_updated = server.ema_enabled and r % server.ema_every == 0
    new_teacher = ema_update(teacher, new_global, server.ema_rate, r, server.ema_every) if server.ema_enabled else teacher

    losses = {}
    for key in sorted({k for _, res in results for k in res.losses}):
        vals = [res.losses[key] for _, res in results if key in res.losses]
        losses[key] = float(np.mean(vals))
    report = RoundReport(
        round=r,
        n_devices=len(sampled),
        n_pseudo_devices=len(pseudo_devices),
        n_utterances=n_utts,
        n_accepted=sum(res.n_accepted for _, res in results),
        n_rejected=sum(res.n_rejected for _, res in results),
        losses=losses,
        teacher_updated=teacher_updated,
    )
    server.global_params = new_global
    server.teacher_params = new_teacher
    server.round = r
    return server, report


@dataclass
class ExperimentResult:
    reports: list
    snapshots: list
    student: ParamVector
    teacher: ParamVector
    diverged_at: int | None = None

    def final_snapshot(self):
        return self.snapshots[-1]

    def to_summary(self):
        init, final = self.snapshots[0], self.snapshots[-1]
        out = {"diverged_at": self.diverged_at, "rounds": final.round}
        for name, s in final.sets.items():
            out[f"{name}.wer_initial"] = init.sets[name].wer
            out[f"{name}.wer"] = s.wer
            out[f"{name}.werr"] = s.werr
        return out


def build_devices(corpus, cfg):
    streams = corpus.device_streams()
    f = cfg.federation
    return [Device(d, s, f.local_steps, f.batch_size, f.local_lr) for d, s in streams.items()]


def build_pseudo_devices(corpus, cfg):
    if not cfg.rehearsal.enabled:
        return []
    n = int(round(cfg.rehearsal.ratio * cfg.federation.devices_per_round))
    if n == 0:
        return []
    cache = {}

    def features(u):
        if u.uid not in cache:
            cache[u.uid] = u.features(corpus.space, corpus.config.frames_per_token)
        return cache[u.uid]

    shards = np.array_split(np.arange(len(corpus.rehearsal)), n)
    return [CloudPseudoDevice(i, [corpus.rehearsal[j] for j in shard], features) for i, shard in enumerate(shards)]


def run_experiment(cfg, corpus, init_params, out_dir=None, workers=1, progress=None):
    """Execute ``cfg.federation.rounds`` rounds with periodic evaluation.

    Deterministic given (cfg, corpus, init_params).  When ``out_dir`` is given
    the round reports are written as JSON lines to ``reports.jsonl`` and the
    final student/teacher checkpoints next to it, plus intermediate student
    checkpoints every ``eval.checkpoint_every`` rounds when that is set.
    """
    server = ServerState.start(init_params, cfg)
    devices = build_devices(corpus, cfg)
    pseudo = build_pseudo_devices(corpus, cfg)
    evaluator = Evaluator(corpus, cfg.decode.eval_decode, cfg.decode.beam, cfg.decode.nbest)
    detector = DivergenceDetector(cfg.eval.divergence_threshold, cfg.eval.divergence_patience,
                                  cfg.eval.divergence_set)
    snapshots = [evaluator.snapshot(server.global_params, 0)]
    detector.update(snapshots[0])
    reports = []
    out = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        out = open(out_dir / "reports.jsonl", "w")
        out.write(json.dumps({"round": 0, "eval": snapshots[0].to_dict()}, sort_keys=True) + "\n")
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(cfg.federation.rounds):
            server, report = run_round(server, devices, pseudo, cfg, cfg.seed, pool=pool)
            if report.round % cfg.eval.every == 0 or report.round == cfg.federation.rounds:
                snap = evaluator.snapshot(server.global_params, report.round)
                snapshots.append(snap)
                report.eval = snap.to_dict()
                report.diverged = detector.update(snap)
            reports.append(report)
            every = cfg.eval.checkpoint_every
            if out_dir is not None and every and report.round % every == 0:
                save_checkpoint(out_dir / f"student_r{report.round:05d}.ckpt", server.global_params,
                                report.round, "student")
            if out is not None:
                out.write(report.to_json() + "\n")
                out.flush()
            if progress is not None:
                progress(report)
            if report.diverged and cfg.eval.abort_on_divergence:
                raise DivergenceAbort(f"divergence detected at round {detector.diverged_at}")
    finally:
        if pool is not None:
            pool.shutdown()
        if out is not None:
            out.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "student.ckpt", server.global_params, server.round, "student")
        save_checkpoint(out_dir / "teacher.ckpt", server.teacher_params, server.round, "teacher")
    return ExperimentResult(reports, snapshots, server.global_params, server.teacher_params, detector.diverged_at)


def load_reports(path):
    """Parse a reports.jsonl stream into (initial snapshot, round reports)."""
    reports, initial = [], None
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "n_devices" not in rec:
                initial = EvalSnapshot.from_dict(rec["eval"])
                continue
            reports.append(RoundReport(**rec))
    return initial, reports
