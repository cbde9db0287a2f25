"""Command line entry point: gen-corpus, pretrain, run, reproduce, compare, configs."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .corpus import Corpus, generate_corpus
from .estimators import TransducerRecognizer
from .evaluation import EvalSnapshot, write_table
from .fedsim import DivergenceAbort, load_reports, run_experiment
from .numerics import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger("fedselflearn")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4


class InputError(OSError):
    """Missing or unreadable input artifact."""


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    corpus_seed: int
    corpus_path: str
    corpus_sha256: str
    init_checkpoint: str
    init_sha256: str
    config_path: str
    report_path: str
    checkpoints: dict = field(default_factory=dict)
    workers: int = 1
    metrics: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        try:
            return cls(**json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise InputError(f"manifest not found: {path}") from exc


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def make_run_id(config_hash, corpus_sha, init_sha):
    return hashlib.sha1(f"{config_hash}:{corpus_sha}:{init_sha}".encode()).hexdigest()[:12]


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


CANNED_DIR = Path(__file__).parent / "configs"


def canned_configs():
    """Names of the experiment configs shipped with the package."""
    return sorted(p.stem for p in CANNED_DIR.glob("*.yaml"))


def resolve_config(name_or_path):
    """A config file path, or the name of a shipped config."""
    path = Path(name_or_path)
    if path.exists():
        return path
    canned = CANNED_DIR / f"{name_or_path}.yaml"
    if canned.exists():
        return canned
    raise InputError(f"config not found: {name_or_path} (shipped configs: {', '.join(canned_configs())})")


def _config(args):
    cfg = load_config(resolve_config(args.config)) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "eval_every", None) is not None:
        over["eval.every"] = args.eval_every
    return cfg.replace(**over) if over else cfg


def _load_corpus(path):
    _require(path, "corpus")
    try:
        return Corpus.load(path)
    except (ValueError, KeyError) as exc:
        raise InputError(f"corpus file {path} is malformed: {exc}") from exc


def cmd_gen_corpus(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(cfg.corpus, seed=args.seed)
    path = corpus.export(out / "corpus.jsonl")
    manifest = {
        "corpus_path": str(path),
        "corpus_sha256": file_sha256(path),
        "corpus_seed": cfg.corpus.seed,
        "config_hash": cfg.config_hash(),
        "sizes": {
            "pretrain": len(corpus.pretrain),
            "rehearsal": len(corpus.rehearsal),
            "devices": len(corpus.devices),
            "device_utterances": sum(len(v) for v in corpus.devices.values()),
            **{f"eval:{k}": len(v) for k, v in sorted(corpus.eval_sets.items())},
        },
    }
    (out / "corpus_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps(manifest["sizes"], sort_keys=True))
    return EXIT_OK


def pretrain_model(cfg, corpus):
    """Supervised training on the base-period labeled split; returns (params, history)."""
    m, p = cfg.model, cfg.pretrain
    est = TransducerRecognizer(
        vocab_size=len(corpus.vocab), feat_dim=cfg.corpus.feat_dim, enc_hidden=m.enc_hidden,
        pred_hidden=m.pred_hidden, embed_dim=m.embed_dim, joint_hidden=m.joint_hidden,
        epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, target_wer=p.target_wer,
        random_state=m.init_seed,
    )
    X = corpus.features(corpus.pretrain)
    y = [u.tokens for u in corpus.pretrain]
    dev = corpus.eval_sets["general_old"]
    est.fit(X, y, eval_set=(corpus.features(dev), [u.tokens for u in dev]))
    return est.params_, est.history_


def cmd_pretrain(args):
    cfg = _config(args)
    out = Path(args.out)
    corpus = _load_corpus(args.corpus or out / "corpus.jsonl")
    out.mkdir(parents=True, exist_ok=True)
    params, history = pretrain_model(cfg, corpus)
    best = min((h["wer"] for h in history), default=float("nan"))
    ckpt = out / "pretrained.ckpt"
    save_checkpoint(ckpt, params, 0, "student", {"history": history, "best_wer": best})
    (out / "pretrain_history.json").write_text(json.dumps(history, indent=2) + "\n")
    if not history or best > cfg.pretrain.target_wer:
        log.warning("target WER %.3f not reached (best %.4f); kept the best checkpoint",
                    cfg.pretrain.target_wer, best)
    print(json.dumps({"checkpoint": str(ckpt), "best_wer": best}))
    return EXIT_OK


def execute_run(cfg, corpus_path, init_path, out_root, workers=1):
    """Run one experiment into ``out_root/<run_id>`` and write its manifest."""
    corpus_path, init_path = Path(corpus_path), Path(init_path)
    corpus = _load_corpus(corpus_path)
    _require(init_path, "initial checkpoint")
    try:
        init, _ = load_checkpoint(init_path)
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc
    corpus_sha, init_sha = file_sha256(corpus_path), file_sha256(init_path)
    run_id = make_run_id(cfg.config_hash(), corpus_sha, init_sha)
    run_dir = Path(out_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    manifest = RunManifest(
        run_id=run_id, config_hash=cfg.config_hash(), corpus_seed=corpus.config.seed,
        corpus_path=str(corpus_path.resolve()), corpus_sha256=corpus_sha,
        init_checkpoint=str(init_path.resolve()), init_sha256=init_sha,
        config_path=str((run_dir / "config.yaml").resolve()),
        report_path=str((run_dir / "reports.jsonl").resolve()), workers=workers,
    )

    def progress(report):
        if report.eval is not None:
            wers = {k: round(v["wer"], 4) for k, v in report.eval["sets"].items()}
            log.info("round %d %s", report.round, wers)

    try:
        result = run_experiment(cfg, corpus, init, run_dir, workers, progress)
    except DivergenceAbort:
        manifest.write(run_dir / "manifest.json")
        raise
    manifest.checkpoints = {"student": str((run_dir / "student.ckpt").resolve()),
                            "teacher": str((run_dir / "teacher.ckpt").resolve())}
    manifest.metrics = result.to_summary()
    manifest.write(run_dir / "manifest.json")
    (run_dir / "summary.json").write_text(json.dumps(manifest.metrics, indent=2, sort_keys=True) + "\n")
    return run_dir, manifest, result


def cmd_run(args):
    cfg = _config(args)
    out = Path(args.out)
    corpus = args.corpus or out / "corpus.jsonl"
    init = args.init or out / "pretrained.ckpt"
    run_dir, manifest, result = execute_run(cfg, corpus, init, out / "runs", args.workers)
    print(json.dumps({"run_dir": str(run_dir), **manifest.metrics}, sort_keys=True))
    if result.diverged_at is not None:
        log.warning("divergence detected at round %d", result.diverged_at)
    return EXIT_OK


def reproduce(manifest_path, out_root):
    """Rerun a manifest's experiment and return (original metrics, new metrics)."""
    man = RunManifest.read(manifest_path)
    cfg = load_config(man.config_path)
    if cfg.config_hash() != man.config_hash:
        raise ConfigError(f"{man.config_path}: config hash does not match the manifest")
    for path, sha, what in ((man.corpus_path, man.corpus_sha256, "corpus"),
                            (man.init_checkpoint, man.init_sha256, "initial checkpoint")):
        if file_sha256(_require(path, what)) != sha:
            raise InputError(f"{what} {path} changed since the run")
    _, new, _ = execute_run(cfg, man.corpus_path, man.init_checkpoint, out_root, man.workers)
    return man.metrics, new.metrics


def metric_diffs(a, b):
    keys = sorted(set(a) | set(b))
    out = {}
    for k in keys:
        x, y = a.get(k), b.get(k)
        if isinstance(x, (int, float)) and isinstance(y, (int, float)):
            out[k] = abs(float(x) - float(y))
        elif x != y:
            out[k] = float("inf")
    return out


def cmd_reproduce(args):
    before, after = reproduce(args.manifest, Path(args.out))
    diffs = metric_diffs(before, after)
    worst = max(diffs.values(), default=0.0)
    print(json.dumps({"max_abs_diff": worst, "reproduced": worst <= 1e-12}))
    return EXIT_OK if worst <= 1e-12 else 1


def run_snapshots(run_dir):
    path = _require(Path(run_dir) / "reports.jsonl", "report stream")
    initial, reports = load_reports(path)
    snaps = [initial] + [EvalSnapshot.from_dict(r.eval) for r in reports if r.eval]
    return snaps


def compare_runs(run_dirs):
    """Final per-set WER/WERR for each run plus WERR deltas against the first run."""
    rows = []
    ref = None
    for d in run_dirs:
        final = run_snapshots(d)[-1]
        name = Path(d).name
        cfg_path = Path(d) / "config.yaml"
        if cfg_path.exists():
            name = load_config(cfg_path, require=False).name
        row = {"run": name}
        for s, sc in sorted(final.sets.items()):
            row[f"{s}.wer"] = sc.wer
            row[f"{s}.werr"] = sc.werr
        if ref is None:
            ref = row
        for s in sorted(final.sets):
            row[f"{s}.dwerr"] = row[f"{s}.werr"] - ref[f"{s}.werr"]
        rows.append(row)
    return rows


def trajectories(run_dirs):
    """Long-format per-round WER/WERR rows for plotting."""
    rows = []
    for d in run_dirs:
        for snap in run_snapshots(d):
            for s, sc in sorted(snap.sets.items()):
                rows.append({"run": Path(d).name, "round": snap.round, "set": s, "wer": sc.wer, "werr": sc.werr})
    return rows


def cmd_compare(args):
    rows = compare_runs(args.runs)
    if args.curves:
        Path(args.curves).parent.mkdir(parents=True, exist_ok=True)
        write_table(trajectories(args.runs), args.curves)
    path = Path(args.out) if args.out else None
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_table(rows, path)
        print(path.read_text(), end="")
    else:
        cols = list(rows[0])
        print("\t".join(cols))
        for r in rows:
            print("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="fedselflearn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="work"):
        sp.add_argument("--config", help="YAML experiment config, or the name of a shipped config")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(g)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="supervised pre-training on the base-period split")
    common(t)
    t.add_argument("--corpus", help="corpus.jsonl (default: OUT/corpus.jsonl)")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="run a federated self-learning experiment")
    common(r)
    r.add_argument("--corpus", help="corpus.jsonl (default: OUT/corpus.jsonl)")
    r.add_argument("--init", help="initial checkpoint (default: OUT/pretrained.ckpt)")
    r.add_argument("--workers", type=int, default=1, help="device-level worker threads")
    r.add_argument("--eval-every", type=int, help="override eval.every")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("reproduce", help="rerun an experiment from its manifest and check metrics")
    m.add_argument("manifest")
    m.add_argument("--out", default="work/reproduced")
    m.set_defaults(func=cmd_reproduce)

    c = sub.add_parser("compare", help="per-set WERR deltas between runs")
    c.add_argument("runs", nargs="+", help="run directories; the first is the reference")
    c.add_argument("--out", help="write a tab-separated table here")
    c.add_argument("--curves", help="also write per-round WER/WERR trajectories (tab-separated)")
    c.set_defaults(func=cmd_compare)

    ls = sub.add_parser("configs", help="list the shipped experiment configs")
    ls.set_defaults(func=lambda args: print("\n".join(canned_configs())) or EXIT_OK)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
