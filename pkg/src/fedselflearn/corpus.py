"""Synthetic slot-annotated corpus with a controllable distribution shift.

Words are tokens.  Each token owns a prototype feature vector; an utterance
becomes a frame matrix by repeating each prototype for 2-4 frames and adding
Gaussian noise.  The shift adds new slot values, each acoustically close to
an existing value, plus a new carrier phrase.  Utterances containing any
new token are tagged ``delta``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .weaksup import FeedbackSignal, WeakLabel, binary_ser_cost

CARRIERS = ["play", "by", "in", "the", "turn", "on", "off", "lights", "set", "alarm",
            "for", "please", "call", "what", "is", "weather"]

SLOT_VALUES = {
    "song": (["hello", "yellow", "faded", "closer"], ["halo", "mellow", "lumen"]),
    "artist": (["beyond", "adele", "coldplay"], ["beyonce", "dua"]),
    "device": (["kitchen", "bedroom", "speaker"], []),
    "time": (["six", "seven", "eight"], []),
    "contact": (["mom", "anna", "john"], []),
    "city": (["paris", "london", "tokyo"], []),
    "podcast": ([], ["serial", "radiolab"]),
}

DELTA_CARRIERS = ["next", "episode", "of"]

# new value -> existing value it is acoustically close to
CONFUSABLE = {"halo": "hello", "mellow": "yellow", "lumen": "faded", "beyonce": "beyond", "dua": "adele"}

TEMPLATES = [
    ("play {song} by {artist}", 3.0),
    ("play {song} in the {device}", 2.0),
    ("turn on the {device} lights", 1.0),
    ("turn off the {device} lights", 1.0),
    ("set alarm for {time}", 1.0),
    ("please call {contact}", 1.0),
    ("what is the weather in {city}", 1.0),
    ("play next episode of {podcast}", 1.0),
    ("play next episode of {podcast} in the {device}", 1.0),
]


def _words():
    words = list(CARRIERS)
    for base, _ in SLOT_VALUES.values():
        words += base
    words += DELTA_CARRIERS
    for _, new in SLOT_VALUES.values():
        words += new
    return list(dict.fromkeys(words))


DELTA_WORDS = frozenset(DELTA_CARRIERS + [w for _, new in SLOT_VALUES.values() for w in new])


class Vocabulary:
    """Word <-> id map; id 0 is reserved for blank."""

    def __init__(self, words):
        self.words = list(words)
        self.index = {w: i + 1 for i, w in enumerate(self.words)}

    @classmethod
    def default(cls):
        return cls(_words())

    def __len__(self):
        return len(self.words)

    def encode(self, text):
        if isinstance(text, str):
            text = text.split()
        return tuple(self.index[w.lower()] for w in text)

    def decode(self, ids):
        return " ".join(self.words[i - 1] for i in ids)


@dataclass(frozen=True)
class AugmentConfig:
    max_mask: int = 3
    noise: float = 0.3


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    feat_dim: int = 16
    noise_range: tuple = (0.3, 1.3)
    confusion_distance: float = 1.5
    frames_per_token: tuple = (2, 4)
    pretrain_size: int = 3000
    rehearsal_size: int = 2000
    n_devices: int = 200
    utts_per_device: int = 250
    eval_size: int = 400
    delta_share_pretrain: float = 0.08
    delta_share_continual: float = 0.6
    slot_error_rate: float = 0.0
    alt_asr_error: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "noise_range", tuple(self.noise_range))
        object.__setattr__(self, "frames_per_token", tuple(self.frames_per_token))
        for name in ("pretrain_size", "rehearsal_size", "n_devices", "utts_per_device", "eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"corpus.{name} must be >= 1")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise ValueError("corpus.frames_per_token must satisfy 1 <= lo <= hi")
        if not self.noise_range[0] <= self.noise_range[1]:
            raise ValueError("corpus.noise_range must be (low, high) with low <= high")
        for name in ("delta_share_pretrain", "delta_share_continual", "slot_error_rate", "alt_asr_error"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"corpus.{name} must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


class FeatureSpace:
    """Token prototypes; confusable new words sit close to their partners."""

    def __init__(self, vocab, feat_dim=16, confusion_distance=1.0, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        protos = np.zeros((len(vocab) + 1, feat_dim))
        protos[1:] = rng.normal(size=(len(vocab), feat_dim))
        for new, old in CONFUSABLE.items():
            direction = rng.normal(size=feat_dim)
            direction /= np.linalg.norm(direction)
            protos[vocab.index[new]] = protos[vocab.index[old]] + confusion_distance * direction
        self.prototypes = protos
        self.feat_dim = feat_dim


def synth_features(tokens, noise_level, rng, space, frames_per_token=(2, 4)):
    """Repeat each token prototype 2-4 times and add N(0, noise_level^2) noise."""
    if len(tokens) == 0:
        raise ValueError("cannot synthesize features for an empty token sequence")
    lo, hi = frames_per_token
    counts = rng.integers(lo, hi + 1, size=len(tokens))
    frames = np.repeat(space.prototypes[np.asarray(tokens)], counts, axis=0)
    noise = rng.normal(size=frames.shape)
    return frames + noise_level * noise


def augment(features, cfg, rng):
    """Time-mask up to ``cfg.max_mask`` consecutive frames and add feature noise."""
    x = np.array(features, dtype=np.float64, copy=True)
    T = x.shape[0]
    if cfg.max_mask > 0:
        width = int(rng.integers(0, min(cfg.max_mask, T) + 1))
        if width:
            start = int(rng.integers(0, T - width + 1))
            x[start : start + width] = 0.0
    if cfg.noise > 0:
        x += cfg.noise * rng.normal(size=x.shape)
    return x


@dataclass(frozen=True)
class Utterance:
    uid: int
    tokens: tuple
    slots: WeakLabel
    tag: str
    noise_level: float
    feature_seed: int
    split: str
    device: int = -1

    def features(self, space, frames_per_token=(2, 4)):
        rng = np.random.default_rng(self.feature_seed)
        return synth_features(self.tokens, self.noise_level, rng, space, frames_per_token)

    def to_record(self):
        return {
            "uid": self.uid, "split": self.split, "device": self.device, "tag": self.tag,
            "tokens": list(self.tokens),
            "slots": [[k, list(v)] for k, v in self.slots.slots],
            "transcript": None if self.slots.transcript is None else list(self.slots.transcript),
            "noise_level": self.noise_level, "feature_seed": self.feature_seed,
        }

    @classmethod
    def from_record(cls, rec):
        label = WeakLabel(tuple((k, tuple(v)) for k, v in rec["slots"]),
                          None if rec.get("transcript") is None else tuple(rec["transcript"]))
        return cls(rec["uid"], tuple(rec["tokens"]), label, rec["tag"], rec["noise_level"],
                   rec["feature_seed"], rec["split"], rec.get("device", -1))


class DeviceUtterance:
    """What a device may see: features, weak label and a served-feedback oracle.

    The ground-truth transcript stays inside a closure; there is no attribute
    exposing it.
    """

    __slots__ = ("uid", "features", "weak_label", "_feedback")

    def __init__(self, uid, features, weak_label, feedback):
        self.uid = uid
        self.features = features
        self.weak_label = weak_label
        self._feedback = feedback

    def feedback(self, hyp_tokens):
        """Binary sentence-error feedback for a served hypothesis."""
        return self._feedback(hyp_tokens)


def device_view(utt, space, frames_per_token=(2, 4)):
    truth = utt.tokens

    def feedback(hyp):
        return FeedbackSignal(binary_ser_cost(hyp, truth), kind="binary_ser")

    return DeviceUtterance(utt.uid, utt.features(space, frames_per_token), utt.slots, feedback)


class DeviceStream:
    """Single-pass utterance stream; the cursor never rewinds."""

    def __init__(self, device_id, utterances, space, frames_per_token=(2, 4)):
        self.device_id = device_id
        self._utts = tuple(utterances)
        self._space = space
        self._fpt = frames_per_token
        self._cursor = 0

    def __len__(self):
        return len(self._utts)

    @property
    def remaining(self):
        return len(self._utts) - self._cursor

    @property
    def cursor(self):
        return self._cursor

    def take(self, n):
        chunk = self._utts[self._cursor : self._cursor + n]
        self._cursor += len(chunk)
        return [device_view(u, self._space, self._fpt) for u in chunk]


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocabulary
    space: FeatureSpace
    pretrain: list
    rehearsal: list
    devices: dict
    eval_sets: dict = field(default_factory=dict)

    def features(self, utts):
        return [u.features(self.space, self.config.frames_per_token) for u in utts]

    def device_streams(self):
        """Fresh single-pass streams for every device."""
        return {d: DeviceStream(d, utts, self.space, self.config.frames_per_token)
                for d, utts in sorted(self.devices.items())}

    def all_utterances(self):
        out = list(self.pretrain) + list(self.rehearsal)
        for d in sorted(self.devices):
            out += self.devices[d]
        for name in sorted(self.eval_sets):
            out += self.eval_sets[name]
        return out

    def export(self, path):
        """Write one JSON record per line; features are regenerated from seeds."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"corpus_config": self.config.to_dict(), "vocab": self.vocab.words},
                                sort_keys=True) + "\n")
            for u in self.all_utterances():
                fh.write(json.dumps(u.to_record(), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            head = json.loads(fh.readline())
            cfg = CorpusConfig(**head["corpus_config"])
            vocab = Vocabulary(head["vocab"])
            utts = [Utterance.from_record(json.loads(line)) for line in fh if line.strip()]
        corpus = cls(cfg, vocab, FeatureSpace(vocab, cfg.feat_dim, cfg.confusion_distance, cfg.seed),
                     [], [], {}, {})
        for u in utts:
            if u.split == "pretrain":
                corpus.pretrain.append(u)
            elif u.split == "rehearsal":
                corpus.rehearsal.append(u)
            elif u.split == "device":
                corpus.devices.setdefault(u.device, []).append(u)
            elif u.split.startswith("eval:"):
                corpus.eval_sets.setdefault(u.split[5:], []).append(u)
        return corpus


class _Sampler:
    def __init__(self, cfg, vocab, rng):
        self.cfg = cfg
        self.vocab = vocab
        self.rng = rng
        self.templates = [t for t, _ in TEMPLATES]
        w = np.array([w for _, w in TEMPLATES])
        self.base_templates = [i for i, t in enumerate(self.templates) if "{podcast}" not in t]
        self.base_w = w[self.base_templates] / w[self.base_templates].sum()
        self.delta_templates = [i for i, t in enumerate(self.templates)
                                if "{podcast}" in t or "{song}" in t or "{artist}" in t]
        self.delta_w = w[self.delta_templates] / w[self.delta_templates].sum()

    def _fill(self, template, delta):
        rng = self.rng
        words, slots = [], []
        placeholders = [p[1:-1] for p in template.split() if p.startswith("{")]
        use_new = {}
        if delta:
            shiftable = [p for p in placeholders if SLOT_VALUES[p][1]]
            forced = shiftable[int(rng.integers(len(shiftable)))]
            for p in shiftable:
                use_new[p] = p == forced or rng.random() < 0.5
        for piece in template.split():
            if piece.startswith("{"):
                slot = piece[1:-1]
                base, new = SLOT_VALUES[slot]
                pool = new if use_new.get(slot, not base) else base
                value = pool[int(rng.integers(len(pool)))]
                words.append(value)
                slots.append((slot, (self.vocab.index[value],)))
            else:
                words.append(piece)
        return self.vocab.encode(words), slots

    def _corrupt_slots(self, slots):
        out = []
        for k, toks in slots:
            if self.rng.random() < self.cfg.slot_error_rate:
                base, new = SLOT_VALUES[k]
                pool = [self.vocab.index[w] for w in base + new if self.vocab.index[w] not in toks]
                toks = (pool[int(self.rng.integers(len(pool)))],)
            out.append((k, toks))
        return tuple(out)

    def _alt_transcript(self, tokens):
        out = []
        inverse = {v: k for k, v in CONFUSABLE.items()}
        for t in tokens:
            if self.rng.random() < self.cfg.alt_asr_error:
                w = self.vocab.words[t - 1]
                partner = CONFUSABLE.get(w) or inverse.get(w)
                t = self.vocab.index[partner] if partner else int(self.rng.integers(1, len(self.vocab) + 1))
            out.append(t)
        return tuple(out)

    def draw(self, delta_share, uid, split, device=-1, force=None):
        rng = self.rng
        delta = (rng.random() < delta_share) if force is None else force == "delta"
        if delta:
            ti = self.delta_templates[rng.choice(len(self.delta_templates), p=self.delta_w)]
        else:
            ti = self.base_templates[rng.choice(len(self.base_templates), p=self.base_w)]
        tokens, slots = self._fill(self.templates[ti], delta)
        label = WeakLabel(self._corrupt_slots(slots), self._alt_transcript(tokens))
        lo, hi = self.cfg.noise_range
        noise = float(rng.uniform(lo, hi))
        seed = int(np.random.SeedSequence([self.cfg.seed, 11, uid]).generate_state(1)[0])
        tag = "delta" if any(self.vocab.words[t - 1] in DELTA_WORDS for t in tokens) else "base"
        return Utterance(uid, tokens, label, tag, noise, seed, split, device)


def generate_corpus(cfg, seed=None):
    """Build every split of the corpus as a pure function of (cfg, seed)."""
    if seed is not None:
        cfg = CorpusConfig(**{**cfg.to_dict(), "seed": seed})
    vocab = Vocabulary.default()
    space = FeatureSpace(vocab, cfg.feat_dim, cfg.confusion_distance, cfg.seed)
    uid = 0

    def stream(name, n, share, device=-1, force=None, only_tag=None):
        nonlocal uid
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, zlib.crc32(name.encode()), device + 1]))
        sampler = _Sampler(cfg, vocab, rng)
        out = []
        while len(out) < n:
            u = sampler.draw(share, uid, name if device < 0 else "device", device, force)
            if only_tag and u.tag != only_tag:
                continue
            out.append(u)
            uid += 1
        return out

    pretrain = stream("pretrain", cfg.pretrain_size, cfg.delta_share_pretrain)
    rehearsal = stream("rehearsal", cfg.rehearsal_size, cfg.delta_share_pretrain, only_tag="base")
    devices = {d: stream("device", cfg.utts_per_device, cfg.delta_share_continual, device=d)
               for d in range(cfg.n_devices)}
    eval_sets = {
        "general_old": stream("eval:general_old", cfg.eval_size, cfg.delta_share_pretrain),
        "general_new": stream("eval:general_new", cfg.eval_size, cfg.delta_share_continual),
        "delta": stream("eval:delta", cfg.eval_size, 1.0, force="delta"),
    }
    return Corpus(cfg, vocab, space, pretrain, rehearsal, devices, eval_sets)


def ngram_counts(utts, n):
    counts = {}
    for u in utts:
        t = u.tokens
        for i in range(len(t) - n + 1):
            g = t[i : i + n]
            counts[g] = counts.get(g, 0) + 1
    return counts


def delta_ngram_ratio(corpus, n=1):
    """Relative frequency ratio continual:pretrain for n-grams containing a new word."""
    new_ids = {corpus.vocab.index[w] for w in DELTA_WORDS}
    cont = [u for d in corpus.devices.values() for u in d]
    c_new, c_old = ngram_counts(cont, n), ngram_counts(corpus.pretrain, n)
    tot_new, tot_old = sum(c_new.values()), sum(c_old.values())
    ratios = {}
    for g, c in c_new.items():
        if new_ids & set(g):
            f_old = c_old.get(g, 0) / tot_old
            ratios[g] = np.inf if f_old == 0 else (c / tot_new) / f_old
    return ratios
