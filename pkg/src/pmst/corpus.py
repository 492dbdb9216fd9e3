"""Synthetic multilingual ASR/ST/MT data, pair sampling, batching and filtering.

Every language renders a shared inventory of *concepts* through its own
invertible token map, so any two renderings of one concept sequence are exact
translations of each other.  Speech is simulated by emitting one feature
vector per token, repeated ``ratio`` times, with additive Gaussian noise.
Feature vectors mix a concept component shared across languages with a
language-specific one, which is what lets high-resource pairs help a
low-resource one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import checkpoint

logger = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3

TASKS = ("ASR", "ST", "MT")
SPEECH, TEXT = "speech", "text"


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token-id layout: specials, then one tag per language, then content ranges.

    ``ranges`` holds ``(lang, start, stop)`` half-open content ranges; a
    language may have a tag without content (after filtering).
    """

    specials: tuple[str, ...]
    languages: tuple[str, ...]
    ranges: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        if self.specials[: len(SPECIALS)] != SPECIALS:
            raise VocabError(f"specials must start with {SPECIALS}")
        if len(set(self.languages)) != len(self.languages):
            raise VocabError("duplicate language tag")
        first_content = len(self.specials) + len(self.languages)
        spans = sorted((start, stop, lang) for lang, start, stop in self.ranges)
        prev = first_content
        for start, stop, lang in spans:
            if lang not in self.languages:
                raise VocabError(f"content range for unknown language {lang!r}")
            if start < prev or stop < start:
                raise VocabError(f"overlapping language ranges at {lang!r}")
            prev = stop
        if len({lang for lang, _, _ in self.ranges}) != len(self.ranges):
            raise VocabError("overlapping language ranges (language listed twice)")

    @classmethod
    def build(cls, languages: Sequence[str], tokens_per_lang: int,
              extra_specials: Sequence[str] = ()) -> "Vocab":
        specials = SPECIALS + tuple(extra_specials)
        start = len(specials) + len(languages)
        ranges = []
        for lang in languages:
            ranges.append((lang, start, start + tokens_per_lang))
            start += tokens_per_lang
        return cls(specials, tuple(languages), tuple(ranges))

    @property
    def size(self) -> int:
        stops = [stop for _, _, stop in self.ranges]
        return max(stops, default=len(self.specials) + len(self.languages))

    def __len__(self) -> int:
        return self.size

    def tag(self, lang: str) -> int:
        try:
            return len(self.specials) + self.languages.index(lang)
        except ValueError:
            raise VocabError(f"unknown language tag {lang!r}") from None

    @property
    def tag_ids(self) -> list[int]:
        return [self.tag(lang) for lang in self.languages]

    def content_range(self, lang: str) -> range:
        for name, start, stop in self.ranges:
            if name == lang:
                return range(start, stop)
        raise VocabError(f"language {lang!r} has no content range")

    def content_languages(self) -> list[str]:
        return [lang for lang, _, _ in self.ranges]

    def lang_of(self, token: int) -> str | None:
        for lang, start, stop in self.ranges:
            if start <= token < stop:
                return lang
        return None

    def is_content(self, token: int) -> bool:
        return self.lang_of(token) is not None

    def to_dict(self) -> dict:
        return {"specials": list(self.specials), "languages": list(self.languages),
                "ranges": [list(r) for r in self.ranges]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Vocab":
        return cls(tuple(d["specials"]), tuple(d["languages"]),
                   tuple((str(a), int(b), int(c)) for a, b, c in d["ranges"]))


@dataclass
class World:
    """Fixed per-language token maps and the speech-feature table."""

    vocab: Vocab
    concepts: int
    maps: dict[str, np.ndarray]       # concept -> token id
    reverse: dict[str, bool]          # word order flipped
    features: np.ndarray              # (vocab size, feature_dim), zero rows for non-content

    def render(self, lang: str, concepts: Sequence[int]) -> np.ndarray:
        tokens = self.maps[lang][np.asarray(concepts, dtype=np.int64)]
        return tokens[::-1].copy() if self.reverse[lang] else tokens

    def read(self, lang: str, tokens: Sequence[int]) -> np.ndarray:
        inverse = np.full(self.vocab.size, -1, dtype=np.int64)
        inverse[self.maps[lang]] = np.arange(self.concepts)
        concepts = inverse[np.asarray(tokens, dtype=np.int64)]
        return concepts[::-1].copy() if self.reverse[lang] else concepts

    def speak(self, lang: str, concepts: Sequence[int], ratio: int, noise: float,
              rng: np.random.Generator) -> np.ndarray:
        tokens = self.render(lang, concepts)
        clean = np.repeat(self.features[tokens], ratio, axis=0)
        if noise > 0:
            clean = clean + rng.normal(0.0, noise, size=clean.shape)
        return clean


def build_world(languages: Sequence[str], tokens_per_lang: int, feature_dim: int, seed: int,
                lang_specificity: float = 0.5, feature_layer: int = 0, reorder: bool = True,
                extra_specials: Sequence[str] = ()) -> World:
    vocab = Vocab.build(languages, tokens_per_lang, extra_specials)
    rng = np.random.default_rng([seed, 7919])
    shared = rng.normal(size=(tokens_per_lang, feature_dim))
    maps, reverse = {}, {}
    features = np.zeros((vocab.size, feature_dim))
    mix = np.sqrt(lang_specificity), np.sqrt(1.0 - lang_specificity)
    for i, lang in enumerate(languages):
        span = vocab.content_range(lang)
        perm = rng.permutation(tokens_per_lang)
        maps[lang] = np.asarray(span)[perm]
        reverse[lang] = bool(reorder and i % 2 == 1)
        own = rng.normal(size=(tokens_per_lang, feature_dim))
        features[maps[lang]] = mix[1] * shared + mix[0] * own
    # deeper "extractor layers" are fixed random tanh maps of the clean features
    for _ in range(feature_layer):
        w = rng.normal(size=(feature_dim, feature_dim)) / np.sqrt(feature_dim)
        features = np.tanh(features @ w) * 2.0
        features[: len(vocab.specials) + len(vocab.languages)] = 0.0
    return World(vocab, tokens_per_lang, maps, reverse, features)


@dataclass(frozen=True)
class PairSpec:
    src: str
    tgt: str
    task: str = "ST"
    train: int = 5000
    valid: int = 100
    test: int = 100

    @property
    def route(self) -> str:
        return TEXT if self.task == "MT" else SPEECH


@dataclass
class CorpusSpec:
    languages: list[str]
    pairs: list[PairSpec]
    tokens_per_lang: int = 100
    feature_dim: int = 16
    ratio: int = 12
    noise: float = 0.1
    min_len: int = 3
    max_len: int = 8
    world_seed: int = 0
    lang_specificity: float = 0.5
    feature_layer: int = 0
    reorder: bool = True
    contamination: float = 0.0  # share of ASR training audio drawn from held-out recordings

    def world(self) -> World:
        return build_world(self.languages, self.tokens_per_lang, self.feature_dim, self.world_seed,
                           self.lang_specificity, self.feature_layer, self.reorder)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CorpusSpec":
        d = dict(d)
        d["pairs"] = [PairSpec(**p) for p in d.get("pairs", [])]
        return cls(**d)


@dataclass
class Sample:
    utterance_id: str
    task: str
    src_lang: str
    tgt_lang: str
    source: np.ndarray   # int64 token ids, or float64 (frames, feature_dim)
    target: np.ndarray   # int64 content ids, no tag and no eos
    split: str = "train"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "ASR" and self.src_lang != self.tgt_lang:
            raise ValueError("ASR sample must have src_lang == tgt_lang")

    @property
    def route(self) -> str:
        return SPEECH if self.source.ndim == 2 else TEXT

    @property
    def pair(self) -> str:
        return f"{self.src_lang}-{self.tgt_lang}"

    @property
    def source_length(self) -> int:
        return int(self.source.shape[0])


@dataclass
class Corpus:
    vocab: Vocab
    samples: list[Sample]
    spec: CorpusSpec | None = None
    _world: World | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def world(self) -> World:
        if self._world is None:
            if self.spec is None:
                raise ValueError("corpus has no generating spec")
            self._world = self.spec.world()
        return self._world

    def derive(self, samples: Iterable[Sample]) -> "Corpus":
        return Corpus(self.vocab, list(samples), self.spec, self._world)

    def split(self, name: str) -> "Corpus":
        return self.derive(s for s in self.samples if s.split == name)

    def select(self, pairs: Iterable[str] | None = None, tasks: Iterable[str] | None = None) -> "Corpus":
        pairs = set(pairs) if pairs is not None else None
        tasks = set(tasks) if tasks is not None else None
        return self.derive(s for s in self.samples
                           if (pairs is None or s.pair in pairs) and (tasks is None or s.task in tasks))

    def pairs(self) -> list[str]:
        return sorted({s.pair for s in self.samples})

    def __add__(self, other: "Corpus") -> "Corpus":
        if other.vocab != self.vocab:
            raise VocabError("cannot concatenate corpora with different vocabularies")
        return self.derive(self.samples + other.samples)


def _concepts(rng: np.random.Generator, spec: CorpusSpec) -> np.ndarray:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return rng.integers(0, spec.tokens_per_lang, size=n)


def generate_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Render train/valid/test splits for every pair in ``spec``.

    A recording ``(lang, k)`` always yields the same concepts and audio, so an
    ASR pair drawing recordings used by another pair's held-out split is a
    genuine contamination that ``filter_contamination`` can remove.
    """
    if spec.ratio < 1:
        raise ValueError("length ratio must be >= 1")
    if len(spec.languages) < 2:
        raise ValueError("need at least two languages")
    world = spec.world()
    lang_index = {lang: i for i, lang in enumerate(spec.languages)}
    held: dict[str, list[int]] = {}
    plan: list[tuple[PairSpec, str, list[int]]] = []
    for p_idx, pair in enumerate(spec.pairs):
        for lang in (pair.src, pair.tgt):
            if lang not in lang_index:
                raise VocabError(f"unknown language tag {lang!r}")
        base = (p_idx + 1) * 1_000_000
        sizes = {"train": pair.train, "valid": pair.valid, "test": pair.test}
        offset = 0
        for split, n in sizes.items():
            ids = list(range(base + offset, base + offset + n))
            offset += n
            plan.append((pair, split, ids))
            if split != "train" and pair.route == SPEECH:
                held.setdefault(pair.src, []).extend(ids)
    if spec.contamination > 0:
        pick = np.random.default_rng([seed, 31337])
        for i, (pair, split, ids) in enumerate(plan):
            pool = held.get(pair.src, [])
            if pair.task != "ASR" or split != "train" or not pool:
                continue
            n = min(int(round(spec.contamination * len(ids))), len(pool))
            ids = list(ids)
            ids[:n] = [int(x) for x in pick.choice(pool, size=n, replace=False)]
            plan[i] = (pair, split, ids)

    samples = []
    for pair, split, ids in plan:
        for k in ids:
            rng = np.random.default_rng([seed, lang_index[pair.src], k])
            concepts = _concepts(rng, spec)
            target = world.render(pair.tgt, concepts)
            if pair.route == SPEECH:
                source = world.speak(pair.src, concepts, spec.ratio, spec.noise, rng)
                uid = f"{pair.src}_{k:07d}"
            else:
                source = world.render(pair.src, concepts)
                uid = f"txt_{pair.src}_{k:07d}"
            samples.append(Sample(uid, pair.task, pair.src, pair.tgt, source, target, split))
    return Corpus(world.vocab, samples, spec, world)


# ---------------------------------------------------------------- sampling


@dataclass
class PairStats:
    counts: dict[str, int]

    def __post_init__(self):
        if any(c <= 0 for c in self.counts.values()):
            raise ValueError("pair counts must be positive")

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "PairStats":
        counts: dict[str, int] = {}
        for s in corpus:
            counts[s.pair] = counts.get(s.pair, 0) + 1
        return cls(dict(sorted(counts.items())))


def temperature_probs(stats: PairStats | Mapping[str, int], T: float) -> dict[str, float]:
    """``p_k = u_k^(1/T) / sum_i u_i^(1/T)``."""
    counts = stats.counts if isinstance(stats, PairStats) else dict(stats)
    if not counts:
        raise ValueError("empty pair statistics")
    if T <= 0:
        raise ValueError("temperature must be positive")
    keys = list(counts)
    u = np.array([counts[k] for k in keys], dtype=np.float64)
    w = np.exp(np.log(u) / T)
    return dict(zip(keys, (w / w.sum()).tolist()))


def temperature_sample(stats: PairStats | Mapping[str, int], T: float, rng: np.random.Generator,
                       size: int | None = None):
    probs = temperature_probs(stats, T)
    keys = list(probs)
    idx = rng.choice(len(keys), size=size, p=list(probs.values()))
    if size is None:
        return keys[int(idx)]
    return [keys[i] for i in idx]


@dataclass
class Batch:
    samples: list[Sample]

    @property
    def source_features(self) -> int:
        return sum(s.source_length for s in self.samples)

    def __len__(self) -> int:
        return len(self.samples)


def make_batches(corpus: Corpus, T: float, max_source_features: int, seed: int,
                 stats: PairStats | None = None) -> Iterator[Batch]:
    """Endless stream of length-capped batches.

    Each slot draws a pair by temperature sampling, then the next sample of that
    pair from its own reshuffled cycle.  Source length counts frames for speech
    and tokens for text.
    """
    rng = np.random.default_rng(seed)
    by_pair: dict[str, list[Sample]] = {}
    for s in corpus:
        if s.source_length > max_source_features:
            logger.warning("skipping %s: %d source frames exceed batch cap %d",
                           s.utterance_id, s.source_length, max_source_features)
            continue
        by_pair.setdefault(s.pair, []).append(s)
    if not by_pair:
        raise ValueError("no sample fits in a batch")
    stats = stats or PairStats({k: len(v) for k, v in sorted(by_pair.items())})
    stats = PairStats({k: v for k, v in stats.counts.items() if k in by_pair})
    probs = temperature_probs(stats, T)
    keys = list(probs)
    p = np.array(list(probs.values()))
    orders = {k: [] for k in keys}

    def next_sample(key: str) -> Sample:
        if not orders[key]:
            orders[key] = list(rng.permutation(len(by_pair[key])))
        return by_pair[key][orders[key].pop()]

    current: list[Sample] = []
    total = 0
    while True:
        for i in rng.choice(len(keys), size=1024, p=p):
            s = next_sample(keys[i])
            if current and total + s.source_length > max_source_features:
                yield Batch(current)
                current, total = [], 0
            current.append(s)
            total += s.source_length


# ---------------------------------------------------------------- filtering


def contamination_rate(train: Corpus, held: Sequence[Corpus]) -> float:
    held_ids = {s.utterance_id for c in held for s in c}
    if not len(train):
        return 0.0
    return sum(s.utterance_id in held_ids for s in train) / len(train)


def filter_contamination(train: Corpus, held: Sequence[Corpus]) -> Corpus:
    """Drop training samples whose utterance id occurs in any held-out corpus."""
    held_ids = {s.utterance_id for c in held for s in c}
    kept = [s for s in train if s.utterance_id not in held_ids]
    if len(kept) != len(train):
        logger.info("removed %d contaminated samples (%.2f%%)", len(train) - len(kept),
                    100.0 * (len(train) - len(kept)) / len(train))
    return train.derive(kept)


def filter_vocab(vocab: Vocab, model, languages: Sequence[str]):
    """Restrict ``vocab`` and the model's embeddings to ``languages``.

    Returns ``(vocab, model, remap)`` where ``remap[old_id]`` is the new id or -1.
    Specials and every language tag are always kept.
    """
    languages = list(languages)
    if not languages:
        raise ValueError("language set must not be empty")
    for lang in languages:
        vocab.content_range(lang)
    keep = list(range(len(vocab.specials) + len(vocab.languages)))
    ranges = []
    for lang, start, stop in vocab.ranges:
        if lang in languages:
            new_start = len(keep)
            keep.extend(range(start, stop))
            ranges.append((lang, new_start, len(keep)))
    new_vocab = Vocab(vocab.specials, vocab.languages, tuple(ranges))
    remap = np.full(vocab.size, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    new_model = model.with_vocab(new_vocab, keep) if model is not None else None
    return new_vocab, new_model, remap


def inverse_remap(remap: np.ndarray) -> np.ndarray:
    kept = np.flatnonzero(remap >= 0)
    inv = np.empty(len(kept), dtype=np.int64)
    inv[remap[kept]] = kept
    return inv


# ---------------------------------------------------------------- files


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Line-delimited records; speech features go to ``<path>.features.ckpt``."""
    path = Path(path)
    feats_path = path.with_name(path.name + ".features.ckpt")
    features = {}
    with open(path, "w", encoding="utf-8") as fh:
        header = {"type": "header", "vocab": corpus.vocab.to_dict(),
                  "spec": corpus.spec.to_dict() if corpus.spec else None}
        fh.write(json.dumps(header) + "\n")
        for s in corpus:
            rec = {"utterance_id": s.utterance_id, "task": s.task, "src_lang": s.src_lang,
                   "tgt_lang": s.tgt_lang, "split": s.split, "target": s.target.tolist()}
            if s.route == SPEECH:
                key = f"{s.split}/{s.utterance_id}"
                features[key] = s.source
                rec["features"] = key
            else:
                rec["source"] = s.source.tolist()
            fh.write(json.dumps(rec) + "\n")
    checkpoint.save_tensors(feats_path, features, {"corpus": path.name})


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    feats_path = path.with_name(path.name + ".features.ckpt")
    features = None
    samples = []
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        for line in fh:
            rec = json.loads(line)
            if "features" in rec:
                if features is None:
                    features, _ = checkpoint.load_tensors(feats_path, as_torch=False)
                source = features[rec["features"]]
            else:
                source = np.asarray(rec["source"], dtype=np.int64)
            samples.append(Sample(rec["utterance_id"], rec["task"], rec["src_lang"], rec["tgt_lang"],
                                  source, np.asarray(rec["target"], dtype=np.int64), rec.get("split", "train")))
    spec = CorpusSpec.from_dict(header["spec"]) if header.get("spec") else None
    return Corpus(Vocab.from_dict(header["vocab"]), samples, spec)


def with_pairs(spec: CorpusSpec, pairs: Sequence[PairSpec]) -> CorpusSpec:
    return replace(spec, pairs=list(pairs))
