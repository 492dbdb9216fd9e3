"""Run configuration documents (``*.cfg``): one JSON tree with strict keys.

Top-level sections::

    profile   "toy" | "desk" | "paper"   (defaults the other sections start from)
    seed      int
    model     ModelConfig fields except vocab_size (taken from the corpus)
    adapters  AdapterSpec fields, or null for no adapters
    freeze    FreezePlan fields
    train     TrainConfig fields (used for ST training and adaptation)
    pretrain  TrainConfig fields for text-only pre-training
    corpus    CorpusSpec fields for speech data (pairs: list of PairSpec objects)
    mt_pairs_size   training sentences per direction of the text pre-training corpus
    decode    DecodeOptions fields
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .corpus import CorpusSpec, PairSpec
from .inference import DecodeOptions
from .model import AdapterSpec, FreezePlan, ModelConfig
from .training import TrainConfig

PROFILES = ("toy", "desk", "paper")


class ConfigError(ValueError):
    pass


def _model_defaults(profile: str) -> dict:
    if profile == "paper":
        return dict(enc_layers=24, dec_layers=24, d_model=1024, ffn_dim=8192, heads=16, conv_layers=1,
                    conv_channels=80, feature_dim=1024, dropout=0.3, attention_dropout=0.1)
    if profile == "desk":
        return dict(enc_layers=3, dec_layers=3, d_model=32, ffn_dim=128, heads=4, conv_layers=1,
                    conv_channels=16, feature_dim=16, dropout=0.1, attention_dropout=0.0)
    return {}


def _train_defaults(profile: str) -> dict:
    if profile == "paper":
        return dict(max_updates=200_000, warmup=10_000, validate_every=5_000, valid_beam=5)
    if profile == "desk":
        return dict(max_updates=2_000, warmup=200, lr_max=2e-3, validate_every=100,
                    max_source_features=600)
    return {}


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    model: dict = field(default_factory=dict)
    adapters: dict | None = field(default_factory=dict)
    freeze: dict = field(default_factory=lambda: {"mode": "fine_tune_bottom", "layers": 2})
    train: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    corpus: dict = field(default_factory=dict)
    mt_pairs_size: int = 2_000
    decode: dict = field(default_factory=dict)

    # -- typed views

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **{**_model_defaults(self.profile), **self.model})

    def adapter_spec(self) -> AdapterSpec | None:
        if self.adapters is None:
            return None
        d = dict(self.adapters)
        plan = self.freeze_plan()
        if plan.mode == "fine_tune_bottom":
            d.setdefault("skip_bottom", plan.layers)
        if self.profile == "desk":
            d.setdefault("bottleneck_dim", 16)
        return AdapterSpec.from_dict(d)

    def freeze_plan(self) -> FreezePlan:
        return FreezePlan.from_dict(self.freeze)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**_train_defaults(self.profile), **self.train})

    def pretrain_config(self) -> TrainConfig:
        base = {**_train_defaults(self.profile), "patience": 3}
        return TrainConfig(**{**base, **self.pretrain})

    def corpus_spec(self) -> CorpusSpec:
        d = dict(self.corpus)
        if self.profile == "desk":
            d = {"tokens_per_lang": 100, "ratio": 4, "min_len": 3, "max_len": 7, **d}
        d.setdefault("languages", ["a", "b", "c", "x", "y"])
        d.setdefault("pairs", [{"src": "a", "tgt": "x", "task": "ST"}, {"src": "b", "tgt": "x", "task": "ST"},
                               {"src": "c", "tgt": "x", "task": "ST", "train": 200}])
        d.setdefault("feature_dim", self.model_config(vocab_size=1).feature_dim)
        return CorpusSpec.from_dict(d)

    def mt_corpus_spec(self) -> CorpusSpec:
        spec = self.corpus_spec()
        size = self.mt_pairs_size
        pairs = [PairSpec(s, t, "MT", size, max(size // 40, 20), max(size // 40, 20))
                 for s in spec.languages for t in spec.languages]
        return replace(spec, pairs=pairs)

    def decode_options(self) -> DecodeOptions:
        d = dict(self.decode)
        if self.profile == "paper":
            d.setdefault("beam", 5)
        return DecodeOptions(**d)

    # -- documents

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {PROFILES}")
        checks = [
            ("model", self.model, ModelConfig, {"vocab_size"}),
            ("freeze", self.freeze, FreezePlan, set()),
            ("train", self.train, TrainConfig, set()),
            ("pretrain", self.pretrain, TrainConfig, set()),
            ("corpus", self.corpus, CorpusSpec, set()),
            ("decode", self.decode, DecodeOptions, set()),
        ]
        if self.adapters is not None:
            checks.append(("adapters", self.adapters, AdapterSpec, set()))
        for section, values, cls, banned in checks:
            allowed = {f.name for f in fields(cls)} - banned
            unknown = set(values) - allowed
            if unknown:
                raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        for p in self.corpus.get("pairs", []):
            unknown = set(p) - {f.name for f in fields(PairSpec)}
            if unknown:
                raise ConfigError(f"unknown key(s) in corpus pair: {', '.join(sorted(unknown))}")
        try:
            self.model_config(vocab_size=1)
            self.adapter_spec()
            self.train_config()
            self.pretrain_config()
            self.corpus_spec()
            self.decode_options()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    @classmethod
    def profile_defaults(cls, profile: str) -> "RunConfig":
        return cls(profile=profile).validate()


def load_config(path: str | Path | None, profile: str | None = None) -> RunConfig:
    if path is None:
        return RunConfig.profile_defaults(profile or "toy")
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    if profile is not None:
        doc["profile"] = profile
    return RunConfig.from_dict(doc)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def hyperparameters(cfg: RunConfig) -> list[tuple[str, Any]]:
    """Resolved hyper-parameters under their conventional names."""
    spec = cfg.corpus_spec()
    m = cfg.model_config(vocab_size=1)
    a = cfg.adapter_spec()
    t = cfg.train_config()
    d = cfg.decode_options()
    return [
        ("Batch size", t.max_source_features),
        ("Update freq", t.update_freq),
        ("Max learning rate", t.lr_max),
        ("Initial LR", t.lr_init),
        ("Schedule", "inverse square root"),
        ("Warmup steps", t.warmup),
        ("Adam betas", ", ".join(str(b) for b in t.betas)),
        ("Label smoothing", t.label_smoothing),
        ("Weight decay", t.weight_decay),
        ("Dropout", m.dropout),
        ("Attention dropout", m.attention_dropout),
        ("Gradient clipping", t.grad_clip if t.grad_clip else "none"),
        ("1D Convolutions", m.conv_layers),
        ("Conv channels", m.conv_channels),
        ("Conv kernel size", m.kernel),
        ("Conv stride", m.stride),
        ("Embed scaling factor", f"sqrt({m.d_model})"),
        ("Positional encoding", "sinusoidal"),
        ("Encoder layers", m.enc_layers),
        ("Decoder layers", m.dec_layers),
        ("Embed dim", m.d_model),
        ("FFN dim", m.ffn_dim),
        ("Activation", "ReLU"),
        ("Attention heads", m.heads),
        ("Pre-norm", m.pre_norm),
        ("Adapter dim", a.bottleneck_dim if a else "none"),
        ("Lang-pair temperature", t.temperature),
        ("Heterogeneous batches", True),
        ("Valid freq", t.validate_every),
        ("Checkpoint averaging", t.avg_last),
        ("Patience", t.patience),
        ("Early stopping metric", "BLEU"),
        ("Beam size", d.beam),
        ("Max updates", t.max_updates),
        ("Speech feature dim", spec.feature_dim),
    ]


def format_hyperparameters(cfg: RunConfig) -> str:
    rows = hyperparameters(cfg)
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
