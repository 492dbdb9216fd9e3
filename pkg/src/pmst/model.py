"""Speech/text encoder-decoder built around a frozen translation backbone.

Speech features pass through a linear+ReLU projection and a stack of strided
convolutions before entering the (mostly frozen) transformer encoder; text
skips that front-end and enters through the shared token embedding.  Bottleneck
adapters sit after encoder and decoder layers and can be switched off per side
at inference time.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import EOS, PAD, SPEECH, TEXT, Sample, Vocab, VocabError
from .tensor import CONV_KERNEL, CONV_PADDING, CONV_STRIDE, DTYPE, conv1d, conv_output_length, layer_norm


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    enc_layers: int = 4
    dec_layers: int = 4
    d_model: int = 64
    ffn_dim: int = 256
    heads: int = 4
    pre_norm: bool = True
    conv_layers: int = 1
    conv_channels: int = 16
    kernel: int = CONV_KERNEL
    stride: int = CONV_STRIDE
    feature_dim: int = 16
    dropout: float = 0.3
    attention_dropout: float = 0.1
    max_positions: int = 1024

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0 <= self.conv_layers <= 3:
            raise ConfigError(f"conv_layers must be in 0..3, got {self.conv_layers}")
        if (self.kernel, self.stride) != (CONV_KERNEL, CONV_STRIDE):
            raise ConfigError("only kernel 5 / stride 2 convolutions are supported")
        if not self.pre_norm:
            raise ConfigError("only pre-norm layers are supported")
        for name in ("vocab_size", "enc_layers", "dec_layers", "d_model", "ffn_dim", "heads",
                     "conv_channels", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def embed_scale(self) -> float:
        return math.sqrt(self.d_model)


@dataclass(frozen=True)
class AdapterSpec:
    """Placement of one group of bottleneck adapters.

    ``enc_layers``/``dec_layers`` list explicit layer indices; ``None`` means
    every layer except the bottom ``skip_bottom`` encoder layers (fine-tuned
    layers get no adapters).
    """

    bottleneck_dim: int = 64
    encoder: bool = True
    decoder: bool = True
    enc_layers: tuple[int, ...] | None = None
    dec_layers: tuple[int, ...] | None = None
    skip_bottom: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ConfigError("bottleneck_dim must be >= 1")

    def encoder_indices(self, n_layers: int) -> list[int]:
        if not self.encoder:
            return []
        if self.enc_layers is not None:
            return sorted(self.enc_layers)
        return list(range(self.skip_bottom, n_layers))

    def decoder_indices(self, n_layers: int) -> list[int]:
        if not self.decoder:
            return []
        return sorted(self.dec_layers) if self.dec_layers is not None else list(range(n_layers))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AdapterSpec":
        d = dict(d)
        for key in ("enc_layers", "dec_layers"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


FINE_TUNE_BOTTOM = "fine_tune_bottom"
STACKED = "stacked"
ADAPTERS_ONLY = "adapters_only"
FULL = "full"
PLAN_MODES = (FINE_TUNE_BOTTOM, STACKED, ADAPTERS_ONLY, FULL)


@dataclass(frozen=True)
class FreezePlan:
    mode: str
    layers: int = 0
    adapter_groups: tuple[str, ...] | None = None  # None: every group
    train_conv: bool = True

    def __post_init__(self):
        if self.mode not in PLAN_MODES:
            raise ConfigError(f"unknown freeze mode {self.mode!r}")

    @classmethod
    def fine_tune_bottom(cls, k: int) -> "FreezePlan":
        return cls(FINE_TUNE_BOTTOM, k)

    @classmethod
    def stacked(cls, n: int) -> "FreezePlan":
        return cls(STACKED, n)

    @classmethod
    def adapters_only(cls, groups: Sequence[str] | None = None, train_conv: bool = False) -> "FreezePlan":
        return cls(ADAPTERS_ONLY, 0, tuple(groups) if groups is not None else None, train_conv)

    @classmethod
    def full(cls) -> "FreezePlan":
        return cls(FULL)

    def trainable(self, name: str) -> bool:
        if self.mode == FULL:
            return True
        if name.startswith("adapters."):
            group = name.split(".")[1]
            return self.adapter_groups is None or group in self.adapter_groups
        if name.startswith("speech."):
            return self.train_conv
        if self.mode == FINE_TUNE_BOTTOM and name.startswith("encoder.layers."):
            return int(name.split(".")[2]) < self.layers
        if self.mode == STACKED:
            return name.startswith("encoder.stacked.")
        return False

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FreezePlan":
        d = dict(d)
        if d.get("adapter_groups") is not None:
            d["adapter_groups"] = tuple(d["adapter_groups"])
        return cls(**d)


@dataclass
class SourceInput:
    route: str
    payload: np.ndarray | torch.Tensor
    src_lang: str
    tgt_lang: str

    def __post_init__(self):
        ndim = np.ndim(self.payload)
        if self.route == SPEECH and ndim != 2:
            raise ValueError("speech payload must be a (frames, feature_dim) matrix")
        if self.route == TEXT and ndim != 1:
            raise ValueError("text payload must be a token-id sequence")
        if self.route not in (SPEECH, TEXT):
            raise ValueError(f"unknown route {self.route!r}")

    @classmethod
    def from_sample(cls, sample: Sample, tgt_lang: str | None = None) -> "SourceInput":
        return cls(sample.route, sample.source, sample.src_lang, tgt_lang or sample.tgt_lang)


# ---------------------------------------------------------------- layers


@lru_cache(maxsize=16)
def sinusoidal_table(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=DTYPE).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=DTYPE) * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_len, d_model, dtype=DTYPE)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return table


class LayerNorm(nn.Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE)) if affine else None
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE)) if affine else None

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


def _linear(i: int, o: int, bias: bool = True) -> nn.Linear:
    return nn.Linear(i, o, bias=bias, dtype=DTYPE)


class Attention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.dropout = dropout
        self.q = _linear(d_model, d_model)
        self.k = _linear(d_model, d_model)
        self.v = _linear(d_model, d_model)
        self.out = _linear(d_model, d_model)

    def forward(self, x, memory, key_padding: torch.Tensor | None, causal: bool = False):
        B, T, D = x.shape
        S = memory.shape[1]
        h, dh = self.heads, D // self.heads
        q = self.q(x).view(B, T, h, dh).transpose(1, 2)
        k = self.k(memory).view(B, S, h, dh).transpose(1, 2)
        v = self.v(memory).view(B, S, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(T, S, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        probs = F.dropout(torch.softmax(scores, dim=-1), self.dropout, self.training)
        return self.out((probs @ v).transpose(1, 2).reshape(B, T, D))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = _linear(d_model, ffn_dim)
        self.fc2 = _linear(ffn_dim, d_model)
        self.dropout = dropout

    def forward(self, x):
        return self.fc2(F.dropout(F.relu(self.fc1(x)), self.dropout, self.training))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn_norm = LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.heads, cfg.attention_dropout)
        self.ffn_norm = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x, pad):
        h = self.self_attn_norm(x)
        x = x + F.dropout(self.self_attn(h, h, pad), self.dropout, self.training)
        x = x + F.dropout(self.ffn(self.ffn_norm(x)), self.dropout, self.training)
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn_norm = LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.heads, cfg.attention_dropout)
        self.cross_attn_norm = LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.heads, cfg.attention_dropout)
        self.ffn_norm = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x, memory, memory_pad):
        h = self.self_attn_norm(x)
        x = x + F.dropout(self.self_attn(h, h, None, causal=True), self.dropout, self.training)
        h = self.cross_attn_norm(x)
        x = x + F.dropout(self.cross_attn(h, memory, memory_pad), self.dropout, self.training)
        x = x + F.dropout(self.ffn(self.ffn_norm(x)), self.dropout, self.training)
        return x


class Adapter(nn.Module):
    """Residual bottleneck: x + up(relu(down(norm(x)))).

    The norm carries no parameters and ``up`` starts at zero, so a fresh
    adapter is an exact identity.
    """

    def __init__(self, d_model: int, bottleneck: int):
        super().__init__()
        self.norm = LayerNorm(d_model, affine=False)
        self.down = _linear(d_model, bottleneck)
        self.up = _linear(bottleneck, d_model)

    def forward(self, x):
        return x + self.up(F.relu(self.down(self.norm(x))))


class AdapterGroup(nn.Module):
    def __init__(self, cfg: ModelConfig, spec: AdapterSpec, languages: Sequence[str] | None):
        super().__init__()
        self.spec = spec
        self.languages = tuple(languages) if languages is not None else None
        self.enc = nn.ModuleDict({str(i): Adapter(cfg.d_model, spec.bottleneck_dim)
                                  for i in spec.encoder_indices(cfg.enc_layers)})
        self.dec = nn.ModuleDict({str(i): Adapter(cfg.d_model, spec.bottleneck_dim)
                                  for i in spec.decoder_indices(cfg.dec_layers)})

    def scope(self, src_langs: Sequence[str]) -> torch.Tensor | None:
        """Row mask of the batch entries this group applies to (None: all rows)."""
        if self.languages is None:
            return None
        return torch.tensor([lang in self.languages for lang in src_langs])


class SpeechFrontEnd(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.conv_channels
        self.proj_in = _linear(cfg.feature_dim, c)
        self.convs = nn.ModuleList(nn.Conv1d(c, c, CONV_KERNEL, CONV_STRIDE, CONV_PADDING, dtype=DTYPE)
                                   for _ in range(cfg.conv_layers))
        self.proj_out = _linear(c, cfg.d_model)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor):
        x = F.relu(self.proj_in(feats))
        x = x * _length_mask(lengths, x.shape[1]).unsqueeze(-1)
        for conv in self.convs:
            x = F.relu(conv1d(x, conv.weight, conv.bias))
            lengths = torch.tensor([conv_output_length(int(n)) for n in lengths])
            x = x * _length_mask(lengths, x.shape[1]).unsqueeze(-1)
        return self.proj_out(x), lengths


def _length_mask(lengths: torch.Tensor, width: int) -> torch.Tensor:
    return (torch.arange(width).unsqueeze(0) < lengths.unsqueeze(1)).to(DTYPE)


# ---------------------------------------------------------------- batches


@dataclass
class EncoderInput:
    route: str
    src_langs: list[str]
    tgt_langs: list[str]
    tokens: torch.Tensor | None = None      # (B, S) text route
    features: torch.Tensor | None = None    # (B, L, F) speech route
    lengths: torch.Tensor | None = None     # (B,) speech frame counts

    def __len__(self) -> int:
        return len(self.src_langs)


def collate_sources(sources: Sequence[SourceInput | Sample], vocab: Vocab) -> EncoderInput:
    """Pad a same-route list of inputs.  Text gets ``[src_tag] + tokens + [eos]``."""
    items = [s if isinstance(s, SourceInput) else SourceInput.from_sample(s) for s in sources]
    routes = {s.route for s in items}
    if len(routes) != 1:
        raise ValueError("cannot collate mixed routes; split by route first")
    route = routes.pop()
    src_langs = [s.src_lang for s in items]
    tgt_langs = [s.tgt_lang for s in items]
    for lang in tgt_langs:
        vocab.tag(lang)
    if route == TEXT:
        seqs = [[vocab.tag(s.src_lang)] + [int(t) for t in s.payload] + [EOS] for s in items]
        width = max(len(s) for s in seqs)
        tokens = torch.full((len(seqs), width), PAD, dtype=torch.long)
        for i, s in enumerate(seqs):
            tokens[i, : len(s)] = torch.tensor(s)
        return EncoderInput(route, src_langs, tgt_langs, tokens=tokens)
    mats = [torch.as_tensor(np.asarray(s.payload), dtype=DTYPE) for s in items]
    lengths = torch.tensor([m.shape[0] for m in mats])
    if int(lengths.min()) == 0:
        raise ValueError("empty sequence")
    feats = torch.zeros(len(mats), int(lengths.max()), mats[0].shape[1], dtype=DTYPE)
    for i, m in enumerate(mats):
        feats[i, : m.shape[0]] = m
    return EncoderInput(route, src_langs, tgt_langs, features=feats, lengths=lengths)


def collate_targets(samples: Sequence[Sample], vocab: Vocab) -> tuple[torch.Tensor, torch.Tensor]:
    """Decoder input ``[tgt_tag] + y`` and output ``y + [eos]``, both PAD-padded."""
    width = max(len(s.target) for s in samples) + 1
    prev = torch.full((len(samples), width), PAD, dtype=torch.long)
    gold = torch.full((len(samples), width), PAD, dtype=torch.long)
    for i, s in enumerate(samples):
        y = torch.as_tensor(np.asarray(s.target), dtype=torch.long)
        prev[i, 0] = vocab.tag(s.tgt_lang)
        prev[i, 1 : len(y) + 1] = y
        gold[i, : len(y)] = y
        gold[i, len(y)] = EOS
    return prev, gold


# ---------------------------------------------------------------- model


class Model(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocab):
        super().__init__()
        if config.vocab_size != vocab.size:
            raise ConfigError(f"vocab_size {config.vocab_size} != vocabulary size {vocab.size}")
        self.config = config
        self.vocab = vocab
        self.embed = nn.Embedding(config.vocab_size, config.d_model, padding_idx=PAD, dtype=DTYPE)
        self.speech = SpeechFrontEnd(config)
        self.encoder = nn.Module()
        self.encoder.stacked = nn.ModuleList()
        self.encoder.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.enc_layers))
        self.encoder.norm = LayerNorm(config.d_model)
        self.decoder = nn.Module()
        self.decoder.layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.dec_layers))
        self.decoder.norm = LayerNorm(config.d_model)
        self.adapters = nn.ModuleDict()

    # -- structure

    def add_adapter_group(self, name: str, spec: AdapterSpec, languages: Sequence[str] | None = None,
                          seed: int = 0) -> "AdapterGroup":
        if name in self.adapters:
            raise ConfigError(f"adapter group {name!r} already exists")
        for lang in languages or ():
            self.vocab.tag(lang)
        group = AdapterGroup(self.config, spec, languages)
        _init_module(group, torch.Generator().manual_seed(seed))
        self.adapters[name] = group
        return group

    def add_stacked_layers(self, n: int, seed: int = 0) -> None:
        """Insert ``n`` fresh encoder layers below the existing ones (speech route only)."""
        gen = torch.Generator().manual_seed(seed)
        for _ in range(n):
            layer = EncoderLayer(self.config)
            _init_module(layer, gen)
            self.encoder.stacked.append(layer)

    def describe(self) -> dict:
        return {
            "config": asdict(self.config),
            "vocab": self.vocab.to_dict(),
            "stacked": len(self.encoder.stacked),
            "adapters": [{"name": n, "spec": asdict(g.spec),
                          "languages": list(g.languages) if g.languages is not None else None}
                         for n, g in self.adapters.items()],
        }

    @classmethod
    def from_description(cls, desc: Mapping[str, Any]) -> "Model":
        model = cls(ModelConfig(**desc["config"]), Vocab.from_dict(desc["vocab"]))
        model.add_stacked_layers(desc.get("stacked", 0))
        for g in desc.get("adapters", []):
            model.add_adapter_group(g["name"], AdapterSpec.from_dict(g["spec"]), g["languages"])
        return model

    def with_vocab(self, vocab: Vocab, keep: Sequence[int]) -> "Model":
        """Copy of the model whose embedding/output rows are ``keep`` (in order)."""
        desc = self.describe()
        desc["config"]["vocab_size"] = vocab.size
        desc["vocab"] = vocab.to_dict()
        new = Model.from_description(desc)
        state = {k: v.clone() for k, v in self.state_dict().items()}
        state["embed.weight"] = state["embed.weight"][torch.as_tensor(list(keep))]
        new.load_state_dict(state)
        new.train(self.training)
        return new

    def param_count(self, names: Iterable[str] | None = None) -> int:
        params = dict(self.named_parameters())
        names = params.keys() if names is None else names
        return sum(params[n].numel() for n in names)

    # -- computation

    def encode(self, src: EncoderInput, enc_adapters: bool = True):
        cfg = self.config
        if src.route == SPEECH:
            x, lengths = self.speech(src.features, src.lengths)
            pad = _length_mask(lengths, x.shape[1]) == 0
            x = x * cfg.embed_scale
        else:
            pad = src.tokens == PAD
            x = self.embed(src.tokens) * cfg.embed_scale
        x = x + sinusoidal_table(cfg.max_positions, cfg.d_model)[: x.shape[1]]
        x = F.dropout(x, cfg.dropout, self.training)
        if src.route == SPEECH:
            for layer in self.encoder.stacked:
                x = layer(x, pad)
        groups = self._active_groups(src.src_langs) if enc_adapters else []
        for i, layer in enumerate(self.encoder.layers):
            x = layer(x, pad)
            x = self._adapt(x, groups, "enc", i)
        return self.encoder.norm(x), pad

    def decode(self, prev: torch.Tensor, memory: torch.Tensor, memory_pad: torch.Tensor,
               src_langs: Sequence[str], dec_adapters: bool = True) -> torch.Tensor:
        cfg = self.config
        x = self.embed(prev) * cfg.embed_scale
        x = x + sinusoidal_table(cfg.max_positions, cfg.d_model)[: x.shape[1]]
        x = F.dropout(x, cfg.dropout, self.training)
        groups = self._active_groups(src_langs) if dec_adapters else []
        for i, layer in enumerate(self.decoder.layers):
            x = layer(x, memory, memory_pad)
            x = self._adapt(x, groups, "dec", i)
        return self.decoder.norm(x) @ self.embed.weight.t()

    def forward(self, src: EncoderInput, prev: torch.Tensor, enc_adapters: bool = True,
                dec_adapters: bool = True) -> torch.Tensor:
        memory, pad = self.encode(src, enc_adapters)
        return self.decode(prev, memory, pad, src.src_langs, dec_adapters)

    def logits(self, source: SourceInput, target_prefix: Sequence[int], enc_adapters: bool = True,
               dec_adapters: bool = True) -> torch.Tensor:
        """Single-input forward: logits of shape ``(prefix_len, vocab_size)``.

        ``target_prefix`` holds the tokens after the forced target-language tag.
        """
        src = collate_sources([source], self.vocab)
        prev = torch.tensor([[self.vocab.tag(source.tgt_lang)] + [int(t) for t in target_prefix]])
        return self.forward(src, prev, enc_adapters, dec_adapters)[0]

    def _active_groups(self, src_langs):
        return [(g, g.scope(src_langs)) for g in self.adapters.values() if g.spec.enabled]

    @staticmethod
    def _adapt(x, groups, side: str, index: int):
        key = str(index)
        for group, rows in groups:
            adapters = group.enc if side == "enc" else group.dec
            if key not in adapters:
                continue
            y = adapters[key](x)
            if rows is None:
                x = y
            elif bool(rows.any()):
                x = torch.where(rows[:, None, None], y, x)
        return x


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    for name, p in module.named_parameters():
        with torch.no_grad():
            if ".up." in f".{name}" or name.endswith("bias"):
                p.zero_()
            elif name.endswith("norm.weight"):
                p.fill_(1.0)
            elif p.dim() >= 2:
                nn.init.xavier_uniform_(p, generator=gen)


def build_model(config: ModelConfig, vocab: Vocab, adapter_spec: AdapterSpec | None = None,
                seed: int = 0, adapter_languages: Sequence[str] | None = None) -> Model:
    """Fresh model; adapters (if any) form the group ``"main"`` and start as identities."""
    model = Model(config, vocab)
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        with torch.no_grad():
            if name == "embed.weight":
                nn.init.normal_(p, 0.0, config.d_model ** -0.5, generator=gen)
                p[PAD].zero_()
            elif name.endswith("norm.weight"):
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                nn.init.xavier_uniform_(p, generator=gen)
    if adapter_spec is not None:
        model.add_adapter_group("main", adapter_spec, adapter_languages, seed=seed + 1)
    return model


def apply_freeze_plan(model: Model, plan: FreezePlan) -> set[str]:
    """Mark parameters trainable per ``plan``; returns the trainable names."""
    if plan.mode == FINE_TUNE_BOTTOM and not 0 <= plan.layers <= model.config.enc_layers:
        raise ConfigError(f"cannot fine-tune {plan.layers} of {model.config.enc_layers} encoder layers")
    if plan.mode == STACKED and plan.layers != len(model.encoder.stacked):
        raise ConfigError(f"plan expects {plan.layers} stacked layers, model has {len(model.encoder.stacked)}")
    if plan.adapter_groups is not None:
        missing = set(plan.adapter_groups) - set(model.adapters)
        if missing:
            raise ConfigError(f"unknown adapter groups {sorted(missing)}")
    names = set()
    for name, p in model.named_parameters():
        keep = plan.trainable(name)
        if keep and name.startswith("adapters.") and not model.adapters[name.split(".")[1]].spec.enabled:
            keep = False
        p.requires_grad_(keep)
        if keep:
            names.add(name)
    return names


def swap_bottom_layers(st_model: Model, pretrained: Model) -> Model:
    """Copy of ``st_model`` with every backbone tensor restored from ``pretrained``.

    Speech front-end, stacked layers and adapters are kept, so the text route
    with adapters off computes exactly what ``pretrained`` computes.
    """
    core = ("vocab_size", "enc_layers", "dec_layers", "d_model", "ffn_dim", "heads")
    for key in core:
        if getattr(st_model.config, key) != getattr(pretrained.config, key):
            raise ConfigError(f"shape mismatch: {key} {getattr(st_model.config, key)} "
                              f"!= {getattr(pretrained.config, key)}")
    swapped = copy.deepcopy(st_model)
    own = dict(swapped.named_parameters())
    with torch.no_grad():
        for name, p in pretrained.named_parameters():
            if name.startswith(("adapters.", "speech.", "encoder.stacked.")):
                continue
            if name not in own or own[name].shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}")
            own[name].copy_(p)
    return swapped


def from_pretrained(pretrained: Model, conv_layers: int | None = None, adapter_spec: AdapterSpec | None = None,
                    stacked: int = 0, seed: int = 0, **overrides) -> Model:
    """ST model initialised from a text-only checkpoint; new parts get fresh weights."""
    cfg = replace(pretrained.config, **({"conv_layers": conv_layers} if conv_layers is not None else {}),
                  **overrides)
    model = build_model(cfg, pretrained.vocab, seed=seed)
    state = {k: v for k, v in pretrained.state_dict().items()
             if not k.startswith(("speech.", "adapters.", "encoder.stacked."))}
    model.load_state_dict(state, strict=False)
    if stacked:
        model.add_stacked_layers(stacked, seed=seed + 2)
    if adapter_spec is not None:
        model.add_adapter_group("main", adapter_spec, seed=seed + 1)
    return model
