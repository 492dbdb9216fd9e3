"""Learning-rate schedule, early stopping, the multilingual training loop,
checkpoint averaging and incremental adapter training."""

from __future__ import annotations

import collections
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import torch

from .corpus import Corpus, SPEECH, make_batches
from .evaluation import bleu
from .inference import DecodeOptions, translate
from .model import AdapterSpec, FreezePlan, Model, apply_freeze_plan, collate_sources, collate_targets
from .tensor import label_smoothed_nll, seed_everything

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_updates: int = 20_000
    update_freq: int = 2
    lr_max: float = 5e-4
    lr_init: float = 1e-7
    warmup: int = 1_000
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float | None = None
    label_smoothing: float = 0.2
    validate_every: int = 250
    patience: int = 5
    avg_last: int = 3
    early_stop_pairs: list[str] | None = None   # None: every pair in the valid set
    temperature: float = 3.0
    max_source_features: int = 4_000
    valid_beam: int = 1
    valid_max_len: int = 32

    def __post_init__(self):
        if self.warmup < 1 or self.patience < 1 or self.avg_last < 1:
            raise ValueError("warmup, patience and avg_last must be >= 1")
        if self.update_freq < 1 or self.validate_every < 1:
            raise ValueError("update_freq and validate_every must be >= 1")
        self.betas = tuple(self.betas)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``lr_init`` to ``lr_max``, then inverse-sqrt decay."""
    if step <= cfg.warmup:
        return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * step / cfg.warmup
    return cfg.lr_max * math.sqrt(cfg.warmup / step)


@dataclass
class TrainState:
    patience: int
    avg_last: int = 3
    step: int = 0
    best_metric: float = float("-inf")
    best_step: int | None = None
    patience_counter: int = 0
    validations: int = 0
    ring: collections.deque = field(default_factory=collections.deque, repr=False)
    log: list[dict] = field(default_factory=list)

    def update(self, step: int, metric: float) -> bool:
        """Record one validation result; True when training should stop.

        Only a strict improvement resets patience, so ties keep the earliest
        best step.
        """
        self.step = step
        self.validations += 1
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_step = step
            self.patience_counter = 0
        else:
            self.patience_counter += 1
        return self.patience_counter >= self.patience

    def push(self, snapshot: dict[str, torch.Tensor]) -> None:
        self.ring.append(snapshot)
        while len(self.ring) > self.avg_last:
            self.ring.popleft()


def average_checkpoints(checkpoints: Sequence[Mapping[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Element-wise mean of identically named and shaped tensors."""
    if not checkpoints:
        raise ValueError("nothing to average")
    names = list(checkpoints[0])
    for ckpt in checkpoints[1:]:
        if set(ckpt) != set(names):
            raise ValueError(f"mismatched parameter names: {sorted(set(ckpt) ^ set(names))}")
    out = {}
    for name in names:
        tensors = [c[name] for c in checkpoints]
        if any(t.shape != tensors[0].shape for t in tensors):
            raise ValueError(f"mismatched shapes for {name}")
        if len(tensors) == 1:
            out[name] = tensors[0].clone()
            continue
        total = tensors[0].clone().to(torch.float64)
        for t in tensors[1:]:
            total += t
        out[name] = total / len(tensors)
    return out


def validate(model: Model, valid: Corpus, pairs: Sequence[str], beam: int = 1,
             max_len: int = 32, **toggles) -> dict[str, float]:
    """Corpus BLEU per pair on ``valid``."""
    out = {}
    opts = DecodeOptions(beam=beam, max_len=max_len, **toggles)
    for pair in pairs:
        samples = [s for s in valid if s.pair == pair]
        if not samples:
            raise TrainingError(f"no validation data for pair {pair}")
        hyps = translate([model], samples, opts)
        out[pair] = bleu([h.content for h in hyps], [s.target.tolist() for s in samples])
    return out


@dataclass
class TrainResult:
    final: Model
    averaged: Model
    best: Model
    state: TrainState
    trainable: set[str]


def _batch_loss(model: Model, samples, epsilon: float):
    """Summed loss and token count, one forward per route present."""
    total, ntok = None, 0
    for route in (SPEECH, "text"):
        group = [s for s in samples if s.route == route]
        if not group:
            continue
        src = collate_sources(group, model.vocab)
        prev, gold = collate_targets(group, model.vocab)
        loss, n = label_smoothed_nll(model(src, prev), gold, epsilon)
        total = loss if total is None else total + loss
        ntok += n
    return total, ntok


def accumulate_gradients(model: Model, batches: Sequence[Sequence], epsilon: float) -> float:
    """Backpropagate several batches as one: loss summed, divided by all their tokens."""
    ntokens = sum(len(s.target) + 1 for b in batches for s in b)
    logged = 0.0
    for samples in batches:
        loss, _ = _batch_loss(model, samples, epsilon)
        loss = loss / ntokens
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.detach().item()} on pairs {sorted({s.pair for s in samples})}")
        loss.backward()
        logged += loss.detach().item()
    return logged


def train(model: Model, plan: FreezePlan, train_corpus: Corpus, valid_corpus: Corpus, cfg: TrainConfig,
          seed: int = 0, log_path: str | Path | None = None,
          on_validate: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place under ``plan``.

    One update accumulates ``update_freq`` batches, with the loss averaged over
    all their non-pad target tokens.  Every ``validate_every`` updates the mean
    BLEU over ``early_stop_pairs`` drives early stopping, and the trainable
    tensors are pushed to a ring of the last ``avg_last`` validations.
    """
    trainable = apply_freeze_plan(model, plan)
    if not trainable:
        raise TrainingError("freeze plan leaves nothing to train")
    seed_everything(seed)
    params = [p for n, p in model.named_parameters() if n in trainable]
    names = [n for n, _ in model.named_parameters() if n in trainable]
    opt = torch.optim.Adam(params, lr=cfg.lr_init, betas=cfg.betas, weight_decay=cfg.weight_decay)
    batches = make_batches(train_corpus, cfg.temperature, cfg.max_source_features, seed)
    pairs = cfg.early_stop_pairs or valid_corpus.pairs()
    state = TrainState(cfg.patience, cfg.avg_last)
    best_snapshot = None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        model.train()
        for step in range(1, cfg.max_updates + 1):
            group = [next(batches) for _ in range(cfg.update_freq)]
            lr = lr_at(step - 1, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                logged = accumulate_gradients(model, [b.samples for b in group], cfg.label_smoothing)
            except TrainingError as err:
                raise TrainingError(f"{err} at update {step} (lr {lr:.3g})") from None
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            opt.zero_grad(set_to_none=True)

            if step % cfg.validate_every == 0 or step == cfg.max_updates:
                scores = validate(model, valid_corpus, pairs, cfg.valid_beam, cfg.valid_max_len)
                metric = sum(scores.values()) / len(scores)
                stop = state.update(step, metric)
                snapshot = {n: p.detach().clone() for n, p in zip(names, params)}
                state.push(snapshot)
                if state.best_step == step:
                    best_snapshot = snapshot
                record = {"step": step, "bleu": scores, "mean": metric, "lr": lr,
                          "loss": logged, "patience": state.patience_counter}
                state.log.append(record)
                logger.info("update %d  loss %.4f  valid %s  mean %.2f  patience %d",
                            step, logged, {k: round(v, 2) for k, v in scores.items()}, metric,
                            state.patience_counter)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if on_validate:
                    on_validate(record)
                model.train()
                if stop:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    averaged = _with_params(model, average_checkpoints(list(state.ring)) if state.ring else {})
    best = _with_params(model, best_snapshot or {})
    return TrainResult(model, averaged, best, state, trainable)


def _with_params(model: Model, params: Mapping[str, torch.Tensor]) -> Model:
    out = copy.deepcopy(model)
    own = dict(out.named_parameters())
    with torch.no_grad():
        for name, value in params.items():
            own[name].copy_(value)
    out.eval()
    return out


# ---------------------------------------------------------------- incremental

INCREMENTAL_STRATEGIES = {
    # name: (new adapter dim, train existing adapters, train conv)
    "adapters64_all": (64, True, False),
    "adapters256_all": (256, True, False),
    "adapters256_bottom": (256, False, False),
    "conv_adapters256_bottom": (256, False, True),
}


def bottom_layers_without_adapters(model: Model) -> list[int]:
    covered = {int(i) for g in model.adapters.values() for i in g.enc}
    return [i for i in range(model.config.enc_layers) if i not in covered]


def prepare_incremental(base: Model, strategy: str, languages: Sequence[str], seed: int = 0,
                        group: str = "incr") -> tuple[Model, FreezePlan]:
    """Copy ``base``, add the new-language adapters and return the matching plan."""
    if strategy not in INCREMENTAL_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {sorted(INCREMENTAL_STRATEGIES)}")
    dim, train_existing, train_conv = INCREMENTAL_STRATEGIES[strategy]
    if train_existing and not base.adapters:
        raise ValueError(f"strategy {strategy} trains existing adapters but the base model has none")
    bottom = bottom_layers_without_adapters(base)
    if not bottom:
        raise ValueError("base model has no adapter-free bottom encoder layers")
    model = copy.deepcopy(base)
    model.add_adapter_group(group, AdapterSpec(dim, encoder=True, decoder=False, enc_layers=tuple(bottom)),
                            languages, seed=seed)
    groups = tuple(model.adapters) if train_existing else (group,)
    return model, FreezePlan.adapters_only(groups, train_conv=train_conv)


def incremental_adapt(base: Model, train_corpus: Corpus, valid_corpus: Corpus, strategy: str,
                      cfg: TrainConfig, seed: int = 0, **kwargs) -> TrainResult:
    """Add a new language pair to a trained model by training adapters only.

    The new adapters are scoped to the new source languages; checkpoint
    averaging is disabled, so ``result.averaged`` is the last checkpoint.
    """
    languages = sorted({s.src_lang for s in train_corpus})
    model, plan = prepare_incremental(base, strategy, languages, seed)
    return train(model, plan, train_corpus, valid_corpus, replace(cfg, avg_last=1), seed, **kwargs)
