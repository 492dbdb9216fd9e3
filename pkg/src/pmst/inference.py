"""Beam search, batched greedy decoding, ensembling and the ST -> MT cascade."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import load_model
from .corpus import BOS, EOS, PAD, SPEECH, TEXT, Sample, Vocab, VocabError
from .model import EncoderInput, Model, SourceInput, collate_sources


class DecodeError(RuntimeError):
    pass


@dataclass
class Hypothesis:
    tokens: list[int]          # target-language tag, generated tokens, eos
    logprob: float
    score: float               # logprob / number of generated tokens (eos included)
    forced: bool = False       # eos appended because max_len was reached

    @property
    def content(self) -> list[int]:
        """Generated tokens without the leading tag and the trailing eos."""
        end = len(self.tokens) - 1 if self.tokens[-1] == EOS else len(self.tokens)
        return self.tokens[1:end]


@dataclass
class DecodeOptions:
    beam: int = 5
    max_len: int = 32
    min_len: int = 1
    enc_adapters: bool = True
    dec_adapters: bool = True
    tgt_lang: str | None = None   # overrides the input's target language
    nbest: int = 1

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.max_len < 1 or self.min_len > self.max_len:
            raise ValueError("need 1 <= max_len and min_len <= max_len")


def _check_members(models: Sequence[Model]) -> Vocab:
    if not models:
        raise DecodeError("no models to decode with")
    vocab = models[0].vocab
    for m in models[1:]:
        if m.vocab != vocab:
            raise VocabError("ensemble members have incompatible vocabularies")
    return vocab


def _banned(vocab: Vocab) -> torch.Tensor:
    mask = torch.zeros(vocab.size, dtype=torch.bool)
    mask[[PAD, BOS] + vocab.tag_ids] = True
    return mask


def _as_input(source: SourceInput | Sample, opts: DecodeOptions) -> SourceInput:
    src = source if isinstance(source, SourceInput) else SourceInput.from_sample(source)
    if opts.tgt_lang is not None:
        src = replace(src, tgt_lang=opts.tgt_lang)
    return src


class _Scorer:
    """Mean of member log-probabilities for the next token of each prefix."""

    def __init__(self, models: Sequence[Model], batch: EncoderInput, opts: DecodeOptions):
        self.models = models
        self.opts = opts
        self.src_langs = batch.src_langs
        with torch.no_grad():
            self.memory = [m.encode(batch, opts.enc_adapters) for m in models]

    def __call__(self, prefixes: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
        langs = [self.src_langs[int(i)] for i in rows]
        members = []
        with torch.no_grad():
            for model, (mem, pad) in zip(self.models, self.memory):
                logits = model.decode(prefixes, mem[rows], pad[rows], langs, self.opts.dec_adapters)
                members.append(torch.log_softmax(logits[:, -1], dim=-1))
        if len(members) == 1:
            return members[0]
        # offsets from the elementwise minimum, summed in sorted order: exact for
        # identical members and independent of member order
        stack = torch.stack(members)
        ref = stack.min(dim=0).values
        offsets = (stack - ref).sort(dim=0).values
        mean = ref + offsets.sum(dim=0) / len(members)
        return torch.where(torch.isneginf(ref), ref, mean)


def _eval_mode(models: Sequence[Model]):
    states = [m.training for m in models]
    for m in models:
        m.eval()
    return states


def _restore(models, states):
    for m, s in zip(models, states):
        m.train(s)


def beam_search_nbest(models: Sequence[Model], source: SourceInput | Sample,
                      opts: DecodeOptions | None = None) -> list[Hypothesis]:
    """Completed hypotheses, best normalized score first.

    Each step ranks all expansions of the live hypotheses by cumulative
    log-probability; eos expansions within the top ``beam`` are completed, the
    best ``beam`` others stay live.  Search ends when ``beam`` hypotheses are
    complete or ``max_len`` tokens have been generated, in which case eos is
    forced on every live hypothesis.
    """
    opts = opts or DecodeOptions()
    models = list(models)
    vocab = _check_members(models)
    src = _as_input(source, opts)
    states = _eval_mode(models)
    try:
        scorer = _Scorer(models, collate_sources([src], vocab), opts)
        banned = _banned(vocab)
        live: list[tuple[list[int], float]] = [([vocab.tag(src.tgt_lang)], 0.0)]
        done: list[Hypothesis] = []
        for step in range(1, opts.max_len + 1):
            prefixes = torch.tensor([toks for toks, _ in live])
            lprobs = scorer(prefixes, torch.zeros(len(live), dtype=torch.long)).clone()
            lprobs[:, banned] = float("-inf")
            if step < opts.min_len:
                lprobs[:, EOS] = float("-inf")
            if step == opts.max_len:
                keep = lprobs[:, EOS].clone()
                lprobs[:] = float("-inf")
                lprobs[:, EOS] = keep
            totals = torch.tensor([s for _, s in live], dtype=torch.float64).unsqueeze(1) + lprobs
            flat = totals.view(-1)
            finite = int(torch.isfinite(flat).sum())
            k = min(2 * opts.beam, finite)
            order = _topk_stable(flat, k)
            new_live = []
            for rank, idx in enumerate(order):
                h, tok = divmod(int(idx), vocab.size)
                total = float(flat[idx])
                toks = live[h][0] + [tok]
                if tok == EOS:
                    if rank < opts.beam:
                        n = len(toks) - 1
                        done.append(Hypothesis(toks, total, total / n, forced=step == opts.max_len))
                elif len(new_live) < opts.beam:
                    new_live.append((toks, total))
            live = new_live
            if len(done) >= opts.beam or not live:
                break
        if not done:
            raise DecodeError("beam search produced no hypothesis")
        done.sort(key=lambda h: -h.score)
        return done
    finally:
        _restore(models, states)


def _topk_stable(flat: torch.Tensor, k: int) -> list[int]:
    # ties keep (hypothesis, token) index order
    _, idx = torch.sort(flat, descending=True, stable=True)
    return idx[:k].tolist()


def beam_search(models: Sequence[Model], source: SourceInput | Sample,
                opts: DecodeOptions | None = None) -> Hypothesis:
    return beam_search_nbest(models, source, opts)[0]


def greedy_decode(models: Sequence[Model], sources: Sequence[SourceInput | Sample],
                  opts: DecodeOptions | None = None) -> list[Hypothesis]:
    """Batched argmax decoding (same-route inputs); ties go to the lowest token id."""
    opts = opts or DecodeOptions(beam=1)
    models = list(models)
    vocab = _check_members(models)
    srcs = [_as_input(s, opts) for s in sources]
    states = _eval_mode(models)
    try:
        batch = collate_sources(srcs, vocab)
        scorer = _Scorer(models, batch, opts)
        banned = _banned(vocab)
        B = len(srcs)
        prefixes = torch.tensor([[vocab.tag(s.tgt_lang)] for s in srcs])
        logprob = torch.zeros(B, dtype=torch.float64)
        finished = torch.zeros(B, dtype=torch.bool)
        length = torch.zeros(B, dtype=torch.long)
        rows = torch.arange(B)
        for step in range(1, opts.max_len + 1):
            lp = scorer(prefixes, rows).clone()
            lp[:, banned] = float("-inf")
            if step < opts.min_len:
                lp[:, EOS] = float("-inf")
            if step == opts.max_len:
                keep = lp[:, EOS].clone()
                lp[:] = float("-inf")
                lp[:, EOS] = keep
            best_lp, best = lp.max(dim=-1)
            best = torch.where(finished, torch.full_like(best, PAD), best)
            logprob = logprob + torch.where(finished, torch.zeros_like(best_lp), best_lp)
            length = length + (~finished).long()
            prefixes = torch.cat([prefixes, best.unsqueeze(1)], dim=1)
            finished = finished | (best == EOS)
            if bool(finished.all()):
                break
        hyps = []
        for i in range(B):
            toks = [t for t in prefixes[i].tolist()]
            toks = toks[: int(length[i]) + 1]
            lp_i = float(logprob[i])
            forced = int(length[i]) == opts.max_len
            hyps.append(Hypothesis(toks, lp_i, lp_i / int(length[i]), forced))
        return hyps
    finally:
        _restore(models, states)


def translate(models: Sequence[Model], sources: Sequence[SourceInput | Sample],
              opts: DecodeOptions | None = None, batch_size: int = 64) -> list[Hypothesis]:
    """Decode many inputs; beam 1 runs batched greedy search per route."""
    opts = opts or DecodeOptions()
    if opts.beam > 1:
        return [beam_search(models, s, opts) for s in sources]
    out: list[Hypothesis | None] = [None] * len(sources)
    by_route: dict[str, list[int]] = {}
    for i, s in enumerate(sources):
        by_route.setdefault(s.route, []).append(i)
    for idx in by_route.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            for i, h in zip(chunk, greedy_decode(models, [sources[j] for j in chunk], opts)):
                out[i] = h
    return out


def load_ensemble(paths: Sequence[str | Path]) -> list[Model]:
    if not paths:
        raise DecodeError("need at least one checkpoint")
    models = [load_model(p)[0] for p in paths]
    _check_members(models)
    return models


def decode_ensemble(paths: Sequence[str | Path], inputs: Sequence[SourceInput | Sample],
                    opts: DecodeOptions | None = None) -> list[Hypothesis]:
    return translate(load_ensemble(paths), inputs, opts)


class CascadeError(DecodeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def cascade_translate(st_model: Model, mt_model: Model, speech: SourceInput, pivot: str, final: str,
                      opts: DecodeOptions | None = None) -> Hypothesis:
    """Speech -> pivot text with ``st_model``, then pivot -> final text with adapters off."""
    opts = opts or DecodeOptions()
    if speech.route != SPEECH:
        raise ValueError("cascade input must be speech")
    for lang in (pivot, final):
        st_model.vocab.tag(lang)
        mt_model.vocab.tag(lang)
    first = beam_search([st_model], replace(speech, tgt_lang=pivot), replace(opts, tgt_lang=None))
    if not first.content:
        raise CascadeError("speech->pivot", "empty intermediate translation")
    text = SourceInput(TEXT, torch.tensor(first.content).numpy(), pivot, final)
    second = beam_search([mt_model], text, replace(opts, tgt_lang=None, enc_adapters=False, dec_adapters=False))
    if not second.content:
        raise CascadeError("pivot->final", "empty final translation")
    return second
