"""Corpus BLEU, token-range language identification and the ablation harness."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .corpus import Vocab

logger = logging.getLogger(__name__)

MAX_ORDER = 4


def _ngram_counts(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]):
    """Matched and total n-gram counts for n = 1..4, plus hyp/ref lengths."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h = _ngram_counts(hyp, n)
            r = _ngram_counts(ref, n)
            correct[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return correct, total, hyp_len, ref_len


def bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """Corpus BLEU in [0, 100] over token ids, with exponential smoothing.

    An order with no match gets precision ``1 / (2^k * total)`` where ``k``
    counts the zero-match orders seen so far; a corpus without a single
    matching n-gram scores 0.  The brevity penalty is
    ``exp(1 - ref_len / hyp_len)`` for short output.
    """
    correct, total, hyp_len, ref_len = bleu_stats(hypotheses, references)
    if hyp_len == 0 or not any(correct):
        return 0.0
    log_sum = 0.0
    smooth = 1.0
    for n in range(MAX_ORDER):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        log_sum += math.log(p)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / MAX_ORDER)


def sentence_language(tokens: Sequence[int], vocab: Vocab) -> str | None:
    """Language owning more than half of the content tokens, else ``None``."""
    langs = [vocab.lang_of(int(t)) for t in tokens]
    langs = [lang for lang in langs if lang is not None]
    if not langs:
        return None
    lang, count = Counter(langs).most_common(1)[0]
    return lang if count * 2 > len(langs) else None


def lang_id_rate(hypotheses: Sequence[Sequence[int]], expected: str, vocab: Vocab) -> float:
    """Percentage of hypotheses classified as ``expected``; empty output counts as wrong."""
    if not hypotheses:
        raise ValueError("no hypotheses")
    hits = sum(sentence_language(h, vocab) == expected for h in hypotheses)
    return 100.0 * hits / len(hypotheses)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    cell: dict[str, Any]
    seed: int
    bleu: dict[str, float] = field(default_factory=dict)
    lang_id: dict[str, float] = field(default_factory=dict)
    speed: float | None = None            # per-utterance decode time relative to the conv=1 baseline
    decode_seconds: float | None = None   # median per-utterance wall-clock
    total_params: int = 0
    trained_params: int = 0
    error: str | None = None

    def __post_init__(self):
        for name in ("bleu", "lang_id"):
            for k, v in getattr(self, name).items():
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"{name}[{k}] = {v} outside [0, 100]")


def decode_time(models, sources, opts, repeats: int = 3) -> float:
    """Median over ``repeats`` of the median per-utterance decode wall-clock."""
    from .inference import beam_search

    runs = []
    for _ in range(repeats):
        times = []
        for src in sources:
            start = time.perf_counter()
            beam_search(models, src, opts)
            times.append(time.perf_counter() - start)
        runs.append(statistics.median(times))
    return statistics.median(runs)


def format_table(rows: Sequence[EvalReport]) -> str:
    """Aligned plain-text table, one line per (cell, seed)."""
    if not rows:
        return "(no cells)"
    axes = list(rows[0].cell)
    pairs = sorted({p for r in rows for p in r.bleu})
    header = axes + ["seed"] + [f"BLEU {p}" for p in pairs] + ["total", "trained", "speed", "error"]
    lines = []
    for r in rows:
        line = [str(r.cell.get(a)) for a in axes] + [str(r.seed)]
        line += [f"{r.bleu[p]:.2f}" if p in r.bleu else "-" for p in pairs]
        line += [str(r.total_params), str(r.trained_params),
                 f"{r.speed:.2f}x" if r.speed is not None else "-", r.error or ""]
        lines.append(line)
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
    fmt = lambda cols: "  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(l) for l in lines])


def write_report(rows: Sequence[EvalReport], jsonl_path: str | Path, table_path: str | Path | None = None) -> None:
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    if table_path:
        Path(table_path).write_text(format_table(rows) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- ablation

ABLATION_AXES = ("feature_layer", "conv_layers", "ft_layers", "adapter_dim", "adapter_placement",
                 "stacked", "mt_size")

MT_SIZES = {
    "small": {"d_model": 32, "ffn_dim": 64, "enc_layers": 3, "dec_layers": 3},
    "base": {},
}


def _cell_config(base, cell: Mapping[str, Any]):
    """RunConfig for one grid cell.

    ``ft_layers`` is an int or ``"all"``; ``adapter_placement`` is one of
    ``both``, ``encoder``, ``decoder``, ``none``; ``stacked`` > 0 switches to
    the stacked-layers plan.
    """
    from dataclasses import replace as dc_replace

    unknown = set(cell) - set(ABLATION_AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes {sorted(unknown)}")
    model = dict(base.model)
    corpus = dict(base.corpus)
    adapters = dict(base.adapters) if base.adapters is not None else {}
    freeze = dict(base.freeze)
    if "feature_layer" in cell:
        corpus["feature_layer"] = int(cell["feature_layer"])
    if "conv_layers" in cell:
        model["conv_layers"] = int(cell["conv_layers"])
    if "mt_size" in cell:
        if cell["mt_size"] not in MT_SIZES:
            raise ValueError(f"unknown mt_size {cell['mt_size']!r}")
        model.update(MT_SIZES[cell["mt_size"]])
    enc_layers = base.model_config(1).enc_layers if "mt_size" not in cell else \
        dc_replace(base, model=model).model_config(1).enc_layers
    if "ft_layers" in cell:
        k = enc_layers if cell["ft_layers"] == "all" else int(cell["ft_layers"])
        freeze = {"mode": "fine_tune_bottom", "layers": k}
        adapters.pop("skip_bottom", None)
    if cell.get("stacked"):
        freeze = {"mode": "stacked", "layers": int(cell["stacked"])}
        adapters["skip_bottom"] = 0
    if "adapter_dim" in cell:
        adapters["bottleneck_dim"] = int(cell["adapter_dim"])
    placement = cell.get("adapter_placement", "both")
    if placement not in ("both", "encoder", "decoder", "none"):
        raise ValueError(f"unknown adapter placement {placement!r}")
    adapters["encoder"] = placement in ("both", "encoder")
    adapters["decoder"] = placement in ("both", "decoder")
    if freeze.get("mode") == "fine_tune_bottom" and freeze.get("layers", 0) >= enc_layers:
        adapters["encoder"] = False
    no_adapters = placement == "none" or not (adapters["encoder"] or adapters["decoder"])
    return dc_replace(base, model=model, corpus=corpus, freeze=freeze,
                      adapters=None if no_adapters else adapters).validate()


def _mt_key(cfg) -> str:
    return json.dumps({"model": cfg.model_config(1).__dict__, "corpus": cfg.mt_corpus_spec().to_dict(),
                       "pretrain": cfg.pretrain.copy(), "profile": cfg.profile}, sort_keys=True, default=str)


def run_ablation(grid: Mapping[str, Sequence[Any]], base, seeds: Sequence[int],
                 pretrained: dict | None = None, eval_pairs: Sequence[str] | None = None,
                 speed_utterances: int = 20, speed_repeats: int = 3) -> list[EvalReport]:
    """Train and evaluate the cross product of ``grid`` for every seed.

    Pre-trained backbones are shared between cells that agree on model size
    (pass ``pretrained`` to reuse them across calls).  Speed is the median
    per-utterance decode time relative to a conv=1 copy of the same cell,
    measured with a fixed output length.  A failing cell is recorded with its
    error and the grid continues.
    """
    import itertools
    from dataclasses import replace as dc_replace

    from .corpus import generate_corpus
    from .inference import DecodeOptions, translate
    from .model import from_pretrained
    from .cli import pretrain_mt
    from .training import train

    pretrained = {} if pretrained is None else pretrained
    axes = list(grid)
    rows = []
    for values in itertools.product(*(grid[a] for a in axes)):
        cell = dict(zip(axes, values))
        for seed in seeds:
            report = EvalReport(cell=cell, seed=seed)
            try:
                cfg = dc_replace(_cell_config(base, cell), seed=seed)
                key = _mt_key(cfg)
                if key not in pretrained:
                    mt_corpus = generate_corpus(cfg.mt_corpus_spec(), cfg.seed)
                    pretrained[key] = pretrain_mt(cfg, mt_corpus, cfg.seed).final
                mt = pretrained[key]
                corpus = generate_corpus(cfg.corpus_spec(), seed)
                plan = cfg.freeze_plan()
                stacked = plan.layers if plan.mode == "stacked" else 0
                model = from_pretrained(mt, adapter_spec=cfg.adapter_spec(), stacked=stacked, seed=seed,
                                        conv_layers=cfg.model_config(1).conv_layers)
                result = train(model, plan, corpus.split("train"), corpus.split("valid"),
                               cfg.train_config(), seed)
                final = result.averaged
                test = corpus.split("test")
                pairs = list(eval_pairs or test.pairs())
                opts = cfg.decode_options()
                for pair in pairs:
                    samples = [s for s in test if s.pair == pair]
                    hyps = translate([final], samples, opts)
                    report.bleu[pair] = bleu([h.content for h in hyps], [s.target.tolist() for s in samples])
                    report.lang_id[pair] = lang_id_rate([h.content for h in hyps], pair.split("-")[1],
                                                        final.vocab)
                report.total_params = final.param_count()
                report.trained_params = final.param_count(result.trainable)
                timing = [s for s in test if s.route == "speech"][:speed_utterances]
                if timing:
                    fixed = DecodeOptions(beam=opts.beam, max_len=opts.max_len, min_len=opts.max_len)
                    report.decode_seconds = decode_time([final], timing, fixed, speed_repeats)
                    baseline = from_pretrained(mt, adapter_spec=cfg.adapter_spec(), stacked=stacked,
                                               seed=seed, conv_layers=1)
                    base_time = decode_time([baseline], timing, fixed, speed_repeats)
                    report.speed = base_time / report.decode_seconds
            except Exception as err:  # noqa: BLE001 - one bad cell must not end the grid
                logger.exception("ablation cell %s seed %d failed", cell, seed)
                report.error = f"{type(err).__name__}: {err}"
            rows.append(report)
    return rows
