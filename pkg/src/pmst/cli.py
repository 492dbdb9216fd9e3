"""``pmst`` command-line interface.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .checkpoint import digest, load_model, load_tensors, save_model, save_tensors
from .config import ConfigError, RunConfig, format_hyperparameters, load_config
from .corpus import (Corpus, contamination_rate, filter_contamination, filter_vocab, generate_corpus,
                     load_corpus, save_corpus)
from .evaluation import bleu, lang_id_rate
from .inference import DecodeOptions, Hypothesis, cascade_translate, load_ensemble, translate
from .model import FreezePlan, SourceInput, build_model, from_pretrained
from .training import INCREMENTAL_STRATEGIES, average_checkpoints, incremental_adapt, train

logger = logging.getLogger("pmst")

COMMANDS = ("gen-data", "pretrain-mt", "train", "adapt", "decode", "cascade", "evaluate", "average",
            "filter-vocab", "filter-contamination", "ablate", "show-config")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads() -> None:
    n = os.environ.get("PMST_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def source_digest() -> str:
    """Hash of the package sources, standing in for a VCS revision."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(path: Path, args: argparse.Namespace, cfg: RunConfig | None, extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "argv": [str(a) for a in args.argv],
        "config_hash": cfg.digest() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "version": source_digest(),
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _config(args) -> RunConfig:
    cfg = load_config(args.config, getattr(args, "profile", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _samples(corpus: Corpus, split: str | None, pairs: Sequence[str] | None):
    if split:
        corpus = corpus.split(split)
    if pairs:
        corpus = corpus.select(pairs=pairs)
    return corpus


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = cfg.mt_corpus_spec() if args.mt else cfg.corpus_spec()
    corpus = generate_corpus(spec, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    write_manifest(_manifest_path(out), args, cfg, {"samples": len(corpus)})
    print(f"wrote {len(corpus)} samples to {out}")
    return 0


def _load_or_generate(args, cfg: RunConfig, mt: bool) -> Corpus:
    if args.data:
        return load_corpus(args.data)
    return generate_corpus(cfg.mt_corpus_spec() if mt else cfg.corpus_spec(), cfg.seed)


def _write_run(out: Path, result, args, cfg) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict(), "step": result.state.step, "metric_log": result.state.log}
    save_model(out / "final.ckpt", result.final, meta)
    save_model(out / "averaged.ckpt", result.averaged, meta)
    save_model(out / "best.ckpt", result.best, meta)
    write_manifest(out / "manifest.json", args, cfg,
                   {"best_metric": result.state.best_metric, "best_step": result.state.best_step,
                    "trained_params": result.final.param_count(result.trainable)})


def pretrain_mt(cfg: RunConfig, corpus: Corpus, seed: int, log_path=None):
    """Train the whole text-only model; its checkpoint is the frozen backbone for ST."""
    model = build_model(cfg.model_config(corpus.vocab.size), corpus.vocab, seed=seed)
    return train(model, FreezePlan.full(), corpus.split("train"), corpus.split("valid"),
                 cfg.pretrain_config(), seed, log_path=log_path)


def cmd_pretrain_mt(args) -> int:
    cfg = _config(args)
    corpus = _load_or_generate(args, cfg, mt=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain_mt(cfg, corpus, cfg.seed, out / "train.log")
    _write_run(out, result, args, cfg)
    print(f"best valid BLEU {result.state.best_metric:.2f} at update {result.state.best_step}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = _load_or_generate(args, cfg, mt=False)
    pretrained, _ = load_model(args.pretrained)
    plan = cfg.freeze_plan()
    stacked = plan.layers if plan.mode == "stacked" else 0
    model = from_pretrained(pretrained, adapter_spec=cfg.adapter_spec(), stacked=stacked, seed=cfg.seed,
                            **cfg.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, plan, corpus.split("train"), corpus.split("valid"), cfg.train_config(), cfg.seed,
                   log_path=out / "train.log")
    _write_run(out, result, args, cfg)
    print(f"best valid BLEU {result.state.best_metric:.2f} at update {result.state.best_step}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    corpus = _load_or_generate(args, cfg, mt=False)
    if args.pairs:
        corpus = corpus.select(pairs=args.pairs)
    base, _ = load_model(args.base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = incremental_adapt(base, corpus.split("train"), corpus.split("valid"), args.strategy,
                               cfg.train_config(), cfg.seed, log_path=out / "train.log")
    _write_run(out, result, args, cfg)
    print(f"best valid BLEU {result.state.best_metric:.2f} at update {result.state.best_step}")
    return 0


def _decode_opts(args, cfg: RunConfig) -> DecodeOptions:
    opts = cfg.decode_options()
    updates = {}
    if args.beam is not None:
        updates["beam"] = args.beam
    if args.max_len is not None:
        updates["max_len"] = args.max_len
    if args.no_enc_adapters:
        updates["enc_adapters"] = False
    if args.no_dec_adapters:
        updates["dec_adapters"] = False
    if getattr(args, "tgt_lang", None):
        updates["tgt_lang"] = args.tgt_lang
    return replace(opts, **updates)


def _write_hyps(path: Path, samples, hyps: Sequence[Hypothesis]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s, h in zip(samples, hyps):
            fh.write(json.dumps({"utterance_id": s.utterance_id, "tokens": h.content, "score": h.score,
                                 "flags": ["max_len"] if h.forced else []}) + "\n")


def cmd_decode(args) -> int:
    cfg = _config(args)
    paths = [p for p in (args.ensemble.split(",") if args.ensemble else [args.ckpt]) if p]
    if not paths:
        raise UsageError("decode needs --ckpt or --ensemble")
    models = load_ensemble(paths)
    corpus = _samples(load_corpus(args.data), args.split, args.pairs)
    samples = list(corpus)
    if args.route == "text":
        world = corpus.world
        # the transcript: the reference's concepts rendered in the source language
        samples = [replace(s, source=world.render(s.src_lang, world.read(s.tgt_lang, s.target)))
                   if s.route == "speech" else s for s in samples]
    hyps = translate(models, samples, _decode_opts(args, cfg))
    out = Path(args.out)
    _write_hyps(out, samples, hyps)
    write_manifest(_manifest_path(out), args, cfg, {"checkpoints": paths})
    print(f"decoded {len(hyps)} inputs to {out}")
    return 0


def cmd_cascade(args) -> int:
    cfg = _config(args)
    st, _ = load_model(args.st)
    mt, _ = load_model(args.mt)
    corpus = _samples(load_corpus(args.data), args.split, args.pairs)
    samples = [s for s in corpus if s.route == "speech"]
    opts = _decode_opts(args, cfg)
    hyps = [cascade_translate(st, mt, SourceInput.from_sample(s), args.pivot, args.final, opts) for s in samples]
    out = Path(args.out)
    _write_hyps(out, samples, hyps)
    write_manifest(_manifest_path(out), args, cfg)
    print(f"cascaded {len(hyps)} utterances to {out}")
    return 0


def cmd_evaluate(args) -> int:
    corpus = load_corpus(args.data)
    refs = {s.utterance_id: s for s in corpus}
    by_pair: dict[str, tuple[list, list]] = {}
    with open(args.hyps, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            s = refs[rec["utterance_id"]]
            key = f"{s.src_lang}-{args.tgt_lang or s.tgt_lang}"
            hyps, gold = by_pair.setdefault(key, ([], []))
            hyps.append(rec["tokens"])
            gold.append(s.target.tolist())
    rows = []
    for pair, (hyps, gold) in sorted(by_pair.items()):
        tgt = pair.split("-")[1]
        rows.append({"pair": pair, "sentences": len(hyps), "bleu": bleu(hyps, gold),
                     "lang_id": lang_id_rate(hyps, tgt, corpus.vocab)})
    for row in rows:
        print(f"{row['pair']:<8} n={row['sentences']:<5} BLEU {row['bleu']:6.2f}  lang-id {row['lang_id']:6.2f}%")
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return 0


def cmd_average(args) -> int:
    loaded = [load_tensors(p) for p in args.inputs]
    averaged = average_checkpoints([t for t, _ in loaded])
    meta = dict(loaded[0][1])
    meta["averaged_from"] = [str(p) for p in args.inputs]
    save_tensors(args.out, averaged, meta)
    print(f"averaged {len(loaded)} checkpoints into {args.out}")
    return 0


def cmd_filter_vocab(args) -> int:
    model, meta = load_model(args.ckpt)
    vocab, filtered, remap = filter_vocab(model.vocab, model, args.langs)
    save_model(args.out, filtered, {**{k: v for k, v in meta.items() if k != "model"},
                                   "vocab_filter": args.langs, "remap": remap.tolist()})
    print(f"kept {vocab.size} of {model.vocab.size} ids "
          f"({model.param_count()} -> {filtered.param_count()} parameters)")
    return 0


def cmd_filter_contamination(args) -> int:
    train_corpus = load_corpus(args.data)
    held = [load_corpus(p) for p in args.held]
    if args.held_split:
        held = [h.split(s) for h in held for s in args.held_split]
    rate = contamination_rate(train_corpus, held)
    cleaned = filter_contamination(train_corpus, held)
    save_corpus(cleaned, args.out)
    print(f"contamination {100 * rate:.2f}%: kept {len(cleaned)} of {len(train_corpus)} samples")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import format_table, run_ablation, write_report

    cfg = _config(args)
    grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    seeds = args.seeds or [cfg.seed]
    rows = run_ablation(grid, cfg, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(rows, out / "ablation.jsonl", out / "ablation.txt")
    write_manifest(out / "manifest.json", args, cfg, {"grid": grid, "seeds": seeds})
    print(format_table(rows))
    return 0


def cmd_show_config(args) -> int:
    cfg = _config(args)
    print(format_hyperparameters(cfg))
    if args.json:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmst", description="Parameter-efficient multilingual speech translation toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    def with_config(p):
        p.add_argument("--config", help="run config (*.cfg, JSON); defaults to the chosen profile")
        p.add_argument("--profile", choices=("toy", "desk", "paper"), help="override the config profile")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    def with_decode(p):
        p.add_argument("--beam", type=int, help="beam size (config default 5)")
        p.add_argument("--max-len", type=int, help="maximum generated tokens")
        p.add_argument("--no-enc-adapters", action="store_true", help="disable encoder adapters")
        p.add_argument("--no-dec-adapters", action="store_true", help="disable decoder adapters")
        p.add_argument("--split", default="test", help="corpus split to decode (default: test)")
        p.add_argument("--pairs", nargs="*", help="restrict to these src-tgt pairs")
        return p

    p = with_config(add("gen-data", cmd_gen_data, "generate a synthetic corpus"))
    p.add_argument("--mt", action="store_true", help="text-only all-directions corpus for pre-training")
    p.add_argument("--out", required=True, help="output corpus file (*.jsonl)")

    p = with_config(add("pretrain-mt", cmd_pretrain_mt, "pre-train the text translation backbone"))
    p.add_argument("--data", help="text corpus (generated from the config if omitted)")
    p.add_argument("--out", required=True, help="output run directory")

    p = with_config(add("train", cmd_train, "train a speech translation model on a frozen backbone"))
    p.add_argument("--pretrained", required=True, help="pre-trained MT checkpoint")
    p.add_argument("--data", help="speech corpus (generated from the config if omitted)")
    p.add_argument("--out", required=True, help="output run directory")

    p = with_config(add("adapt", cmd_adapt, "add a new language pair by adapter-only training"))
    p.add_argument("--base", required=True, help="trained ST checkpoint")
    p.add_argument("--data", help="corpus holding the new pair")
    p.add_argument("--pairs", nargs="*", help="pairs of --data to train on")
    p.add_argument("--strategy", required=True, choices=sorted(INCREMENTAL_STRATEGIES))
    p.add_argument("--out", required=True, help="output run directory")

    p = with_decode(with_config(add("decode", cmd_decode, "beam-search decode a corpus split")))
    p.add_argument("--ckpt", help="model checkpoint")
    p.add_argument("--ensemble", help="comma-separated checkpoints decoded as an ensemble")
    p.add_argument("--data", required=True, help="corpus file")
    p.add_argument("--route", choices=("speech", "text"), default="speech",
                   help="text: feed the source transcript instead of speech")
    p.add_argument("--tgt-lang", help="force this target language (zero-shot decoding)")
    p.add_argument("--out", required=True, help="output hypotheses (*.jsonl)")

    p = with_decode(with_config(add("cascade", cmd_cascade, "speech->pivot->final cascade")))
    p.add_argument("--st", required=True, help="speech translation checkpoint")
    p.add_argument("--mt", required=True, help="text translation checkpoint (adapters disabled)")
    p.add_argument("--data", required=True)
    p.add_argument("--pivot", required=True)
    p.add_argument("--final", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score hypotheses: BLEU and language-ID rate")
    p.add_argument("--hyps", required=True)
    p.add_argument("--data", required=True, help="corpus with references")
    p.add_argument("--tgt-lang", help="expected output language (zero-shot evaluation)")
    p.add_argument("--out", help="report file (*.jsonl)")

    p = add("average", cmd_average, "average checkpoints element-wise")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("filter-vocab", cmd_filter_vocab, "restrict a model's vocabulary to some languages")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--langs", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("filter-contamination", cmd_filter_contamination, "drop training utterances seen in held-out sets")
    p.add_argument("--data", required=True, help="training corpus")
    p.add_argument("--held", nargs="+", required=True, help="held-out corpora")
    p.add_argument("--held-split", nargs="*", help="only these splits of the held-out corpora")
    p.add_argument("--out", required=True)

    p = with_config(add("ablate", cmd_ablate, "train and evaluate every cell of an ablation grid"))
    p.add_argument("--grid", required=True, help="JSON object mapping axis -> list of values")
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--out", required=True, help="output directory")

    p = with_config(add("show-config", cmd_show_config, "print resolved hyper-parameters"))
    p.add_argument("--json", action="store_true", help="also print the full config tree")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    _threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"pmst {args.command}: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - any runtime failure maps to exit 2
        logger.debug("failure", exc_info=True)
        print(f"pmst {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


cli_dispatch = main

if __name__ == "__main__":
    sys.exit(main())
