import logging
import re

import pytest

from pmst.checkpoint import digest, load_model, save_model
from pmst.corpus import CorpusSpec, PairSpec, generate_corpus
from pmst.model import FreezePlan, ModelConfig, build_model
from pmst.training import TrainConfig, train

# Desk-scale world shared by the acceptance experiments.
LANGS = ["a", "b", "c", "x", "y"]
TOKENS = 30
MT_SPEC = CorpusSpec(LANGS, [PairSpec(s, t, "MT", 2000, 50, 200) for s in LANGS for t in LANGS],
                     tokens_per_lang=TOKENS, ratio=4, min_len=3, max_len=7)
MT_MODEL = dict(d_model=32, ffn_dim=128, enc_layers=3, dec_layers=3, heads=4, dropout=0.1, attention_dropout=0.0)
MT_TRAIN = TrainConfig(max_updates=2000, warmup=300, lr_max=2e-3, validate_every=250, max_source_features=400,
                       early_stop_pairs=["a-x", "b-y", "c-c", "y-a"], patience=100)


@pytest.fixture(scope="session")
def desk_mt(request):
    """Text-only model pretrained on every pair of the desk world (cached between runs)."""
    key = digest({"spec": MT_SPEC.to_dict(), "model": MT_MODEL, "train": MT_TRAIN.__dict__})[:16]
    path = request.config.cache.mkdir("pmst") / f"mt-{key}.ckpt"
    if path.exists():
        return load_model(path)[0]
    corpus = generate_corpus(MT_SPEC, 0)
    model = build_model(ModelConfig(vocab_size=corpus.vocab.size, **MT_MODEL), corpus.vocab, seed=0)
    result = train(model, FreezePlan.full(), corpus.split("train"), corpus.split("valid"), MT_TRAIN, seed=0)
    logging.getLogger(__name__).info("pretrained desk MT: best %.2f", result.state.best_metric)
    save_model(path, result.final)
    return result.final


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if not m or rep.when not in ("call", "setup") or (outcome == "passed" and rep.when != "call"):
                continue
            props = dict(rep.user_properties)
            status = "PASS" if outcome == "passed" else "FAIL"
            lines.append((int(m.group(1)), f"criterion {int(m.group(1)):2d}  {status}  "
                                            f"{props.get('title', '')}  {props.get('detail', '')}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
