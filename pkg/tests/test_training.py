import json
import math
import random

import pytest
import torch

from pmst import training
from pmst.corpus import CorpusSpec, PairSpec, generate_corpus
from pmst.model import AdapterSpec, FreezePlan, ModelConfig, build_model
from pmst.tensor import DTYPE
from pmst.training import (INCREMENTAL_STRATEGIES, TrainConfig, TrainState, TrainingError, accumulate_gradients,
                           average_checkpoints, lr_at, prepare_incremental, train)


def tiny_setup(seed=0, n=12):
    spec = CorpusSpec(["a", "x"], [PairSpec("a", "x", "ST", n, 4, 0), PairSpec("a", "x", "MT", n, 4, 0)],
                      tokens_per_lang=8, feature_dim=4, ratio=2, min_len=2, max_len=4)
    corpus = generate_corpus(spec, seed)
    cfg = ModelConfig(vocab_size=corpus.vocab.size, enc_layers=1, dec_layers=1, d_model=8, ffn_dim=16,
                      heads=2, conv_channels=4, feature_dim=4, dropout=0.0, attention_dropout=0.0)
    return corpus, cfg


def quick_cfg(**kw):
    base = dict(max_updates=6, warmup=2, lr_max=1e-2, validate_every=2, max_source_features=40,
                update_freq=1, valid_max_len=6)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule


def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-7
    assert lr_at(cfg.warmup, cfg) == 5e-4
    assert lr_at(40_000, TrainConfig(warmup=10_000)) == pytest.approx(2.5e-4, rel=1e-12)


def test_lr_continuous_at_warmup():
    cfg = TrainConfig(warmup=100)
    assert lr_at(100, cfg) == pytest.approx(lr_at(100 + 1e-9, cfg), rel=1e-9)
    assert lr_at(50, cfg) < lr_at(100, cfg) > lr_at(101, cfg)


def test_config_invariants():
    for bad in (dict(warmup=0), dict(patience=0), dict(avg_last=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- early stopping


def reference_stop(metrics, patience):
    """Index of the stopping validation (or None) and of the best one."""
    best, best_i, waited = -math.inf, None, 0
    for i, m in enumerate(metrics):
        if m > best:
            best, best_i, waited = m, i, 0
        else:
            waited += 1
            if waited >= patience:
                return i, best_i
    return None, best_i


def test_stop_example_sequence():
    state = TrainState(patience=5)
    stops = [state.update(i + 1, m) for i, m in enumerate([10, 11, 11, 11, 11, 11, 11])]
    assert stops == [False] * 6 + [True]
    assert state.best_step == 2 and state.best_metric == 11


def test_state_machine_matches_reference():
    rng = random.Random(0)
    for _ in range(100):
        metrics = [rng.choice([rng.random() * 10, 5.0]) for _ in range(rng.randint(1, 30))]
        stop_i, best_i = reference_stop(metrics, 5)
        state = TrainState(patience=5)
        got = None
        for i, m in enumerate(metrics):
            if state.update(i, m):
                got = i
                break
        assert got == stop_i and state.best_step == best_i


def scripted_run(monkeypatch, metrics, validate_every=1, patience=5, avg_last=3):
    """Run the real loop with validation replaced by a fixed metric sequence."""
    corpus, mcfg = tiny_setup()
    it = iter(metrics)
    monkeypatch.setattr(training, "validate", lambda *a, **k: {"a-x": next(it)})
    snapshots = {}
    cfg = quick_cfg(max_updates=len(metrics) * validate_every, validate_every=validate_every,
                    patience=patience, avg_last=avg_last, early_stop_pairs=["a-x"])
    model = build_model(mcfg, corpus.vocab)

    def grab(record):
        snapshots[record["step"]] = {n: p.detach().clone() for n, p in model.named_parameters()}

    result = train(model, FreezePlan.full(), corpus.split("train"), corpus.split("valid"), cfg, on_validate=grab)
    return result, snapshots


def test_loop_stops_and_restores_best(monkeypatch):
    rng = random.Random(1)
    for _ in range(4):
        metrics = [float(rng.randint(0, 4)) for _ in range(rng.randint(3, 12))]
        stop_i, best_i = reference_stop(metrics, 3)
        result, snaps = scripted_run(monkeypatch, metrics, validate_every=2, patience=3)
        last = (stop_i if stop_i is not None else len(metrics) - 1)
        assert result.state.step == 2 * (last + 1)
        assert result.state.best_step == 2 * (best_i + 1)
        best = dict(result.best.named_parameters())
        assert all(torch.equal(best[n], v) for n, v in snaps[result.state.best_step].items())


def test_averaged_is_mean_of_last_validations(monkeypatch):
    result, snaps = scripted_run(monkeypatch, [1.0, 2.0, 3.0, 4.0], avg_last=3)
    steps = sorted(snaps)[-3:]
    avg = dict(result.averaged.named_parameters())
    for name in avg:
        expect = sum(snaps[s][name] for s in steps) / 3
        assert torch.allclose(avg[name], expect, atol=1e-15)


# -- averaging


def test_average_examples():
    ck = [{"t": torch.tensor([v], dtype=DTYPE)} for v in (0.0, 2.0, 4.0)]
    assert average_checkpoints(ck)["t"].item() == 2.0
    assert torch.equal(average_checkpoints(ck[:1])["t"], ck[0]["t"])
    with pytest.raises(ValueError):
        average_checkpoints([{"t": torch.zeros(1)}, {"u": torch.zeros(1)}])
    with pytest.raises(ValueError):
        average_checkpoints([{"t": torch.zeros(1)}, {"t": torch.zeros(2)}])
    with pytest.raises(ValueError):
        average_checkpoints([])


def test_average_matches_compensated_sum():
    gen = torch.Generator().manual_seed(0)
    for n in (2, 3, 7):
        cks = [{"w": torch.randn(5, 4, dtype=DTYPE, generator=gen) * 1e3,
                "b": torch.randn(3, dtype=DTYPE, generator=gen)} for _ in range(n)]
        out = average_checkpoints(cks)
        for name in ("w", "b"):
            flat = [c[name].flatten().tolist() for c in cks]
            oracle = [math.fsum(col) / n for col in zip(*flat)]
            assert max(abs(a - b) for a, b in zip(out[name].flatten().tolist(), oracle)) <= 1e-12 * 1e3


# -- gradient accumulation


def test_accumulation_equals_union_batch():
    corpus, mcfg = tiny_setup()
    samples = corpus.split("train").samples
    b1, b2 = samples[:5], samples[5:11]
    grads = []
    for batches in ([b1, b2], [b1 + b2]):
        model = build_model(mcfg, corpus.vocab, seed=4)
        accumulate_gradients(model, batches, 0.2)
        grads.append({n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None})
    assert grads[0].keys() == grads[1].keys()
    for n in grads[0]:
        assert torch.allclose(grads[0][n], grads[1][n], atol=1e-10, rtol=0), n


def test_nan_loss_aborts():
    corpus, mcfg = tiny_setup()
    model = build_model(mcfg, corpus.vocab)
    with torch.no_grad():
        model.decoder.norm.weight.fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, FreezePlan.full(), corpus.split("train"), corpus.split("valid"), quick_cfg())


def test_empty_trainable_set_is_rejected():
    corpus, mcfg = tiny_setup()
    model = build_model(mcfg, corpus.vocab)
    with pytest.raises(TrainingError):
        train(model, FreezePlan.adapters_only(), corpus.split("train"), corpus.split("valid"), quick_cfg())


def test_reproducible_metric_log(tmp_path):
    corpus, mcfg = tiny_setup()
    logs = []
    for k in range(2):
        model = build_model(mcfg, corpus.vocab, seed=2)
        path = tmp_path / f"run{k}.log"
        train(model, FreezePlan.full(), corpus.split("train"), corpus.split("valid"), quick_cfg(),
              seed=5, log_path=path)
        logs.append(path.read_text())
    assert logs[0] == logs[1]
    records = [json.loads(line) for line in logs[0].splitlines()]
    assert [r["step"] for r in records] == [2, 4, 6]
    assert set(records[0]) == {"step", "bleu", "mean", "lr", "loss", "patience"}


def test_frozen_parameters_untouched_by_train():
    corpus, mcfg = tiny_setup()
    model = build_model(mcfg, corpus.vocab, AdapterSpec(4, skip_bottom=1))
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    res = train(model, FreezePlan.fine_tune_bottom(1), corpus.split("train"), corpus.split("valid"), quick_cfg())
    for out in (res.final, res.averaged, res.best):
        for n, p in out.named_parameters():
            if n not in res.trainable:
                assert torch.equal(p, before[n]), n


# -- incremental adaptation


def test_incremental_strategies_and_counts():
    corpus, mcfg = tiny_setup()
    mcfg = ModelConfig(**{**mcfg.__dict__, "enc_layers": 3, "dec_layers": 2})
    base = build_model(mcfg, corpus.vocab, AdapterSpec(4, skip_bottom=2))
    counts = {}
    for strategy in INCREMENTAL_STRATEGIES:
        model, plan = prepare_incremental(base, strategy, ["a"])
        names = training.apply_freeze_plan(model, plan)
        counts[strategy] = model.param_count(names)
        assert sorted(model.adapters["incr"].enc) == ["0", "1"] and not model.adapters["incr"].dec
        assert model.adapters["incr"].languages == ("a",)
    assert counts["adapters256_bottom"] < counts["adapters256_all"]
    assert counts["adapters64_all"] < counts["adapters256_all"]
    assert counts["adapters256_bottom"] < counts["conv_adapters256_bottom"]
    with pytest.raises(ValueError):
        prepare_incremental(base, "bogus", ["a"])
    bare = build_model(mcfg, corpus.vocab)
    with pytest.raises(ValueError):
        prepare_incremental(bare, "adapters256_all", ["a"])
