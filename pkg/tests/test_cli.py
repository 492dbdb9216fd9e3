import json
import re
import struct

import pytest
import torch

from pmst.checkpoint import (MAGIC, CheckpointError, load_model, load_tensors, read_header, save_model,
                             save_tensors)
from pmst.cli import main
from pmst.config import ConfigError, RunConfig, format_hyperparameters, load_config
from pmst.corpus import Vocab
from pmst.model import AdapterSpec, ModelConfig, build_model
from pmst.tensor import DTYPE

TINY = {
    "profile": "toy",
    "seed": 0,
    "model": {"enc_layers": 2, "dec_layers": 1, "d_model": 8, "ffn_dim": 16, "heads": 2, "conv_channels": 4,
              "feature_dim": 4, "dropout": 0.0, "attention_dropout": 0.0},
    "adapters": {"bottleneck_dim": 4},
    "freeze": {"mode": "fine_tune_bottom", "layers": 1},
    "train": {"max_updates": 4, "warmup": 2, "validate_every": 2, "max_source_features": 60, "valid_max_len": 8},
    "pretrain": {"max_updates": 4, "warmup": 2, "validate_every": 2, "max_source_features": 60,
                 "valid_max_len": 8},
    "corpus": {"languages": ["a", "b", "x"],
               "pairs": [{"src": "a", "tgt": "x", "task": "ST", "train": 10, "valid": 3, "test": 4},
                         {"src": "b", "tgt": "x", "task": "ST", "train": 10, "valid": 3, "test": 4}],
               "tokens_per_lang": 6, "ratio": 2, "min_len": 2, "max_len": 4},
    "mt_pairs_size": 10,
    "decode": {"beam": 2, "max_len": 8},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(json.dumps(TINY))
    return path


# -- checkpoint container


def test_tensor_round_trip_is_bit_exact(tmp_path):
    gen = torch.Generator().manual_seed(0)
    tensors = {"w": torch.randn(3, 4, dtype=DTYPE, generator=gen), "ids": torch.arange(5),
               "scalar": torch.tensor(float("inf"), dtype=DTYPE), "empty": torch.zeros(0, 2, dtype=DTYPE)}
    save_tensors(tmp_path / "t.ckpt", tensors, {"step": 7})
    back, meta = load_tensors(tmp_path / "t.ckpt")
    assert list(back) == list(tensors) and meta == {"step": 7}
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])
    with open(tmp_path / "t.ckpt", "rb") as fh:
        assert fh.read(4) == MAGIC


def test_model_round_trip(tmp_path):
    vocab = Vocab.build(["a", "x"], 5)
    m = build_model(ModelConfig(vocab_size=vocab.size, enc_layers=1, dec_layers=1, d_model=8, ffn_dim=8,
                                heads=2), vocab, AdapterSpec(4))
    save_model(tmp_path / "m.ckpt", m, {"step": 3, "metric_log": [{"step": 3, "mean": 1.0}]})
    back, meta = load_model(tmp_path / "m.ckpt")
    assert meta["step"] == 3 and "metric_log_digest" in meta and "metric_log" not in meta
    assert back.describe() == m.describe()
    for (n, p), (n2, q) in zip(m.state_dict().items(), back.state_dict().items()):
        assert n == n2 and torch.equal(p, q)


def _rewrite(path, magic=None, version=None, header=None, cut=None):
    raw = bytearray(path.read_bytes())
    old_magic, old_version, hlen = struct.unpack("<4sIQ", raw[:16])
    body = raw[16 + hlen:]
    head = raw[16:16 + hlen] if header is None else json.dumps(header).encode()
    out = struct.pack("<4sIQ", magic or old_magic, old_version if version is None else version, len(head))
    out += head + body
    path.write_bytes(bytes(out[:cut] if cut is not None else out))


def test_loader_rejects_corrupt_files(tmp_path):
    p = tmp_path / "t.ckpt"
    save_tensors(p, {"a": torch.zeros(4, dtype=DTYPE), "b": torch.ones(2, dtype=DTYPE)})
    header = read_header(p)
    _rewrite(p, magic=b"NOPE")
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(p)
    save_tensors(p, {"a": torch.zeros(4, dtype=DTYPE)})
    _rewrite(p, version=9)
    with pytest.raises(CheckpointError, match="version"):
        load_tensors(p)
    save_tensors(p, {"a": torch.zeros(4, dtype=DTYPE), "b": torch.ones(2, dtype=DTYPE)})
    bad = json.loads(json.dumps(header))
    bad["tensors"][1]["offset"] = 8
    _rewrite(p, header=bad)
    with pytest.raises(CheckpointError, match="overlapping"):
        load_tensors(p)
    save_tensors(p, {"a": torch.zeros(4, dtype=DTYPE)})
    _rewrite(p, cut=-8)
    with pytest.raises(CheckpointError, match="past end"):
        load_tensors(p)
    p.write_bytes(b"PM")
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(p)
    save_tensors(p, {"a": torch.zeros(1, dtype=DTYPE)})
    with pytest.raises(CheckpointError, match="not a model"):
        load_model(p)


# -- configuration


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="top-level"):
        RunConfig.from_dict({"profile": "toy", "modle": {}})
    with pytest.raises(ConfigError, match=r"\[train\]"):
        RunConfig.from_dict({"train": {"lr_maxx": 1}})
    with pytest.raises(ConfigError, match="pair"):
        RunConfig.from_dict({"corpus": {"pairs": [{"src": "a", "tgt": "x", "size": 3}]}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"profile": "huge"})
    bad = tmp_path / "bad.cfg"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_full_scale_profile_echoes_hyperparameters():
    text = format_hyperparameters(load_config(None, "paper"))
    rows = dict(re.split(r"\s{2,}", line, maxsplit=1) for line in text.splitlines())
    expected = {
        "Batch size": "4000", "Update freq": "2", "Max learning rate": "0.0005", "Initial LR": "1e-07",
        "Schedule": "inverse square root", "Warmup steps": "10000", "Adam betas": "0.9, 0.999",
        "Label smoothing": "0.2", "Weight decay": "0.0", "Dropout": "0.3", "Attention dropout": "0.1",
        "Gradient clipping": "none", "1D Convolutions": "1", "Conv channels": "80", "Conv kernel size": "5",
        "Conv stride": "2", "Embed scaling factor": "sqrt(1024)", "Positional encoding": "sinusoidal",
        "Encoder layers": "24", "Decoder layers": "24", "Embed dim": "1024", "FFN dim": "8192",
        "Activation": "ReLU", "Attention heads": "16", "Pre-norm": "True", "Adapter dim": "64",
        "Lang-pair temperature": "3.0", "Heterogeneous batches": "True", "Valid freq": "5000",
        "Checkpoint averaging": "3", "Patience": "5", "Early stopping metric": "BLEU", "Beam size": "5",
        "Max updates": "200000",
    }
    for key, value in expected.items():
        assert rows[key] == value, key


# -- command line


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["train"]) == 1
    assert main(["average", "--inputs", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "o.ckpt")]) == 2
    assert main(["show-config", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text(json.dumps({"model": {"depth": 3}}))
    assert main(["show-config", "--config", str(bad)]) == 1
    assert main(["--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_average_command(tmp_path):
    paths = []
    for k, v in enumerate((1.0, 2.0, 6.0)):
        paths.append(str(tmp_path / f"{k}.ckpt"))
        save_tensors(paths[-1], {"w": torch.full((2, 2), v, dtype=DTYPE), "b": torch.tensor([v, -v])})
    assert main(["average", "--inputs", *paths, "--out", str(tmp_path / "m.ckpt")]) == 0
    out, meta = load_tensors(tmp_path / "m.ckpt")
    assert torch.equal(out["w"], torch.full((2, 2), 3.0, dtype=DTYPE))
    assert torch.equal(out["b"], torch.tensor([3.0, -3.0], dtype=DTYPE))
    assert meta["averaged_from"] == paths


def test_pipeline_is_reproducible(tmp_path, cfg_path):
    c = ["--config", str(cfg_path)]
    assert main(["gen-data", *c, "--out", str(tmp_path / "st.jsonl")]) == 0
    assert main(["gen-data", *c, "--mt", "--out", str(tmp_path / "mt.jsonl")]) == 0
    assert main(["pretrain-mt", *c, "--data", str(tmp_path / "mt.jsonl"), "--out", str(tmp_path / "mt")]) == 0
    logs = []
    for run in ("r1", "r2"):
        assert main(["train", *c, "--seed", "1", "--pretrained", str(tmp_path / "mt" / "final.ckpt"),
                     "--data", str(tmp_path / "st.jsonl"), "--out", str(tmp_path / run)]) == 0
        logs.append((tmp_path / run / "train.log").read_text())
    assert logs[0] == logs[1] and logs[0]
    manifest = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["command"] == "train"
    assert manifest["config_hash"] == json.loads((tmp_path / "r2" / "manifest.json").read_text())["config_hash"]
    assert manifest["version"].startswith("0.1.0+")

    ckpt = str(tmp_path / "r1" / "averaged.ckpt")
    data = str(tmp_path / "st.jsonl")
    assert main(["decode", *c, "--ckpt", ckpt, "--data", data, "--out", str(tmp_path / "one.jsonl")]) == 0
    assert main(["decode", *c, "--ensemble", ",".join([ckpt] * 3), "--data", data,
                 "--out", str(tmp_path / "three.jsonl")]) == 0
    assert (tmp_path / "one.jsonl").read_text() == (tmp_path / "three.jsonl").read_text()
    assert (tmp_path / "one.jsonl.manifest.json").exists()
    assert main(["decode", *c, "--ckpt", ckpt, "--data", data, "--route", "text", "--no-enc-adapters",
                 "--no-dec-adapters", "--out", str(tmp_path / "text.jsonl")]) == 0
    assert main(["evaluate", "--hyps", str(tmp_path / "one.jsonl"), "--data", data,
                 "--out", str(tmp_path / "report.jsonl")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "report.jsonl").read_text().splitlines()]
    assert {r["pair"] for r in rows} == {"a-x", "b-x"}
    assert main(["cascade", *c, "--st", ckpt, "--mt", str(tmp_path / "mt" / "final.ckpt"), "--data", data,
                 "--pivot", "x", "--final", "b", "--out", str(tmp_path / "cascade.jsonl")]) in (0, 2)

    assert main(["filter-vocab", "--ckpt", ckpt, "--langs", "x", "--out", str(tmp_path / "fv.ckpt")]) == 0
    small, meta = load_model(tmp_path / "fv.ckpt")
    assert small.vocab.size < load_model(ckpt)[0].vocab.size and meta["vocab_filter"] == ["x"]

    assert main(["adapt", *c, "--base", ckpt, "--data", data, "--pairs", "b-x", "--strategy",
                 "adapters256_bottom", "--out", str(tmp_path / "adapt")]) == 0


def test_filter_contamination_command(tmp_path, cfg_path):
    doc = dict(TINY)
    doc["corpus"] = dict(TINY["corpus"], contamination=0.5,
                         pairs=[{"src": "a", "tgt": "x", "task": "ST", "train": 10, "valid": 6, "test": 6},
                                {"src": "a", "tgt": "a", "task": "ASR", "train": 10, "valid": 0, "test": 0}])
    cfg = tmp_path / "c.cfg"
    cfg.write_text(json.dumps(doc))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c.jsonl")]) == 0
    held = str(tmp_path / "c.jsonl")
    assert main(["filter-contamination", "--data", held, "--held", held, "--held-split", "valid", "test",
                 "--out", str(tmp_path / "clean.jsonl")]) == 0
    from pmst.corpus import contamination_rate, load_corpus
    clean = load_corpus(tmp_path / "clean.jsonl")
    source = load_corpus(held)
    assert contamination_rate(clean.split("train"), [source.split("valid"), source.split("test")]) == 0.0
