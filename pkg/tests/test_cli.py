import json

import numpy as np
import pytest

from igd.cli import (
    EXIT_INVALID,
    EXIT_OK,
    build_task,
    config_hash,
    load_config,
    main,
    read_samples,
    training_hash,
)

TINY_RUN = {
    "task": "toy-mixed",
    "seed": 3,
    "schedule": {"rounds": 2, "phi_probs": [0.5, 0.5], "steps_per_round": [5, 5],
                 "beta": {"kind": "cosine", "a": 0.01, "b": 0.3}},
    "model": {"n_blocks": 1, "n_heads": 2, "model_dim": 16, "mlp_dim": 32, "time_embed_in": 8, "time_embed_out": 16},
    "trainer": {"steps": 20, "batch_size": 16, "warmup": 5, "log_every": 10, "ema_decay": 0.9},
}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = _write(d / "cfg.json", TINY_RUN)
    ckpt = str(d / "model.ckpt")
    assert main(["train", "--config", cfg, "--checkpoint", ckpt, "--threads", "1"]) == EXIT_OK
    return d, cfg, ckpt


def test_verify_default_passes(tmp_path, capsys):
    out = tmp_path / "report.txt"
    assert main(["verify", "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert "FAIL" not in text
    assert "failed: 0  warnings: 0" in text
    assert text.startswith(f"# config_hash: {config_hash(load_config(None))}")


def test_verify_frozen_round_warns(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {"schedule": {"phi_probs": [1.0, 1.0, 1.0, 1.0]}})
    assert main(["verify", "--config", cfg]) == EXIT_OK
    assert "warnings: 1" in capsys.readouterr().out


def test_bad_beta_rejected_before_work(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {"schedule": {"beta": {"kind": "cosine", "a": 1e-4, "b": 1.5}}})
    assert main(["verify", "--config", cfg]) == EXIT_INVALID
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "beta" in captured.err


@pytest.mark.parametrize("override", [
    {"task": "chess"},
    {"seed": -1},
    {"bogus": {}},
    {"schedule": {"phi_probs": [0.5]}},
    {"model": {"n_heads": 3, "model_dim": 16}},
    {"sampler": {"top_p": 0.0}},
])
def test_invalid_configs(tmp_path, override, capsys):
    assert main(["verify", "--config", _write(tmp_path / "c.json", override)]) == EXIT_INVALID


def test_training_hash_ignores_sampler():
    a = load_config(None)
    b = load_config(None)
    b["sampler"] = {"top_p": 0.9}
    assert training_hash(a) == training_hash(b)
    assert config_hash(a) != config_hash(b)
    b["trainer"] = {"lr": 1e-4}
    assert training_hash(a) != training_hash(b)


def test_train_writes_log(trained):
    d, _, ckpt = trained
    lines = [json.loads(x) for x in (d / "model.log.jsonl").read_text().splitlines()]
    assert lines[-1]["step"] == 20
    assert all(np.isfinite(r["loss"]) for r in lines)


def test_sample_zero_writes_header_only(trained, tmp_path):
    _, cfg, ckpt = trained
    out = tmp_path / "s.txt"
    assert main(["sample", "--config", cfg, "--checkpoint", ckpt, "--n", "0", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert [ln.split(":")[0] for ln in lines] == ["# config_hash", "# seed", "# timestamp"]


def test_sample_reruns_byte_identical(trained, tmp_path):
    _, cfg, ckpt = trained
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for p in (a, b):
        assert main(["sample", "--config", cfg, "--checkpoint", ckpt, "--n", "50", "--out", str(p)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    header, batch = read_samples(a, build_task(load_config(cfg)).layout)
    assert len(batch) == 50
    assert header["seed"] == "3"
    c = tmp_path / "c.txt"
    assert main(["sample", "--config", cfg, "--checkpoint", ckpt, "--n", "50", "--seed", "4", "--out", str(c)]) == EXIT_OK
    assert c.read_bytes() != a.read_bytes()


def test_hash_mismatch_needs_force(trained, tmp_path, capsys):
    _, _, ckpt = trained
    other = dict(TINY_RUN, trainer=dict(TINY_RUN["trainer"], lr=5e-4))
    cfg = _write(tmp_path / "other.json", other)
    out = str(tmp_path / "s.txt")
    assert main(["sample", "--config", cfg, "--checkpoint", ckpt, "--n", "5", "--out", out]) == EXIT_INVALID
    assert "--force" in capsys.readouterr().err
    assert main(["sample", "--config", cfg, "--checkpoint", ckpt, "--n", "5", "--out", out, "--force"]) == EXIT_OK


def test_eval_and_redenoise(trained, tmp_path, capsys):
    _, cfg, ckpt = trained
    s = tmp_path / "s.txt"
    assert main(["sample", "--config", cfg, "--checkpoint", ckpt, "--n", "40", "--out", str(s)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--samples", str(s)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "w1_proxy" in out and "tv_tokens" in out and "n  40" in out
    # ReDeNoise is rejected until rounds are configured, then reproducible.
    assert main(["redenoise", "--config", cfg, "--checkpoint", ckpt, "--samples", str(s)]) == EXIT_INVALID
    rd = dict(TINY_RUN, sampler={"redenoise_rounds": 1, "redenoise_iterations": 2})
    cfg2 = _write(tmp_path / "rd.json", rd)
    r1, r2 = tmp_path / "r1.txt", tmp_path / "r2.txt"
    for p in (r1, r2):
        assert main(["redenoise", "--config", cfg2, "--checkpoint", ckpt, "--samples", str(s), "--out", str(p)]) == EXIT_OK
    assert r1.read_bytes() == r2.read_bytes()
    assert len(r1.read_text().splitlines()) == 3 + 40


def test_negative_n_rejected(capsys):
    assert main(["sample", "--n", "-1"]) == EXIT_INVALID
