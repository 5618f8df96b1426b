import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nesydm.cli import TRAIN_COLUMNS, cmd_eval, cmd_train, learning_rate, main
from nesydm.config import ConfigError, RunConfig, dump_docs, preset
from nesydm.verify import run_verify


def _small(**kw):
    base = dict(n_train=64, n_test=32, epochs=1, S=8, K=8, L=4, ece_L=20, ece_examples=8, hidden=(4,))
    base.update(kw)
    return dataclasses.replace(preset("xor"), **base)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_roundtrip_presets():
    for task in ("xor", "addition", "path"):
        cfg = preset(task)
        assert RunConfig.from_ini(cfg.to_ini()) == cfg


@settings(max_examples=50)
@given(
    lr=st.floats(1e-6, 1.0),
    hidden=st.lists(st.integers(1, 64), max_size=3).map(tuple),
    seed=st.integers(0, 2**31),
    cond=st.booleans(),
    mode=st.sampled_from(["PTM", "PMM", "TMP", "MMP"]),
)
def test_config_roundtrip_property(lr, hidden, seed, cond, mode):
    cfg = dataclasses.replace(preset("path"), lr=lr, hidden=hidden, seed=seed, condition=cond, output_mode=mode)
    text = cfg.to_ini()
    again = RunConfig.from_ini(text)
    assert again == cfg and again.to_ini() == text


def test_config_rejects_unknown_names():
    with pytest.raises(ConfigError, match="lerning_rate"):
        RunConfig.from_ini("[optim]\nlerning_rate = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_ini("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[optim]\nepochs = many\n")
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[task]\ntask = chess\n")


def test_config_docs_cover_every_key():
    docs = dump_docs()
    for section, names in RunConfig.keys_by_section().items():
        for n in names:
            assert f"[{section}] {n}:" in docs


def test_learning_rate_schedule():
    cfg = dataclasses.replace(preset("xor"), lr=1.0, lr_min=0.1, lr_schedule="cosine")
    assert learning_rate(cfg, 0, 11) == pytest.approx(1.0)
    assert learning_rate(cfg, 10, 11) == pytest.approx(0.1)
    assert learning_rate(dataclasses.replace(cfg, lr_schedule="constant"), 10, 11) == 1.0


def test_train_zero_epochs(tmp_path):
    cmd_train(_small(epochs=0), tmp_path)
    assert _rows(tmp_path / "metrics.csv") == [list(TRAIN_COLUMNS)]
    assert (tmp_path / "model.ckpt").exists()


def test_train_is_deterministic(tmp_path):
    cmd_train(_small(epochs=2), tmp_path / "a")
    cmd_train(_small(epochs=2), tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    rows = _rows(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 3 and rows[1][0] == "1"
    assert a.endswith(b"\r\n")


def test_different_seeds_differ(tmp_path):
    cmd_train(_small(seed=1), tmp_path / "a")
    cmd_train(_small(seed=2), tmp_path / "b")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() != (tmp_path / "b" / "model.ckpt").read_bytes()


def test_csv_valid_after_interruption(tmp_path):
    seen = []

    def stop(row):
        seen.append(row)
        raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        cmd_train(_small(epochs=3), tmp_path, progress=stop)
    rows = _rows(tmp_path / "metrics.csv")
    assert len(rows) == 2 and len(rows[1]) == len(TRAIN_COLUMNS)


def test_eval_sweep_rows(tmp_path):
    cfg = _small()
    cmd_train(cfg, tmp_path)
    rows = cmd_eval(dataclasses.replace(cfg, sweep=True), tmp_path / "model.ckpt", tmp_path / "eval.csv")
    assert [r["output_mode"] for r in rows] == ["PTM", "PMM", "TMP", "MMP"]
    assert len(_rows(tmp_path / "eval.csv")) == 5
    one = cmd_eval(dataclasses.replace(cfg, L=1), tmp_path / "model.ckpt", tmp_path / "e1.csv")
    many = cmd_eval(dataclasses.replace(cfg, L=50), tmp_path / "model.ckpt", tmp_path / "e2.csv")
    assert one[0].keys() == many[0].keys()


def test_eval_rejects_mismatched_checkpoint(tmp_path):
    from nesydm.model import CheckpointError

    cmd_train(_small(), tmp_path)
    with pytest.raises(CheckpointError):
        cmd_eval(_small(hidden=(5,)), tmp_path / "model.ckpt", tmp_path / "e.csv")


def test_perfect_model_scores_perfectly(tmp_path):
    from nesydm.cli import build_arch, build_data, build_program, evaluate
    from nesydm.diffusion import make_rng
    from nesydm.model import ModelParams, init_params

    cfg = _small(layout="joint", condition=False, hidden=(), noise=0.0)
    train, test = build_data(cfg, make_rng(0))
    prog = build_program(cfg)
    arch = build_arch(cfg, prog, 4)
    params = init_params(arch, make_rng(0))
    # logits = 50 * x routes each clean one-hot straight to its bit
    params = ModelParams(arch, {"W0": 50.0 * np.eye(4), "b0": np.zeros(4)})
    row = evaluate(params, cfg, prog, test, make_rng(1))[0]
    assert row["label_acc"] == 1.0 and row["concept_acc"] == 1.0 and row["ece"] == pytest.approx(0.0, abs=1e-12)


def test_main_train_and_sample(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(_small().to_ini())
    assert main(["train", "--config", str(ini), "--seed", "3", "--out", str(tmp_path / "run")]) == 0
    ck = str(tmp_path / "run" / "model.ckpt")
    assert main(["sample", "--config", str(ini), "--checkpoint", ck, "--out", str(tmp_path / "s.csv")]) == 0
    assert _rows(tmp_path / "s.csv")[0] == ["example", "draw", "concepts", "output"]
    assert main(["eval", "--config", str(ini), "--checkpoint", ck, "--out", str(tmp_path / "e.csv")]) == 0


def test_main_reports_bad_config(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[optim]\nlearning = 3\n")
    assert main(["train", "--config", str(ini), "--out", str(tmp_path / "x")]) == 2
    assert "learning" in capsys.readouterr().err


def test_verify_fast_passes(tmp_path):
    assert main(["verify", "--level", "fast", "--out", str(tmp_path / "v.csv")]) == 0
    rows = _rows(tmp_path / "v.csv")
    assert rows[0] == ["name", "measured", "tolerance", "passed", "detail"]
    assert all(r[3] == "1" for r in rows[1:])


def test_verify_catches_mu_division_bug():
    from nesydm.kernels import categorical_sample, weighted_onehot_sum

    def rloo_without_mu(cache, y0, prog, S, t, sched, rng):
        probs = cache.probs
        samples = categorical_sample(np.broadcast_to(probs, (S,) + probs.shape), rng.random((S,) + probs.shape[:-1]))
        hit = prog.eval(samples) == np.asarray(y0)[None]
        mu = hit.mean(axis=0)
        coef = (sched.alpha_prime(t) * ((hit - mu[None]) / (S - 1)).sum(axis=2)).T.copy()
        counts = weighted_onehot_sum(np.ascontiguousarray(samples.transpose(1, 0, 2)), coef, probs.shape[-1])
        return counts - coef.sum(axis=1)[:, None, None] * probs, 0, int(mu.size)

    results = run_verify("fast", estimators={"rloo": rloo_without_mu})
    failed = [r.name for r in results if not r.passed]
    assert failed == ["rloo_mean"]


def test_verify_unknown_override():
    with pytest.raises(ValueError):
        run_verify("fast", estimators={"nope": None})
