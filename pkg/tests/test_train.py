import csv
import importlib
import json
import struct

import numpy as np
import pytest

from htr import tensor as T
from htr.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from htr.cli import run
from htr.ctc import ctc_loss
from htr.dataset import Alphabet, Entry, SynthConfig, encode_pgm, load_manifest, synth_generate, write_manifest
from htr.network import NetworkConfig, build_model
from htr.tensor import Tensor
from htr.train import (
    Adam,
    ConfigError,
    NumericError,
    TrainConfig,
    adam_step,
    evaluate,
    evaluate_network,
    lr_schedule,
    multitask_loss,
    train,
)

train_mod = importlib.import_module("htr.train")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return synth_generate(SynthConfig(size=6, seed=3, words_per_line=(1, 2)), root)


def small_cfg(manifest, out, **kw):
    base = dict(train_manifest=str(manifest), out_dir=str(out), batch_size=3, total_epochs=4,
                milestones=(2, 3), deterministic=True, network={"hidden": 16, "dtype": "float32"})
    base.update(kw)
    return TrainConfig(**base)


def logits(seed, shape=(2, 6, 5)):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------- loss and schedule

def test_multitask_is_weighted_sum():
    targets = [[1, 2], [3]]
    main, aux = logits(0), logits(1)
    total = multitask_loss(main, aux, targets, 0.1)
    expect = ctc_loss(logits(0), targets).data + 0.1 * ctc_loss(logits(1), targets).data
    assert np.isclose(total.data, expect, rtol=1e-12)
    assert float(multitask_loss(main, None, targets, 0.1).data) == float(ctc_loss(logits(0), targets).data)
    with pytest.raises(ConfigError):
        multitask_loss(main, aux, targets, -1.0)


def test_multitask_linear_in_weight():
    targets = [[1, 2], [3]]
    vals = [float(multitask_loss(logits(0), logits(1), targets, w).data) for w in (0.0, 0.5, 1.0)]
    assert np.isclose(vals[1] - vals[0], vals[2] - vals[1], rtol=1e-12)


def test_zero_weight_disconnects_shortcut_but_not_head():
    cfg = NetworkConfig.preset("tiny", dropout=0.0, dtype="float64", hidden=8)
    x = np.random.default_rng(0).random((2, 1, 32, 256))
    targets = [[1, 2, 3], [4]]
    grads = {}
    for w in (0.0, 0.1):
        net = build_model(cfg, 1)
        main, aux = net.forward(x, with_shortcut=True)
        T.backward(multitask_loss(main, aux, targets, w))
        grads[w] = {n: None if p.grad is None else p.grad.copy() for n, p in net.params.items()}
    assert np.all(grads[0.0]["shortcut.weight"] == 0)
    assert np.any(grads[0.1]["shortcut.weight"] != 0)
    for n in grads[0.0]:
        if n.startswith("head."):
            np.testing.assert_array_equal(grads[0.0][n], grads[0.1][n])
    assert not np.array_equal(grads[0.0]["stem.conv.weight"], grads[0.1]["stem.conv.weight"])


def test_lr_schedule_points():
    cfg = TrainConfig()
    got = [lr_schedule(e, cfg) for e in (0, 119, 120, 180, 239)]
    assert got == [1e-3, 1e-3, 1e-4, 1e-5, 1e-5]


def test_scaled_schedule_and_validation():
    cfg = TrainConfig().scaled(40)
    assert cfg.milestones == (20, 30)
    assert TrainConfig().scaled(2).milestones == (1,)
    assert TrainConfig().scaled(1).milestones == ()
    with pytest.raises(ConfigError):
        TrainConfig(milestones=(180, 120))
    with pytest.raises(ConfigError):
        TrainConfig(total_epochs=100)
    with pytest.raises(ConfigError):
        TrainConfig(shortcut_weight=-0.5)
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_config_json_round_trip(tmp_path):
    cfg = TrainConfig(seed=4, flatten="concat", network={"hidden": 32})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(p) == cfg


# ---------------------------------------------------------------- optimizer

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step({"p": p}, Adam(), 1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_and_descent():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam()
    values = []
    for _ in range(200):
        p.grad = 2 * p.data
        adam_step({"p": p}, opt, 0.05)
        values.append(p.data[0] ** 2)
    assert values[-1] < 1e-2
    # bias correction makes the first step exactly lr * sign(g)
    q = Tensor(np.array([3.0]), requires_grad=True)
    q.grad = np.array([6.0])
    adam_step({"q": q}, Adam(), 0.05)
    assert np.isclose(q.data[0], 2.95, atol=1e-8)


def test_adam_deterministic():
    def run5():
        p = Tensor(np.linspace(-1, 1, 7), requires_grad=True)
        opt = Adam()
        rng = np.random.default_rng(0)
        for _ in range(5):
            p.grad = rng.normal(size=7)
            adam_step({"p": p}, opt, 1e-2)
        return p.data

    assert np.array_equal(run5(), run5())


def test_adam_rejects_non_finite():
    p = Tensor(np.ones(3), requires_grad=True)
    p.grad = np.array([0.0, np.nan, 1.0])
    with pytest.raises(NumericError, match="stem.w"):
        adam_step({"stem.w": p}, Adam(), 1e-3)
    np.testing.assert_array_equal(p.data, np.ones(3))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = build_model(NetworkConfig.preset("tiny", hidden=8), 2)
    opt = Adam()
    for p in net.params.values():
        p.grad = np.random.default_rng(0).normal(size=p.shape).astype(np.float32)
    adam_step(net.params, opt, 1e-3)
    net.bn["stem.bn"].running_mean += 0.25
    net.dropout_rng.random(5)
    save_checkpoint(tmp_path / "a.ckpt", net, " ab", {"seed": 1}, opt, epoch=7)
    opt2 = Adam()
    net2, header = load_checkpoint(tmp_path / "a.ckpt", opt2)
    assert header["epoch"] == 7 and header["alphabet"] == " ab"
    for n, p in net.params.items():
        assert np.array_equal(p.data, net2.params[n].data), n
        assert np.array_equal(opt.m[n], opt2.m[n]) and np.array_equal(opt.v[n], opt2.v[n])
    for n, st in net.bn.items():
        assert np.array_equal(st.running_mean, net2.bn[n].running_mean)
        assert np.array_equal(st.running_var, net2.bn[n].running_var)
    assert opt2.t == opt.t
    assert net.dropout_rng.random() == net2.dropout_rng.random()


def test_checkpoint_rejects_unknown_version_and_garbage(tmp_path):
    net = build_model(NetworkConfig.preset("tiny", hidden=8), 0)
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, net, " a")
    buf = bytearray(p.read_bytes())
    struct.pack_into("<I", buf, 8, 99)
    (tmp_path / "b.ckpt").write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="version 99"):
        read_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(b"nonsense")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "c.ckpt")
    (tmp_path / "d.ckpt").write_bytes(p.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "d.ckpt")


# ---------------------------------------------------------------- training loop

def test_train_writes_logs_and_checkpoints(corpus, tmp_path):
    res = train(small_cfg(corpus, tmp_path / "run", val_manifest=str(corpus)))
    with open(res.metrics_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["split"] for r in rows] == ["train", "val"] * 4
    assert [float(r["lr"]) for r in rows[::2]] == [1e-3, 1e-3, 1e-4, 1e-5]
    assert all(np.isfinite(float(r["loss_main"])) for r in rows)
    assert rows[0]["loss_shortcut"] != "" and rows[1]["loss_shortcut"] == ""
    assert res.last_checkpoint.exists() and res.best_checkpoint.exists()
    assert read_checkpoint(res.last_checkpoint)[0]["epoch"] == 3


def test_resume_matches_uninterrupted_run(corpus, tmp_path, monkeypatch):
    full = train(small_cfg(corpus, tmp_path / "full"))

    real = train_mod.lr_schedule

    def crash_at_two(epoch, cfg):
        if epoch == 2:
            raise KeyboardInterrupt
        return real(epoch, cfg)

    monkeypatch.setattr(train_mod, "lr_schedule", crash_at_two)
    with pytest.raises(KeyboardInterrupt):
        train(small_cfg(corpus, tmp_path / "resumed"))
    monkeypatch.setattr(train_mod, "lr_schedule", real)
    resumed = train(small_cfg(corpus, tmp_path / "resumed"), resume=str(tmp_path / "resumed" / "last.ckpt"))
    assert resumed.history[2]["lr"] == 1e-4
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "resumed" / "metrics.csv").read_bytes()
    a, _ = load_checkpoint(full.last_checkpoint)
    b, _ = load_checkpoint(resumed.last_checkpoint)
    for n in a.params:
        assert np.array_equal(a.params[n].data, b.params[n].data), n


def test_infeasible_sample_is_skipped(corpus, tmp_path, caplog):
    idx = load_manifest(corpus)
    entries = list(idx.entries) + [Entry(idx.entries[0].image, "abcdefghij" * 4)]
    m = tmp_path / "m.jsonl"
    write_manifest(m, [Entry(str(idx.image_path(e)), e.text) for e in entries])
    res = train(small_cfg(m, tmp_path / "run", total_epochs=1, milestones=()))
    assert res.skipped == 1
    assert "skipping sample 6" in caplog.text


def test_strip_shortcut_does_not_change_eval(corpus, tmp_path):
    res = train(small_cfg(corpus, tmp_path / "run", total_epochs=2, milestones=()))
    a = evaluate(res.last_checkpoint, corpus)
    b = evaluate(res.last_checkpoint, corpus, strip_shortcut=True)
    assert (a.cer, a.wer) == (b.cer, b.wer)
    assert len(a) == 6


def test_blank_only_network_scores_full_error(corpus, tmp_path):
    net = build_model(NetworkConfig.preset("tiny", hidden=8), 0)
    net.params["head.proj.weight"].data[:] = 0
    net.params["head.proj.bias"].data[:] = 0
    net.params["head.proj.bias"].data[0] = 10
    save_checkpoint(tmp_path / "b.ckpt", net, "".join(Alphabet().chars))
    net2, header = load_checkpoint(tmp_path / "b.ckpt")
    rep, hyps = evaluate_network(net2, header, load_manifest(corpus))
    assert hyps == [""] * 6
    assert rep.cer == 100.0 and rep.wer == 100.0


def test_non_finite_loss_raises(corpus, tmp_path):
    with pytest.raises(NumericError):
        train(small_cfg(corpus, tmp_path / "run", base_lr=1e30, total_epochs=2, milestones=()))


# ---------------------------------------------------------------- command line

def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["synth", "--out", str(data), "--size", "4", "--seed", "2"]) == 0
    manifest = data / "manifest.jsonl"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"batch_size": 2, "network": {"hidden": 8}}))
    out = tmp_path / "run"
    assert run(["train", "--config", str(cfg), "--manifest", str(manifest), "--out", str(out),
                "--epochs", "2", "--deterministic"]) == 0
    capsys.readouterr()
    assert run(["eval", "--checkpoint", str(out / "last.ckpt"), "--manifest", str(manifest)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["samples"] == 4 and 0 <= report["cer"]
    assert run(["decode", "--checkpoint", str(out / "last.ckpt"), str(data / "images" / "000000.pgm")]) == 0


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"milestones": [5, 3]}))
    assert run(["train", "--config", str(bad), "--manifest", "x.jsonl"]) == 1
    assert run(["train", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert run(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", "x"]) == 1
    with pytest.raises(SystemExit) as exc:
        run(["train", "--epochs", "abc"])
    assert exc.value.code == 1
    (tmp_path / "img.pgm").write_bytes(encode_pgm(np.zeros((4, 4))))
    m = tmp_path / "m.jsonl"
    write_manifest(m, [Entry("img.pgm", "ab")])
    nan_cfg = tmp_path / "nan.json"
    nan_cfg.write_text(json.dumps({"base_lr": 1e30, "network": {"hidden": 8}}))
    assert run(["train", "--config", str(nan_cfg), "--manifest", str(m), "--out", str(tmp_path / "n"),
                "--epochs", "2"]) == 3


def test_cli_gradcheck(capsys):
    assert run(["gradcheck", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 8 and all(l.startswith("PASS") for l in lines)
