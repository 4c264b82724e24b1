import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptune import experiment as ex
from adaptune.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from adaptune.dataio import load_csv, load_idx
from adaptune.modelcore import load_weights
from adaptune.search import StudyHistory

TINY = "synthetic:gaussian_blobs?C=3&dims=4&n=30&difficulty=1.0"
FAST = ["--override", f"dataset={TINY}", "--override", "train.max_epochs=3", "--override", "train.warmup_epochs=0",
        "--override", "train.batch_size=16", "--override", "model.hidden=8"]


def report(path):
    data = json.loads((path / "report.json").read_text())
    jsonschema.validate(data, ex.report_schema())
    return data


def without_timestamp(path):
    data = json.loads((path / "report.json").read_text())
    data.pop("generated_at")
    return data


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(["softmax", "mlp", "cnn"]),
       source=st.sampled_from(ex.LR_SOURCES), lr=st.floats(1e-4, 1.0),
       epochs=st.integers(6, 300), loss=st.sampled_from(["ce", "am_softmax", "dml_pair"]),
       opt=st.sampled_from(["sgd", "sam"]), nbd=st.booleans(),
       augment=st.sampled_from(["none", "basic", "augmix", "augmix+mixup"]), severity=st.integers(1, 10))
def test_config_round_trip(seed, kind, source, lr, epochs, loss, opt, nbd, augment, severity):
    data = {"seed": seed, "model": {"kind": kind}, "lr": {"source": source, "value": lr},
            "train": {"max_epochs": epochs, "initial_lr": lr, "loss_kind": loss, "optimizer": opt, "nbd": nbd,
                      "augment": augment, "policy": {"severity": severity}}}
    cfg = ex.RunConfig.from_dict(data)
    again = ex.RunConfig.from_dict(yaml.safe_load(ex.dump_config(cfg)))
    assert again.to_dict() == cfg.to_dict()
    assert ex.RunConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_keys_are_listed(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nbogus: 2\ntrain:\n  max_epoch: 5\n  patience: 3\nlr:\n  sorce: tpe\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    err = capsys.readouterr().err
    for key in ("bogus", "train.max_epoch", "lr.sorce"):
        assert key in err
    assert not (tmp_path / "o" / "report.json").exists()


@pytest.mark.parametrize("override, key", [
    ("train.schedule_kind=step", "train"), ("lr.source=magic", "lr.source"), ("model.kind=resnet", "model"),
    ("dataset=/nonexistent.csv", "dataset"), ("train_fraction=1.5", "train_fraction"), ("novalue", "novalue"),
])
def test_invalid_values_exit_2(tmp_path, capsys, override, key):
    assert main(["train", "--out", str(tmp_path), "--override", override]) == EXIT_USAGE
    assert key in capsys.readouterr().err


def test_overrides_and_preset_merge(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("train:\n  max_epochs: 50\n  patience: 3\n")
    cfg = ex.load_config(str(cfg_file), ["train.max_epochs=7", "lr.value=0.02"], base=ex.BASELINE_PRESET)
    assert cfg.train.max_epochs == 7 and cfg.train.patience == 3 and cfg.lr.value == 0.02
    assert cfg.train.schedule_kind == "cosine"
    cfg = ex.load_config(None, ["train.initial_lr=1e-2", "train.policy.severity=5", "lr.high=4e-2"])
    assert cfg.train.initial_lr == 0.01 and cfg.train.min_lr == pytest.approx(1e-5)
    assert cfg.train.policy.severity == 5 and cfg.lr.bounds("mlp").high == 0.04


def test_train_fixed_writes_outputs_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["train", "--seed", "4", "--out", str(out), "--ranks"] + FAST) == EXIT_OK
    rep = report(a)
    assert rep["schema_version"] == "1.0" and rep["command"] == "train"
    (student,) = rep["result"]["students"]
    assert student["epochs_run"] == 3 and len(student["records"]) == 3
    assert rep["lr"]["chosen"] == 0.013 and rep["outputs"]["trials"] is None
    assert without_timestamp(a) == without_timestamp(b)
    assert (a / "weights.bin").read_bytes() == (b / "weights.bin").read_bytes()
    assert set(load_weights(a / "weights.bin").names()) == {"hidden.weight", "hidden.bias", "head.weight", "head.bias"}
    assert (a / "ranks.csv").read_text().startswith("index,label,rank\n")


def test_train_tpe_pair_writes_trials(tmp_path):
    out = tmp_path / "t"
    args = ["train", "--preset", "adaptive", "--out", str(out), "--override", "lr.trials=3",
            "--override", "lr.epochs_per_trial=2", "--override", "train.augment=augmix"] + FAST
    assert main(args) == EXIT_OK
    rep = report(out)
    assert rep["lr"]["source"] == "tpe" and rep["outputs"]["trials"] == "trials.jsonl"
    assert len(StudyHistory.read_jsonl(out / "trials.jsonl").trials) == 3
    assert [s["role"] for s in rep["result"]["students"]] == ["fast", "slow"]
    assert (out / "weights_slow.bin").exists()
    assert rep["config"]["train"]["loss_kind"] == "dml_pair"


def test_divergence_exit_code(tmp_path):
    out = tmp_path / "d"
    code = main(["train", "--out", str(out), "--override", "lr.value=1e6", "--override", "train.initial_lr=1e6",
                 "--override", "train.schedule_kind=constant"] + FAST + ["--override", "train.max_epochs=60"])
    assert code == EXIT_DIVERGED
    (student,) = report(out)["result"]["students"]
    assert student["diverged"] and student["stop_reason"] == "diverged"


def test_eval_round_trip(tmp_path):
    assert main(["train", "--out", str(tmp_path / "tr")] + FAST) == EXIT_OK
    trained = report(tmp_path / "tr")["result"]["students"][0]["final"]
    assert main(["eval", "--out", str(tmp_path / "ev"), "--weights", str(tmp_path / "tr" / "weights.bin")] + FAST) == 0
    metrics = report(tmp_path / "ev")["metrics"]
    assert metrics["top1"] == trained["top1"] and metrics["map"] == trained["map"]
    assert main(["eval", "--out", str(tmp_path / "ev"), "--weights", str(tmp_path / "missing.bin")] + FAST) == 2


@pytest.mark.parametrize("method", ["fastai", "fastai-pretrain", "grid", "tpe"])
def test_lr_find(tmp_path, method):
    extra = ["--override", "lr.grid_points=3", "--override", "lr.grid_epochs=2", "--override", "lr.trials=3",
             "--override", "lr.epochs_per_trial=2", "--override", "lr.range_iterations=30"]
    assert main(["lr-find", method, "--out", str(tmp_path)] + FAST + extra) == EXIT_OK
    rep = report(tmp_path)
    bounds = ex.LrSource().bounds("mlp")
    assert bounds.low <= rep["lr"]["chosen"] <= bounds.high
    assert (tmp_path / "trials.jsonl").exists() == (method in ("grid", "tpe"))


def test_lr_find_needs_method(tmp_path):
    assert main(["lr-find", "--out", str(tmp_path)] + FAST) == EXIT_USAGE


def test_gen_data_csv_and_idx(tmp_path):
    assert main(["gen-data", "blobs3", "--seed", "2", "--out", str(tmp_path)]) == EXIT_OK
    ds = load_csv(tmp_path / "blobs3.csv")
    assert len(ds) == 900 and ds.class_count == 3
    np.testing.assert_array_equal(ds.features, ex.load_dataset("blobs3", 2).features)
    assert report(tmp_path)["dataset"]["n_samples"] == 900
    uri = "synthetic:gaussian_blobs?C=2&dims=16&n=5&image=4"
    assert main(["gen-data", uri, "--format", "idx", "--out", str(tmp_path / "i")]) == EXIT_OK
    img = load_idx(tmp_path / "i" / "dataset-images.idx", tmp_path / "i" / "dataset-labels.idx")
    assert img.features.shape == (10, 4, 4)
    assert main(["gen-data", "noisy5", "--format", "idx", "--out", str(tmp_path / "j")]) == EXIT_USAGE


def compare_args(out):
    return ["compare", "--out", str(out), "--datasets", f"{TINY},blobs3", "--seeds", "1,2",
            "--override", "lr.source=fixed"] + FAST[2:]


def test_compare_report_and_threads(tmp_path, monkeypatch):
    base = tmp_path / "base.yaml"
    base.write_text("train:\n  max_epochs: 4\n  batch_size: 16\nmodel:\n  hidden: 8\n")
    monkeypatch.setenv("ADAPTUNE_THREADS", "1")
    assert main(compare_args(tmp_path / "one") + ["--baseline", str(base)]) == EXIT_OK
    monkeypatch.setenv("ADAPTUNE_THREADS", "3")
    assert main(compare_args(tmp_path / "three") + ["--baseline", str(base)]) == EXIT_OK
    rep = report(tmp_path / "one")
    assert [r["name"] for r in rep["table"]] == ["baseline", "adaptive"]
    assert len(rep["runs"]) == 8 and all(c["status"] == "ok" for c in rep["runs"])
    assert rep["table"][0]["epochs"] == 4.0 and rep["epoch_ratio"] == pytest.approx(rep["table"][1]["epochs"] / 4)
    assert without_timestamp(tmp_path / "one") == without_timestamp(tmp_path / "three")
    monkeypatch.setenv("ADAPTUNE_THREADS", "many")
    assert main(compare_args(tmp_path / "bad")) == EXIT_USAGE


def test_identical_arms_give_identical_rows():
    cfg = ex.load_config(None, ["train.max_epochs=3", "train.warmup_epochs=0", "model.hidden=6"])
    body = ex.compare(cfg, cfg, [TINY], [0, 1])
    a, b = body["table"]
    assert {k: v for k, v in a.items() if k != "name"} == {k: v for k, v in b.items() if k != "name"}


def test_failed_cell_is_recorded_and_sweep_continues(monkeypatch):
    cfg = ex.load_config(None, ["train.max_epochs=2", "train.warmup_epochs=0", "model.hidden=6"])
    real = ex.run

    def flaky(c):
        if c.seed == 1:
            raise RuntimeError("boom")
        return real(c)

    monkeypatch.setattr(ex, "run", flaky)
    body = ex.compare(cfg, cfg, [TINY], [0, 1])
    statuses = {(c["arm"], c["seed"]): c["status"] for c in body["runs"]}
    assert statuses[("baseline", 1)] == "failed" and statuses[("baseline", 0)] == "ok"
    assert body["table"][0]["n_failed"] == 1 and body["table"][0]["top1"] is not None
    ex.finalize_report(body)


def test_ablation_rows():
    full = ex.load_config(None, [], base=ex.ADAPTIVE_PRESET)
    names = [n for n, _ in ex.ablation_arms(full)]
    assert names == ["full", "w/o SAM", "w/o mutual learning", "w/o AugMix", "w/o NBD", "w/o AM-Softmax",
                     "w/o adaptive lr"]
    plain = ex.load_config(None, [], base=ex.BASELINE_PRESET)
    arms = dict(ex.ablation_arms(plain))
    assert arms["w/o SAM"] is None and arms["w/o AugMix"] is None and arms["w/o adaptive lr"] is None


def test_ablate_command(tmp_path):
    args = ["ablate", "--out", str(tmp_path), "--datasets", TINY, "--seeds", "0", "--override", "lr.source=fixed",
            "--override", "train.augment=augmix"] + FAST[2:]
    assert main(args) == EXIT_OK
    rep = report(tmp_path)
    assert len(rep["table"]) == 7 and rep["table"][0]["name"] == "full"
    # plateau_v2 still counts as adaptive lr, so every row applies
    assert all(r["applicable"] and r["n_runs"] == 1 for r in rep["table"])
    assert rep["table"][-1]["overrides"]["train.schedule_kind"] == "cosine"
