import json

import pytest

from guirobust import checkpoint, metrics
from guirobust.cli import main
from guirobust.runner import RunConfig
from guirobust.synthgui import Corpus

TINY_MODEL = {"patch_size": 16, "embed_dim": 16, "encoder_layers": 1, "decoder_layers": 1, "heads": 2}
TINY_TRAIN = {"epochs": 1, "batch_images": 4, "targets_per_image": 2, "warmup_steps": 2, "val_samples": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {"master_seed": 3, "corpus": str(root / "corpus"), "corpus_n": 24, "presets": ["mobile"],
           "checkpoint": str(root / "m.ckpt"), "model": TINY_MODEL, "train": TINY_TRAIN,
           "split": "val", "max_samples": 3, "out_dir": str(root / "eval")}
    path = root / "run.json"
    path.write_text(json.dumps(cfg))
    assert main(["corpus", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path)]) == 0
    return root, path


def test_run_config_round_trip():
    cfg = RunConfig(mode="targeted", budgets=[4096], attack={"steps": 3}, noise=[])
    assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg
    with pytest.raises(ValueError):
        RunConfig.from_dict({"master_sed": 1})
    with pytest.raises(ValueError):
        RunConfig(mode="blackbox")
    with pytest.raises(ValueError):
        RunConfig(attack={"steps": -1})


def test_corpus_command(tmp_path, capsys):
    assert main(["corpus", "--n", "6", "--seed", "7", "--presets", "mobile", "--out", str(tmp_path / "a")]) == 0
    assert "wrote 6 screens" in capsys.readouterr().out
    assert main(["corpus", "--n", "6", "--seed", "7", "--presets", "mobile", "--out", str(tmp_path / "b")]) == 0
    assert Corpus(tmp_path / "a").fingerprint() == Corpus(tmp_path / "b").fingerprint()


def test_usage_and_data_errors(tmp_path, capsys):
    assert main(["corpus", "--presets", "tablet", "--out", str(tmp_path / "c")]) == 1
    assert "tablet" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["eval", "--mode", "sideways"]) == 1
    assert main(["train", "--corpus", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"workerz": 2}))
    assert main(["eval", "--config", str(bad)]) == 1
    assert main(["report", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 2


def test_train_outputs(workspace, capsys):
    root, cfg = workspace
    ck = checkpoint.load(root / "m.ckpt")
    lines = (root / "m.ckpt.loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == ck.metadata["steps"] + 1
    assert "val_sr" in ck.metadata
    # same seed, same bytes
    assert main(["train", "--config", str(cfg), "--out", str(root / "again.ckpt")]) == 0
    assert (root / "again.ckpt").read_bytes() == (root / "m.ckpt").read_bytes()
    assert f"validation SR {ck.metadata['val_sr']:.4f}" in capsys.readouterr().out


def test_noise_identity_and_worker_determinism(workspace):
    root, cfg = workspace
    identity = [{"kind": "gaussian_noise", "params": {"sigma": 0.0}, "seed": 0},
                {"kind": "gaussian_blur", "params": {"radius": 0, "sigma_b": 1.0}, "seed": 0}]
    spec = json.loads(cfg.read_text())
    spec.update(mode="noise", noise=identity)
    cfg2 = root / "noise.json"
    cfg2.write_text(json.dumps(spec))
    outs = []
    for w in (1, 2):
        out = root / f"noise{w}"
        assert main(["eval", "--config", str(cfg2), "--workers", str(w), "--out", str(out)]) == 0
        outs.append(out)
    for name in ("records.jsonl", "report.csv", "report.json", "report.md", "run.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    recs = metrics.read_records(outs[0] / "records.jsonl")
    clean = {r.sample_id: r.prediction for r in recs if r.condition == "clean"}
    noisy = [r for r in recs if r.condition != "clean"]
    assert len(noisy) == 2 * len(clean) == 6
    assert all(r.prediction == clean[r.sample_id] for r in noisy)
    run = json.loads((outs[0] / "report.json").read_text())
    assert run["run_config"]["run_config"]["noise"] == identity


def test_zero_step_attack_changes_nothing(workspace):
    root, cfg = workspace
    out = root / "untargeted0"
    assert main(["eval", "--config", str(cfg), "--mode", "untargeted", "--steps", "0", "--out", str(out)]) == 0
    recs = metrics.read_records(out / "records.jsonl")
    clean = {r.sample_id: r.prediction for r in recs if r.condition == "clean"}
    att = [r for r in recs if r.condition == "untargeted"]
    assert att and all(r.prediction == clean[r.sample_id] for r in att)


def test_targeted_and_budget_report(workspace):
    root, cfg = workspace
    out = root / "targeted"
    assert main(["eval", "--config", str(cfg), "--mode", "targeted", "--steps", "2",
                 "--budgets", "8192,4096", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    names = {(t["block"], t["label"]) for t in report["tables"]}
    for res in ("max8192px", "max4096px"):
        assert (res, "targeted ASR") in names and (res, "clean") in names


def test_report_merge(workspace, tmp_path):
    root, _ = workspace
    single = tmp_path / "single"
    assert main(["report", str(root / "targeted" / "records.jsonl"), "--out", str(single)]) == 0
    # one input reproduces the eval tables
    a = json.loads((single / "report.json").read_text())["tables"]
    b = json.loads((root / "targeted" / "report.json").read_text())["tables"]
    assert a == b
    both = tmp_path / "both"
    assert main(["report", str(root / "targeted" / "records.jsonl"),
                 str(root / "untargeted0" / "records.jsonl"), "--out", str(both)]) == 0


def test_report_refuses_foreign_corpus(workspace, tmp_path):
    root, _ = workspace
    other = tmp_path / "other"
    other.mkdir()
    (other / "records.jsonl").write_bytes((root / "targeted" / "records.jsonl").read_bytes())
    info = json.loads((root / "targeted" / "run.json").read_text())
    info["corpus_fingerprint"] = "0" * 64
    (other / "run.json").write_text(json.dumps(info))
    assert main(["report", str(root / "targeted" / "records.jsonl"), str(other / "records.jsonl"),
                 "--out", str(tmp_path / "m")]) == 2
