import json

import pytest

from cclh.cli import main

FAST = ["--hidden", "8", "--epochs", "2"]


@pytest.fixture(scope="module")
def model_dir(small_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", str(small_dir), str(out), *FAST]) == 0
    return out


def test_generate(tmp_path):
    scenario = tmp_path / "s.json"
    scenario.write_text(json.dumps({"cases_per_pair": 1, "window": 120, "n_microservices": 2}))
    assert main(["generate", str(scenario), str(tmp_path / "a")]) == 0
    assert main(["generate", str(scenario), str(tmp_path / "b")]) == 0
    for name in ("deployment.json", "metrics.csv", "traces.csv", "logs.csv", "cases.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_missing_scenario(tmp_path, capsys):
    assert main(["generate", str(tmp_path / "nope.json"), str(tmp_path / "o")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_bad_scenario_field(tmp_path):
    scenario = tmp_path / "s.json"
    scenario.write_text(json.dumps({"replicas": 0}))
    assert main(["generate", str(scenario), str(tmp_path / "o")]) == 2


def test_manifest_contract(model_dir):
    manifest = json.loads((model_dir / "manifest.json").read_text())
    assert manifest["theta"] == 0.6
    assert manifest["hidden"] == 8
    assert manifest["n_types"] == 5
    assert "trigger_epoch" in manifest
    header = (model_dir / "training_log.csv").read_text().splitlines()[0]
    assert header == "epoch,loss_total,loss_rcl,loss_fti,hr1_train,phase,seconds"


def test_unreachable_theta_warns(small_dir, tmp_path, capsys):
    assert main(["train", str(small_dir), str(tmp_path), *FAST, "--theta", "1.1"]) == 0
    assert "trigger never fired" in capsys.readouterr().err


def test_theta_sweep(small_dir, tmp_path):
    assert main(["train", str(small_dir), str(tmp_path), "--hidden", "8", "--epochs", "1",
                 "--theta-sweep", "0.3,0.5,0.7"]) == 0
    for theta in ("0.3", "0.5", "0.7"):
        assert (tmp_path / f"theta_{theta}" / "report.json").exists()
    assert len(json.loads((tmp_path / "sweep.json").read_text())) == 3


def test_config_file_and_flag_precedence(small_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden": 4, "epochs": 1, "theta": 0.2}))
    assert main(["--config", str(cfg), "train", str(small_dir), str(tmp_path / "m"), "--theta", "0.9"]) == 0
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert manifest["hidden"] == 4 and manifest["theta"] == 0.9


def test_seed_from_environment(small_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("CCLH_SEED", "7")
    assert main(["split", str(small_dir), str(tmp_path)]) == 0
    assert json.loads((tmp_path / "split.json").read_text())["seed"] == 7
    monkeypatch.setenv("CCLH_SEED", "seven")
    assert main(["split", str(small_dir), str(tmp_path)]) == 2


def test_diagnose(model_dir, small_dir, tmp_path):
    assert main(["diagnose", str(model_dir), str(small_dir), str(tmp_path), "--jobs", "2",
                 "--cases", "case-0001,case-0002"]) == 0
    docs = [json.loads(p.read_text()) for p in sorted(tmp_path.glob("*.json"))]
    assert [d["case_id"] for d in docs] == ["case-0001", "case-0002"]
    for d in docs:
        assert sum(d["type_probs"].values()) == pytest.approx(1.0, abs=1e-6)
        assert d["culprit"] == d["ranking"][0]


def test_corrupt_parameters(model_dir, small_dir, tmp_path):
    broken = tmp_path / "m"
    broken.mkdir()
    for p in model_dir.rglob("*"):
        if p.is_file():
            dest = broken / p.relative_to(model_dir)
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(p.read_bytes())
    victim = next((broken / "params").iterdir())
    victim.write_bytes(b"\0\0")
    assert main(["diagnose", str(broken), str(small_dir), str(tmp_path / "d")]) == 3


def test_evaluate(model_dir, small_dir, tmp_path):
    assert main(["evaluate", str(model_dir), str(small_dir), str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert all(0 <= v <= 1 for v in doc["hr"].values())
    assert 0 <= doc["f1"] <= 1
    assert doc["meta"]["split"] == "random"


def test_unseen_split_noted(small_dir, tmp_path):
    model = tmp_path / "m"
    assert main(["train", str(small_dir), str(model), *FAST, "--split", "unseen_component"]) == 0
    assert main(["evaluate", str(model), str(small_dir), str(tmp_path / "r")]) == 0
    meta = json.loads((tmp_path / "r" / "report.json").read_text())["meta"]
    assert meta["split"] == "unseen_component"
    assert meta["distinct_test_culprits"] > 0 and meta["distinct_train_culprits"] > 0


def test_preprocess(small_dir, tmp_path):
    assert main(["preprocess", str(small_dir), str(tmp_path)]) == 0
    for name in ("schema.json", "templates.json", "norm_stats.json", "tensors.npz"):
        assert (tmp_path / name).exists()


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["train", str(tmp_path / "missing"), str(tmp_path / "m")]) == 2
    assert main(["split", str(tmp_path), str(tmp_path), "--ratio", "1.5"]) == 2
