import json

import numpy as np
import pytest
import yaml

from photoclick.cli import main

CONFIG = {
    "model": {"family": "tls", "params": {"omega": 1.0}},
    "prior": {"delta": [0.0, 2.0]},
    "n_clicks": 10,
    "library_size": 300,
    "seed": 3,
    "grid": {"points": 21},
    "abc": {"target_count": 20},
    "train": {"frontend": "histogram", "epochs": 3, "loss": "nll"},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(CONFIG))
    assert main(["--config", str(cfg), "simulate", "--out", str(d / "lib.pclb")]) == 0
    assert main(["--config", str(cfg), "--set", "library_size=12", "simulate", "--out", str(d / "test.pclb"),
                 "--start-index", "100000"]) == 0
    assert main(["--config", str(cfg), "train", "--library", str(d / "lib.pclb"), "--out", str(d / "net.pcnm")]) == 0
    return d, str(cfg)


def test_simulate_writes_library_and_manifest(work):
    d, _ = work
    assert (d / "lib.pclb").read_bytes()[:4] == b"PCLB"
    manifest = json.loads((d / "lib.pclb.manifest.json").read_text())
    assert manifest["command"] == "simulate" and len(manifest["config_hash"]) == 12


def test_simulate_refuses_to_overwrite(work):
    d, cfg = work
    assert main(["--config", cfg, "simulate", "--out", str(d / "lib.pclb")]) == 2


def test_abc_command(work):
    d, cfg = work
    out = d / "abc.json"
    assert main(["--config", cfg, "abc", "--library", str(d / "lib.pclb"), "--records", str(d / "test.pclb"),
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert len(res) == 12 and res[0]["n_accepted"] >= 20


def test_infer_and_wrong_click_count(work):
    d, cfg = work
    assert main(["--config", cfg, "infer", "--model", str(d / "net.pcnm"), "--records", str(d / "test.pclb"),
                 "--out", str(d / "pred.csv")]) == 0
    header = (d / "pred.csv").read_text().splitlines()[0]
    assert header == "delta,sigma_delta"
    (d / "short.json").write_text(json.dumps([[1.0, 2.0, 0.5]]))
    assert main(["--config", cfg, "infer", "--model", str(d / "net.pcnm"), "--records", str(d / "short.json"),
                 "--out", str(d / "x.csv")]) == 2


def test_exact_posterior_command(work):
    d, cfg = work
    (d / "obs.json").write_text(json.dumps({"records": [{"waiting_times": [1.0, 2.5, 0.7]}]}))
    assert main(["--config", cfg, "exact-posterior", "--records", str(d / "obs.json"), "--out", str(d / "ex.json")]) == 0
    post = json.loads((d / "ex.json").read_text())[0]
    assert np.isclose(sum(post["weights"]), 1.0)


def test_evaluate_and_report(work):
    d, cfg = work
    res = d / "results"
    assert main(["--config", cfg, "evaluate", "--suite", "rmse", "--test", str(d / "test.pclb"), "--library",
                 str(d / "lib.pclb"), "--methods", "abc", str(d / "net.pcnm"), "--out", str(res)]) == 0
    assert (res / "rmse_abc.csv").exists() and (res / "rmse_net.csv").exists()
    assert main(["--config", cfg, "evaluate", "--suite", "pca", "--test", str(d / "test.pclb"), "--library",
                 str(d / "lib.pclb"), "--out", str(res)]) == 0
    assert "corr_pc1_total_time" in json.loads((res / "summary_pca.json").read_text())
    (d / "history_net.csv").rename(res / "history_net.csv")
    assert main(["--config", cfg, "report", "--results", str(res), "--out", str(d / "fig")]) == 0
    pngs = sorted(p.name for p in (d / "fig").glob("*.png"))
    assert "rmse.png" in pngs and "history_net.png" in pngs and "estimates_abc.png" in pngs


def test_evaluate_rejects_overlapping_test_set(work):
    d, cfg = work
    assert main(["--config", cfg, "evaluate", "--test", str(d / "lib.pclb"), "--library", str(d / "lib.pclb"),
                 "--out", str(d / "r2")]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert main(["--config", str(tmp_path / "missing.yaml"), "report", "--results", str(tmp_path)]) == 2
    assert main(["--set", "nonsense", "report", "--results", str(tmp_path)]) == 2
    assert main(["--set", "model.family=laser", "report", "--results", str(tmp_path)]) == 2
