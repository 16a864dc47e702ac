from __future__ import annotations

import json

import numpy as np
import pytest

from _support import random_czp_model
from czplab.cli import main
from czplab.czp import eval_log_s11
from czplab.geometry import DesignSpace, from_pgm, sample_design
from czplab.spectral import canonical_grid

SPACE = DesignSpace()


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def synthetic_dataset(tmp_path_factory):
    """Fast stand-in dataset: sampled designs with smooth random responses."""
    path = tmp_path_factory.mktemp("data") / "ds.jsonl"
    rng = np.random.default_rng(0)
    f = canonical_grid().values
    with open(path, "w") as fh:
        for i in range(120):
            d = sample_design(SPACE, [1, i])
            resp = -0.3 - 0.5 * np.exp(-((f - 2 - d.locations[2, 0] / 4) ** 2)) \
                + 0.01 * rng.standard_normal(69)
            fh.write(json.dumps({"index": i, "design": d.locations.tolist(),
                                 "response": resp.tolist(), "oracle": {}}) + "\n")
    return path


def test_verify_theorem_prints_verdict(tmp_path, capsys):
    code, out, _ = _run(capsys, "verify-theorem", "--n", 8, "--gamma", 0.1, "--out", tmp_path)
    assert code == 0
    assert "max relative error" in out and "PASS" in out
    res = json.loads((tmp_path / "theorem.json").read_text())
    assert res["max_rel_error"] <= 1e-3
    assert (tmp_path / "manifest.json").exists()


def test_fit_is_deterministic(tmp_path, capsys):
    resp = eval_log_s11(random_czp_model(3, k=2), canonical_grid())
    src = tmp_path / "resp.csv"
    src.write_text(resp.to_csv())
    args = ["fit", "--input", src, "--k", 4, "--restarts", 8, "--seed", 7]
    assert _run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert _run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    assert (tmp_path / "a/model.json").read_bytes() == (tmp_path / "b/model.json").read_bytes()


def test_render_writes_canonical_images(tmp_path, capsys):
    dfile = tmp_path / "d.json"
    dfile.write_text(sample_design(SPACE, 6).to_json())
    code, _, _ = _run(capsys, "render", "--design", dfile, "--out", tmp_path / "r")
    assert code == 0
    for name in ("x_boundary", "y_boundary", "interior"):
        assert from_pgm((tmp_path / "r" / f"{name}.pgm").read_bytes()).shape == (60, 300)
    lines = (tmp_path / "r/response.csv").read_text().strip().splitlines()
    assert len(lines) == 70
    assert (tmp_path / "r/response.svg").read_text().startswith("<svg")
    code, out, _ = _run(capsys, "rerun", "--manifest", tmp_path / "r/manifest.json",
                        "--out", tmp_path / "r2")
    assert code == 0 and json.loads(out.splitlines()[-1])["identical"]


def test_unknown_flag_is_a_json_usage_error(capsys):
    code, _, err = _run(capsys, "fit", "--no-such-flag", 1)
    assert code == 2
    assert json.loads(err)["error"] == "usage"


def test_missing_input_is_reported(tmp_path, capsys):
    code, _, err = _run(capsys, "fit", "--input", tmp_path / "nope.csv", "--out", tmp_path)
    assert code == 1
    assert json.loads(err)["error"] == "invalid-argument"


def test_toml_config_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("n = 4\ngamma = 0.5\ntol = 0.5\n")
    code, _, _ = _run(capsys, "verify-theorem", "--config", cfg, "--gamma", 0.4,
                      "--out", tmp_path / "o")
    assert code == 0
    manifest = json.loads((tmp_path / "o/manifest.json").read_text())
    assert manifest["config"]["n"] == 4 and manifest["config"]["gamma"] == 0.4
    assert manifest["config"]["tol"] == 0.5


def test_unknown_toml_key_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("bogus = 1\n")
    code, _, err = _run(capsys, "verify-theorem", "--config", cfg, "--out", tmp_path)
    assert code == 1 and "bogus" in err


def test_output_directory_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CZPLAB_OUT", str(tmp_path / "env"))
    assert _run(capsys, "exact-czp", "--n", 4)[0] == 0
    assert (tmp_path / "env/rational.json").exists()


def test_exact_czp_for_design(tmp_path, capsys):
    dfile = tmp_path / "d.json"
    dfile.write_text(sample_design(SPACE, 2).to_json())
    code, out, _ = _run(capsys, "exact-czp", "--design", dfile, "--out", tmp_path / "e")
    assert code == 0
    summary = json.loads(out)
    assert summary["czp_k"] >= 1
    assert (tmp_path / "e/s11_czp.json").exists()


def test_gen_data_worker_count_and_rerun(tmp_path, capsys):
    base = ["gen-data", "--n", 3, "--seed", 2]
    assert _run(capsys, *base, "--workers", 1, "--out", tmp_path / "w1")[0] == 0
    assert _run(capsys, *base, "--workers", 2, "--out", tmp_path / "w2")[0] == 0
    a = (tmp_path / "w1/dataset.jsonl").read_bytes()
    assert a == (tmp_path / "w2/dataset.jsonl").read_bytes()
    code, out, _ = _run(capsys, "rerun", "--manifest", tmp_path / "w2/manifest.json",
                        "--out", tmp_path / "w3")
    assert code == 0 and json.loads(out.splitlines()[-1])["identical"]


def test_train_eval_search_pipeline(tmp_path, capsys, synthetic_dataset):
    small = ["--k", 4, "--tokens", 4, "--features", 4, "--trunk", "16", "--epochs", 2,
             "--batch-size", 32]
    code, _, _ = _run(capsys, "train", "--data", synthetic_dataset, "--head", "compare", *small,
                      "--out", tmp_path / "t")
    assert code == 0
    summary = json.loads((tmp_path / "t/train_summary.json").read_text())
    assert set(summary) == {"raw", "czp"}
    assert summary["czp"]["smoothness"]["samples"] == 12
    ckpt = tmp_path / "t/params_czp.ckpt"

    code, _, _ = _run(capsys, "eval", "--params", ckpt, "--data", synthetic_dataset,
                      "--out", tmp_path / "e")
    assert code == 0
    res = json.loads((tmp_path / "e/eval.json").read_text())
    assert res["samples"] == 12 and res["head"] == "czp"
    rep = json.loads((tmp_path / "t/report_czp.json").read_text())
    assert res["mean_loss"] == pytest.approx(rep["test_loss"], rel=1e-12)

    code, _, _ = _run(capsys, "search", "--params", ckpt, "--budget", 40, "--population", 20,
                      "--top-k", 2, "--out", tmp_path / "s")
    assert code == 0
    rows = (tmp_path / "s/verification.csv").read_text().strip().splitlines()
    assert rows[0].split(",")[:5] == ["design_id", "oracle_r_low", "oracle_r_high",
                                      "oracle_total", "success"]
    assert len(rows) == 3
    assert len((tmp_path / "s/episodes.csv").read_text().strip().splitlines()) == 41

    dfile = tmp_path / "d.json"
    dfile.write_text(sample_design(SPACE, 1).to_json())
    code, _, _ = _run(capsys, "render", "--design", dfile, "--params", ckpt,
                      "--out", tmp_path / "r")
    assert code == 0
    assert len(list((tmp_path / "r").glob("attention_*.pgm"))) == 4

    for sub in ("t", "s"):
        code, out, _ = _run(capsys, "rerun", "--manifest", tmp_path / sub / "manifest.json",
                            "--out", tmp_path / f"{sub}2")
        assert code == 0 and json.loads(out.splitlines()[-1])["identical"], sub
