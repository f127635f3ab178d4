import json
import math
import os
import subprocess
from pathlib import Path

import numpy as np
import pytest

import headlens

ROOT = Path(__file__).resolve().parents[2]
DATA = ROOT / "data"
CLI = os.environ.get("HEADLENS_CLI")


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "model"
    head = headlens.build_toy(DATA / "concepts", DATA / "translation_fr.json", out)
    return out, head


@pytest.fixture()
def config(tmp_path, toy):
    cfg = json.loads((ROOT / "configs" / "toy.json").read_text())
    cfg["model"] = str(toy[0])
    cfg["datasets"] = {k: str(DATA / "concepts" / f"{k}.json") for k in ("antonym", "translation")}
    cfg["translation_table"] = str(DATA / "translation_fr.json")
    cfg["n_prompts"] = 3
    cfg["ambiguous_prompts"] = 2
    cfg["output_dir"] = str(tmp_path / "runs")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_planted_model_answers_a_prompt(toy):
    model = headlens.Model.load(toy[0])
    assert toy[1] == "L2H0"
    assert model.config["n_layers"] == 4
    tokens = model.encode("Q: hot\nA: cold\n\nQ: big\nA: small\n\nQ: fast\nA: ")
    probs = model.next_token_probs(tokens)
    assert probs.dtype == np.float32
    assert math.isclose(float(probs.sum()), 1.0, rel_tol=1e-5)
    assert model.decode(int(probs.argmax())) == "slow"
    heads = model.head_outputs(tokens)
    assert heads.shape == (4, 8, model.config["d_model"])
    same = model.inject(tokens, 1, np.ones(model.config["d_model"], np.float32), 0.0)
    assert np.array_equal(same, probs)


def test_statistics():
    rsm = np.array([[1, 0.9, 0.1], [0.9, 1, 0.2], [0.1, 0.2, 1]])
    dm = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    assert headlens.spearman(rsm, dm) == pytest.approx(math.sqrt(3) / 2)
    assert headlens.spearman(np.ones((3, 3)), dm) is None
    assert headlens.hypergeom_tail(1024, 50, 12) < 0.05
    assert headlens.hypergeom_tail(10, 3, 0) == 1.0
    kl = headlens.kl_divergence([0.5, 0.3, 0.2], [0.4, 0.4, 0.2])
    assert kl == pytest.approx(0.5 * math.log(1.25) + 0.3 * math.log(0.75), abs=1e-12)


def test_validate_reports_pointers(config, tmp_path):
    assert headlens.validate_config(config) == []
    bad = json.loads(config.read_text())
    bad["k_grid"] = [0]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert [p for p, _ in headlens.validate_config(path)] == ["/k_grid/0"]
    with pytest.raises(headlens.HeadlensError, match="/k_grid/0"):
        headlens.config_hash(path)


def test_stage_runs_and_caches(config):
    h = headlens.config_hash(config)
    assert h == headlens.config_hash(config, ["output_dir=/elsewhere"])
    out = Path(headlens.run_stage(config, "capture"))
    assert out.name == "capture" and out.parent.name == h
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == h
    with pytest.raises(headlens.HeadlensError, match="run `headlens aie` first"):
        headlens.run_stage(config, "vectors")


@pytest.mark.skipif(not CLI, reason="HEADLENS_CLI not set")
def test_cli_validate(config):
    ok = subprocess.run([CLI, "validate", "--config", str(config)], capture_output=True, text=True)
    assert ok.returncode == 0 and ok.stdout.startswith("ok ")
    bad = subprocess.run([CLI, "validate", "--config", str(config), "--stage-override", "alpha_grid=[]"],
                         capture_output=True, text=True)
    assert bad.returncode == 1 and "/alpha_grid" in bad.stdout
