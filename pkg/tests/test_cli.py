from __future__ import annotations

import json

import numpy as np

from peerchoice.cli import main
from peerchoice.model import Network, load_model, save_model, tabulate


def _run(*argv) -> int:
    return main([str(a) for a in argv])


def test_missing_input_exits_with_two(tmp_path):
    assert _run("validate", "--model", tmp_path / "nope.json", "--out", tmp_path / "o") == 2
    assert _run("identify", "--ccp", tmp_path / "nope.csv", "--out", tmp_path / "o") == 2


def test_single_agent_is_rejected(tmp_path):
    assert _run("generate", "--agents", 1, "--out", tmp_path) == 1


def test_failing_model_exits_with_one(tmp_path):
    net = Network.from_sets(2, [(1,), ()], [(1,), ()])
    bad = tabulate(1, net, lambda a, v, n: 0.3 + 0.4 * n, lambda a, alts, c: np.array([1.0, 1.0 + sum(c)]))
    save_model(bad, tmp_path / "bad.json")
    assert _run("validate", "--model", tmp_path / "bad.json", "--out", tmp_path / "v") == 1
    report = json.loads((tmp_path / "v" / "validation.json").read_text())
    assert report


def test_recover_needs_exactly_one_source(tmp_path):
    assert _run("recover-ccp", "--out", tmp_path) == 1


def test_generate_recover_identify(tmp_path):
    gen, rec, ide = tmp_path / "gen", tmp_path / "rec", tmp_path / "id"
    assert _run("generate", "--agents", 4, "--menu", 2, "--identifiable", "--seed", 3, "--out", gen) == 0
    assert _run("validate", "--model", gen / "model.json", "--out", tmp_path / "val") == 0
    assert _run("recover-ccp", "--model", gen / "model.json", "--out", rec) == 0
    assert _run("identify", "--ccp", rec / "ccp.csv", "--out", ide) == 0
    truth = load_model(gen / "model.json").network
    found = json.loads((ide / "identified.json").read_text())
    assert [tuple(x) for x in found["nc"]] == list(truth.nc)
    assert [tuple(x) for x in found["nr"]] == list(truth.nr)
    assert (ide / "evidence.jsonl").read_text().count("\n") > 0


def test_manifest_records_inputs_and_settings(tmp_path):
    gen, sim = tmp_path / "gen", tmp_path / "sim"
    assert _run("generate", "--benchmark", "small", "--out", gen) == 0
    assert _run("simulate", "--model", gen / "model.json", "--horizon", 50, "--seed", 9,
                "--threads", 4, "--out", sim) == 0
    doc = json.loads((sim / "run_manifest.json").read_text())
    assert doc["command"] == "simulate"
    assert doc["seeds"] == {"seed": 9}
    assert doc["inputs"]["model"]["name"] == "model.json"
    assert len(doc["inputs"]["model"]["sha256"]) == 64
    assert doc["settings"]["horizon"] == 50.0
    for hidden in ("out", "threads", "model", "func"):
        assert hidden not in doc["settings"]
    assert set(doc["versions"]) == {"peerchoice", "numpy", "scipy", "python"}
