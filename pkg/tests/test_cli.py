import json

import pytest

from slaterl.cli import DEFAULTS, main, resolve_config
from slaterl.errors import ConfigurationError
from slaterl.logged_data import parse_log

SMALL = ["--set", "n_items=15", "--set", "n_chains=2", "--set", "n_sessions=40", "--set", "max_pages=2"]


def run(tmp_path, *argv):
    return main(list(argv) + ["--out", str(tmp_path)])


def test_config_layers(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n_items": 12, "gamma": 0.9}))
    cfg = resolve_config(str(p), ["gamma=0.5", "world=long-term"], seed=4)
    assert cfg["n_items"] == 12 and cfg["gamma"] == 0.5 and cfg["seed"] == 4 and cfg["world"] == "long-term"
    assert set(cfg) == set(DEFAULTS)
    with pytest.raises(ConfigurationError):
        resolve_config(None, ["bogus=1"])
    p.write_text(json.dumps({"unknown_key": 1}))
    with pytest.raises(ConfigurationError):
        resolve_config(str(p))
    with pytest.raises(ConfigurationError):
        resolve_config(None, ["n_items=1.5"])


def test_unknown_subcommand_and_error_record(tmp_path, capsys):
    assert run(tmp_path, "nonsense") == 2
    rec = json.loads(capsys.readouterr().err)
    assert rec["error"] == "UsageError" and rec["subcommand"] == "nonsense"


def test_missing_input_file(tmp_path, capsys):
    assert run(tmp_path, "transform", "--log", str(tmp_path / "nope.tsv"), "--catalog", "x") == 1
    rec = json.loads(capsys.readouterr().err)
    assert rec["error"] == "FileNotFoundError"
    assert json.loads((tmp_path / "error.json").read_text()) == rec


def test_gen_validate_transform(tmp_path):
    assert run(tmp_path, "gen", *SMALL) == 0
    resolved = json.loads((tmp_path / "gen.config.json").read_text())
    assert resolved["n_items"] == 15 and resolved["max_pages"] == 2
    rows = parse_log((tmp_path / "log.tsv").read_text())
    assert len({r.session_id for r in rows}) == 40
    assert run(tmp_path, "validate", *SMALL, "--log", str(tmp_path / "log.tsv")) == 0
    assert json.loads((tmp_path / "validation.json").read_text()) == {"rows": len(rows), "errors": []}
    assert run(tmp_path, "transform", *SMALL, "--log", str(tmp_path / "log.tsv"),
               "--catalog", str(tmp_path / "catalog.json")) == 0
    lines = (tmp_path / "samples.jsonl").read_text().splitlines()
    assert len(lines) == 40 * 2 * 9


def test_validate_reports_bad_lines(tmp_path, capsys):
    assert run(tmp_path, "gen", *SMALL) == 0
    text = (tmp_path / "log.tsv").read_text().splitlines()
    parts = text[1].split("\t")
    parts[4] = "0 0 0 0 0 0 0 0 1"
    text[1] = "\t".join(parts)
    (tmp_path / "bad.tsv").write_text("\n".join(text) + "\n")
    assert run(tmp_path, "validate", *SMALL, "--log", str(tmp_path / "bad.tsv")) == 1
    rep = json.loads((tmp_path / "validation.json").read_text())
    assert rep["errors"][0]["line"] == 2 and rep["errors"][0]["kind"] == "ValidityError"
    assert json.loads(capsys.readouterr().err)["line"] == 2


def test_split_modes(tmp_path):
    assert run(tmp_path, "gen", *SMALL, "--set", "rl_fraction=0.25") == 0
    common = ["--log", str(tmp_path / "log.tsv"), "--catalog", str(tmp_path / "catalog.json")]
    assert run(tmp_path, "split", *SMALL, "--set", "split_mode=sl-rl", *common) == 0
    train = parse_log((tmp_path / "train_log.tsv").read_text())
    test = parse_log((tmp_path / "test_log.tsv").read_text())
    assert {r.behavior_policy_id for r in train} == {"sl-softmax"}
    assert {r.behavior_policy_id for r in test} == {"rl-softmax"}
    assert run(tmp_path, "split", *SMALL, "--set", "split_mode=by-time", "--set", "split_cutoff=0", *common) == 2


def test_eval_online_appends_run_log(tmp_path):
    assert run(tmp_path, "gen", *SMALL) == 0
    args = ["eval-online", *SMALL, "--set", "eval_episodes=5", "--world", str(tmp_path / "world.json"),
            "--policy", "uniform"]
    assert run(tmp_path, *args) == 0
    assert run(tmp_path, *args) == 0
    recs = [json.loads(x) for x in (tmp_path / "runlog.jsonl").read_text().splitlines()]
    assert len(recs) == 2 and recs[0] == recs[1] and recs[0]["episodes"] == 5
    assert (tmp_path / "eval_online.txt").read_text().startswith("Policy\tReward\nuniform\t")
