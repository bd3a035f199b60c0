"""CLI wiring checks: parser coverage, mandatory-seed enforcement, config
file fallback, and the fast corpus/mix paths end to end through main().
Model-heavy commands (train, eval, bench, plan) are exercised at the
library level elsewhere; here we only verify their argument plumbing."""

import json

import pytest

from localm.cli import CliError, _regions, build_parser, main
from localm.corpus import CONTINENTS


def _run(*argv):
    return main(list(argv))


def test_parser_covers_the_documented_tree():
    parser = build_parser()
    for argv in [
        ["corpus", "synth", "--help"], ["corpus", "validate", "--help"],
        ["corpus", "split", "--help"], ["mix", "build", "--help"],
        ["train", "pretrain", "--help"], ["train", "sft", "--help"],
        ["eval", "ppl", "--help"], ["eval", "matrix", "--help"],
        ["eval", "loo", "--help"], ["bench", "run", "--help"],
        ["bench", "intersect", "--help"], ["plan", "run", "--help"],
        ["plan", "report", "--help"],
    ]:
        with pytest.raises(SystemExit) as exc:
            parser.parse_args(argv)
        assert exc.value.code == 0, argv


def test_regions_spec_parsing():
    assert _regions("Europe") == ("local", frozenset({"Europe"}))
    kind, regions = _regions("all")
    assert kind == "global" and regions == frozenset(CONTINENTS)
    kind, regions = _regions("loo:Asia")
    assert kind == "loo-Asia" and regions == frozenset(CONTINENTS) - {"Asia"}
    assert _regions("Africa,America,Asia,Europe")[0] == "global"
    with pytest.raises(SystemExit):
        _regions("Atlantis")
    with pytest.raises(SystemExit):
        _regions("loo:Atlantis")
    with pytest.raises(SystemExit):
        _regions("Africa,Asia")  # neither one region nor all four


def test_stochastic_commands_require_a_seed(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        _run("corpus", "synth", "--out", str(tmp_path / "c.jsonl"),
             "--docs-per-region", "12", "--facts-per-region", "2")
    assert exc.value.code == 2
    assert "--seed is required" in capsys.readouterr().err


def test_corpus_round_trip_via_main(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    assert _run("corpus", "synth", "--out", str(corpus),
                "--docs-per-region", "12", "--facts-per-region", "2",
                "--seed", "0") == 0
    assert _run("corpus", "validate", "--in", str(corpus)) == 0
    splits = tmp_path / "splits.json"
    assert _run("corpus", "split", "--in", str(corpus), "--out", str(splits),
                "--test-per-region", "2", "--val-docs", "2",
                "--global-per-region", "1", "--seed", "0") == 0
    ids = json.loads(splits.read_text())["ids"]
    assert set(ids) == ({"train", "val", "global_test"} |
                        {f"test_{r}" for r in CONTINENTS})
    assert len(ids["global_test"]) == 4
    capsys.readouterr()


def test_validate_fails_on_bad_lines(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x"}\nnot json\n')
    assert _run("corpus", "validate", "--in", str(bad)) == 1
    out = capsys.readouterr().out
    assert "accepted 0/2" in out


def test_mix_build_writes_manifest(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    _run("corpus", "synth", "--out", str(corpus), "--docs-per-region", "12",
         "--facts-per-region", "2", "--seed", "1")
    out = tmp_path / "mix.json"
    assert _run("mix", "build", "--in", str(corpus), "--regions", "all",
                "--variant", "url_country", "--steps", "4",
                "--micro-batch", "2", "--seq-len", "256",
                "--seed", "3", "--out", str(out)) == 0
    m = json.loads(out.read_text())
    assert m["variant"] == "url_country"
    assert m["token_budget"] == 4 * 2 * 256
    assert m["regions"] == sorted(CONTINENTS)
    assert m["docs_emitted"] > 0
    capsys.readouterr()


def test_config_file_supplies_defaults_and_flags_win(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "docs_per_region": 12,
                               "facts_per_region": 2}))
    out = tmp_path / "c.jsonl"
    assert _run("--config", str(cfg), "corpus", "synth",
                "--out", str(out)) == 0
    n_from_cfg = len(out.read_text().splitlines())
    assert _run("--config", str(cfg), "corpus", "synth", "--out", str(out),
                "--docs-per-region", "16") == 0
    assert len(out.read_text().splitlines()) > n_from_cfg
    capsys.readouterr()


def test_config_file_must_be_an_object(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("[1, 2]")
    with pytest.raises(SystemExit):
        _run("--config", str(cfg), "corpus", "validate", "--in", "x")


def test_unknown_variant_and_experiment_are_rejected(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    _run("corpus", "synth", "--out", str(corpus), "--docs-per-region", "12",
         "--facts-per-region", "2", "--seed", "1")
    with pytest.raises(SystemExit):
        _run("mix", "build", "--in", str(corpus), "--regions", "all",
             "--variant", "meta-everything", "--steps", "1", "--seed", "0",
             "--out", str(tmp_path / "m.json"))
    with pytest.raises(SystemExit):
        _run("plan", "run", "--experiment", "exp7", "--root",
             str(tmp_path / "r"), "--seeds", "1")
    capsys.readouterr()


def test_missing_file_is_a_clean_error_not_a_traceback(tmp_path, capsys):
    rc = _run("corpus", "validate", "--in", str(tmp_path / "absent.jsonl"))
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_bench_intersect_requires_reports(capsys):
    with pytest.raises(SystemExit):
        _run("bench", "intersect", "--out", "/tmp/unused-intersect")
    assert "--report" in capsys.readouterr().err
