#!/usr/bin/env python3
"""
Tests for the hades command line: subcommands, config files, exit codes
"""

import argparse
import json
import os

import pytest

from errors import ConfigError
from hades_cli import RunConfig, build_parser, load_run_config, main, resolve_seed
from model import PRESETS, config_hash, count_flops, count_params


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_params_on_370m_preset(capsys):
    code, out, _ = run(["params", "--preset", "paper-370m"], capsys)
    assert code == 0
    assert "150,407,424" in out
    assert "217,939,200" in out
    assert "150,407,328" in out


def test_init_config_then_params_round_trip(tmp_path, capsys):
    config = tmp_path / "paper.json"
    assert run(["init-config", "--preset", "paper-370m", "--out", str(config)], capsys)[0] == 0
    from_file = tmp_path / "from_file.json"
    code, out_file, _ = run(["params", "--config", str(config), "--json", str(from_file)], capsys)
    assert code == 0
    code, out_preset, _ = run(["params", "--preset", "paper-370m"], capsys)
    assert out_file.splitlines()[:-1] == out_preset.splitlines()
    expected = json.loads(json.dumps(count_params(PRESETS["paper-370m"]).to_dict(), default=lambda v: v.item()))
    written = json.loads(from_file.read_text())
    assert written.pop("config_hash") == config_hash({"model": PRESETS["paper-370m"].to_dict()})
    assert written == expected


def test_init_config_is_flat_and_loadable(tmp_path, capsys):
    config = tmp_path / "tiny.json"
    run(["init-config", "--preset", "desk-tiny", "--out", str(config)], capsys)
    data = json.loads(config.read_text())
    assert data["d"] == 16 and data["seq_len"] == 8 and data["task"] == "copy"
    loaded = load_run_config(str(config))
    assert loaded.model == PRESETS["desk-tiny"]
    assert loaded.to_flat() == data


def test_flops_json_mirror(tmp_path, capsys):
    out_json = tmp_path / "flops.json"
    code, out, _ = run(["flops", "--preset", "paper-370m", "--seqlen", "128", "--json", str(out_json)], capsys)
    assert code == 0
    report = count_flops(PRESETS["paper-370m"], 128)
    assert f"{report.ratio:.4f}" in out
    written = json.loads(out_json.read_text())
    assert written["ratio"] == pytest.approx(report.ratio)
    assert written["config_hash"] == config_hash({"model": PRESETS["paper-370m"].to_dict(), "seqlen": 128})


def test_gradcheck_seed_seven_passes(capsys):
    code, out, _ = run(["gradcheck", "--seed", "7"], capsys)
    assert code == 0
    assert "[OK]" in out
    assert "[WARNING]" not in out


def test_unknown_config_key_exits_two(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"d": 16, "heads": 4}))
    code, _, err = run(["params", "--config", str(config)], capsys)
    assert code == 2
    assert "heads" in err


def test_invalid_constraint_exits_two(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"M": 4, "H": 6, "S": 1}))
    assert run(["params", "--config", str(config)], capsys)[0] == 2


def test_malformed_json_exits_two(tmp_path, capsys):
    config = tmp_path / "broken.json"
    config.write_text("{not json")
    assert run(["params", "--config", str(config)], capsys)[0] == 2


def test_missing_files_exit_three(tmp_path, capsys):
    assert run(["params", "--config", str(tmp_path / "absent.json")], capsys)[0] == 3
    assert run(["generate", "--ckpt", str(tmp_path / "absent.ckpt"), "--prompt", "hi"], capsys)[0] == 3


def test_corrupt_checkpoint_exits_three(tmp_path, capsys):
    ckpt = tmp_path / "junk.ckpt"
    ckpt.write_bytes(b"garbage bytes")
    assert run(["passkey", "--ckpt", str(ckpt)], capsys)[0] == 3


def test_unknown_flag_is_an_error():
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["params", "--bogus"])
    assert excinfo.value.code == 2


def test_every_subcommand_has_help():
    parser = build_parser()
    for command in ("init-config", "train", "generate", "passkey", "analyze", "params", "flops", "gradcheck"):
        with pytest.raises(SystemExit) as excinfo:
            parser.parse_args([command, "--help"])
        assert excinfo.value.code == 0


def test_every_option_is_documented():
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for command, subparser in sub.choices.items():
        for action in subparser._actions:
            if isinstance(action, argparse._HelpAction):
                continue
            assert action.help, f"{command} {action.dest} has no help text"


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("HADES_SEED", raising=False)
    assert resolve_seed(None, 4) == 4
    monkeypatch.setenv("HADES_SEED", "11")
    assert resolve_seed(None, 4) == 11
    assert resolve_seed(2, 4) == 2
    monkeypatch.setenv("HADES_SEED", "eleven")
    with pytest.raises(ConfigError):
        resolve_seed(None, 4)


def test_run_config_rejects_odd_copy_length():
    data = RunConfig.from_preset("desk-tiny").to_flat()
    data["seq_len"] = 7
    with pytest.raises(ConfigError):
        RunConfig.from_flat(data)


def test_desk_copy_config_uses_small_distinct_alphabet(tmp_path, capsys):
    config = tmp_path / "copy.json"
    assert run(["init-config", "--preset", "desk-copy", "--out", str(config)], capsys)[0] == 0
    data = json.loads(config.read_text())
    assert (data["copy_alphabet"], data["copy_distinct"], data["seq_len"]) == (16, True, 16)
    assert data["epsilon"] == 1.0
    data["copy_alphabet"] = 4
    with pytest.raises(ConfigError):
        RunConfig.from_flat(data)
    data["copy_alphabet"] = 256
    with pytest.raises(ConfigError):
        RunConfig.from_flat(data)


def test_train_generate_analyze_passkey_pipeline(tmp_path, capsys):
    config = tmp_path / "tiny.json"
    out_dir = tmp_path / "run"
    run(["init-config", "--preset", "desk-tiny", "--out", str(config)], capsys)
    code, out, _ = run(["train", "--config", str(config), "--steps", "2", "--out-dir", str(out_dir),
                        "--seed", "3", "--quiet"], capsys)
    assert code == 0
    assert "TRAINING COMPLETE!" in out
    assert sorted(os.listdir(out_dir)) == ["checkpoint_final.ckpt", "checkpoint_step0.ckpt", "metrics.csv"]
    ckpt = str(out_dir / "checkpoint_final.ckpt")

    code, out, _ = run(["generate", "--ckpt", ckpt, "--prompt", "abc", "--max-tokens", "4"], capsys)
    assert code == 0 and out.startswith("abc")

    text = tmp_path / "input.txt"
    text.write_text("The grass is green. The sky is blue.")
    for analysis in ("spectrum", "effrank", "barcode", "delta-hist"):
        code, _, _ = run(["analyze", analysis, "--ckpt", ckpt, "--input", str(text),
                          "--out-dir", str(tmp_path / "analysis")], capsys)
        assert code == 0
    assert (tmp_path / "analysis" / "selection_barcode.csv").exists()

    code, _, _ = run(["analyze", "barcode", "--ckpt", ckpt, "--passkey-length", "300",
                      "--out-dir", str(tmp_path / "passkey_barcode")], capsys)
    assert code == 0
    header = (tmp_path / "passkey_barcode" / "selection_barcode.csv").read_text().splitlines()[1]
    assert header.startswith("token_index,region,expert_0")

    code, out, _ = run(["passkey", "--ckpt", ckpt, "--lengths", "256", "--trials", "1",
                        "--out-dir", str(tmp_path / "pk"), "--quiet"], capsys)
    assert code == 0
    assert (tmp_path / "pk" / "passkey_grid.csv").exists()


def test_analyze_needs_an_input(tmp_path, capsys):
    config = tmp_path / "tiny.json"
    run(["init-config", "--preset", "desk-tiny", "--out", str(config)], capsys)
    run(["train", "--config", str(config), "--steps", "0", "--out-dir", str(tmp_path), "--quiet"], capsys)
    code, _, _ = run(["analyze", "cka", "--ckpt", str(tmp_path / "checkpoint_step0.ckpt")], capsys)
    assert code == 2


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
