import json

import pytest

import assess_security

from . import casefetch
from . import config


def run(capsys, *argv):
    code = assess_security.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        assess_security.main(["--help"])

    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "retry_budget" in out
    assert "zero_weight_exclusion" in out


def test_flow_prints_solution(capsys):
    code, out, _ = run(capsys, "flow", "--log-level", "warning")

    solution = json.loads(out)
    assert code == 0
    assert solution["converged"] is True
    assert len(solution["buses"]) == 14
    assert solution["buses"][7]["v_mag"] == pytest.approx(1.09)


def test_flow_with_load_factor(capsys):
    _, base, _ = run(capsys, "flow")
    _, heavy, _ = run(capsys, "flow", "--load-factor", "1.2")

    assert json.loads(heavy)["buses"][13]["v_mag"] < json.loads(base)["buses"][13]["v_mag"]


def test_errors_are_reported_as_json(capsys, monkeypatch):
    monkeypatch.setattr(casefetch, "_get", lambda url: None)

    code, out, err = run(capsys, "flow", "--case", "/nonexistent/nowhere.m")

    assert code == 1
    assert out == ""
    assert json.loads(err.strip().splitlines()[-1])["error"] == "FileNotFoundError"


def test_invalid_flag_value_is_a_config_error(capsys):
    code, _, err = run(capsys, "gen", "--samples", "0")

    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ConfigError"


def test_gen_is_reproducible(capsys, tmp_path):
    for name in ("a", "b"):
        code, _, _ = run(
            capsys, "gen", "--samples", "1", "--seed", "3", "--no-timestamp", "--out", str(tmp_path / name)
        )
        assert code == 0

    for filename in ("dataset.csv", "dataset.json", "operating_point.json"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()
    assert "generated_at" not in json.loads((tmp_path / "a" / "dataset.json").read_text())


def test_pipeline(capsys, tmp_path):
    out = str(tmp_path)
    common = ["--out", out, "--seed", "11", "--samples", "6", "--lambda-count", "10", "--msa-steps", "1"]

    for command in ("gen", "train", "rank", "eval"):
        code, _, err = run(capsys, command, *common)
        assert code == 0, err

    ranking = (tmp_path / "ranking.csv").read_text().splitlines()
    assert ranking[0] == "rank,contingency,from,to,pi_c,state"
    assert len(ranking) == 1 + 19
    manifest = json.loads((tmp_path / "assessor" / "manifest.json").read_text())
    cell_files = {name for cells in manifest["contingency_models"].values() for name in cells.values()}
    assert {p.name for p in (tmp_path / "assessor").iterdir()} == {
        "manifest.json", "model_heavy.json", "model_light.json", "model_normal.json", *cell_files,
    }
    assert json.loads((tmp_path / "run_config.json").read_text())["seed"] == 11
    point = json.loads((tmp_path / "operating_point.json").read_text())
    assert all(0.95 <= v <= 1.05 for v in point["controls"]["v_setpoints"])
    summary = json.loads((tmp_path / "evaluation.json").read_text())
    assert summary["timing"]["prediction_solves"] == 0
    assert (tmp_path / "ranking_0.8.csv").exists()


def test_bad_flag_is_a_usage_error(capsys):
    code, out, err = run(capsys, "gen", "--seed", "abc")

    assert code == 2
    assert out == ""
    error = json.loads(err.strip().splitlines()[-1])
    assert error["error"] == "UsageError"
    assert "--seed" in error["message"]


def test_unknown_command_is_a_usage_error(capsys):
    code, _, err = run(capsys, "sweep")

    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "UsageError"


def test_run_config_file_is_read_by_default(monkeypatch, tmp_path):
    path = tmp_path / "run_config.json"
    config.save_config(path, config.RunConfig(seed=123, samples_per_contingency=7))
    monkeypatch.setattr(assess_security, "DEFAULT_CONFIG", path)
    parser = assess_security.build_parser()

    cfg = assess_security.resolve_config(parser.parse_args(["gen"]))
    overridden = assess_security.resolve_config(parser.parse_args(["gen", "--seed", "5"]))

    assert (cfg.seed, cfg.samples_per_contingency) == (123, 7)
    assert (overridden.seed, overridden.samples_per_contingency) == (5, 7)


def test_missing_run_config_falls_back_to_defaults(monkeypatch, tmp_path):
    monkeypatch.setattr(assess_security, "DEFAULT_CONFIG", tmp_path / "absent.json")

    cfg = assess_security.resolve_config(assess_security.build_parser().parse_args(["flow"]))

    assert cfg == config.RunConfig()


def test_shipped_run_config_is_the_default_path():
    assert assess_security.DEFAULT_CONFIG.exists()
    assert assess_security.DEFAULT_CONFIG.name == "run_config.json"
