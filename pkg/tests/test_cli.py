import math
import csv
import json

import numpy as np
import pytest

from mfjfbsde.cli import EXIT_ERROR, EXIT_NEGATIVE, EXIT_OK, ExperimentConfig, emit_report, main, parse_config
from mfjfbsde.errors import ConfigParse, IoFailure, UnknownProblem

SMALL = ["--steps", "20", "--particles", "300"]


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def test_config_round_trips_through_text():
    cfg = ExperimentConfig.defaults("lq")
    cfg.overrides.update({"D": 0.25, "a": -0.75})
    cfg.options.update({"rhos": [0.1, 0.2], "directions": 4, "quick": True})
    cfg.marks = [(1.0, 0.5), (-0.5, 1.0 / 3.0)]
    back = parse_config(cfg.to_ini(), "lq")
    assert back.to_dict() == cfg.to_dict()


def test_problem_argument_replaces_the_file_name():
    text = "[problem]\nname=example_3_1\n[grid]\nN = 10\n"
    cfg = parse_config(text, "example_3_1", problem="example_3_2")
    assert cfg.problem == "example_3_2" and cfg.N == 10


@pytest.mark.parametrize("text, key", [
    ("[grid]\nN = abc\n", "N"),
    ("[grid]\nT = inf\n", "T"),
    ("[run]\nparticles = 2.5\n", "particles"),
    ("[solver]\nwobble = 1\n", "wobble"),
    ("[options]\nquick = maybe\n", "quick"),
    ("[problem]\nname = lq\nzeta = 1\n", "zeta"),
    ("[marks]\nmarks = 1, 2\nweights = 1\n", "weights"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigParse, match=repr(key)):
        parse_config(text, "lq")


def test_malformed_config_file_exits_with_error(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[grid]\nN = twelve\n")
    code = main(["solve", "--config", str(path), "--out", str(tmp_path / "out")])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == EXIT_ERROR
    assert err["type"] == "ConfigParse" and "'N'" in err["message"]


def test_unknown_problem(tmp_path, capsys):
    with pytest.raises(UnknownProblem):
        ExperimentConfig.defaults("no_such_problem")
    code = main(["solve", "--problem", "no_such_problem", "--out", str(tmp_path)])
    assert code == EXIT_ERROR
    assert "UnknownProblem" in capsys.readouterr().err


def test_csv_values_parse_back_exactly(tmp_path):
    rng = np.random.default_rng(0)
    values = np.concatenate([rng.normal(size=50) * 10.0 ** rng.integers(-300, 300, size=50), [1 / 3, -0.0, 5e-324]])
    emit_report({"csv": {"table": (["value"], [[v] for v in values])}}, tmp_path)
    with open(tmp_path / "table.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["value"]
    back = np.array([float(r[0]) for r in rows[1:]])
    assert np.array_equal(back, values)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back, values))


def test_empty_results_give_valid_json(tmp_path):
    written = emit_report({}, tmp_path)
    assert written == ["report.json"]
    assert read_json(tmp_path / "report.json") == {"tables": [], "documents": []}


def test_unwritable_output_is_reported(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        emit_report({"json": {"a": {}}}, blocker / "sub")


def test_solve_writes_solution_and_manifest(tmp_path):
    out = tmp_path / "solve"
    assert main(["solve", *SMALL, "--out", str(out)]) == EXIT_OK
    manifest = read_json(out / "manifest.json")
    for key in ("command", "status", "exit_code", "config", "seed", "generator", "started", "wall_time_s",
                "outputs", "versions"):
        assert key in manifest
    assert manifest["status"] == "Solved" and manifest["exit_code"] == 0
    assert "solution.csv" in manifest["outputs"]
    with open(out / "solution.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["t", "mean_x0", "mean_y0", "sd_x0", "sd_y0"]


def test_identical_runs_give_identical_tables(tmp_path):
    for name in ("a", "b"):
        assert main(["solve", *SMALL, "--seed", "4", "--out", str(tmp_path / name)]) == EXIT_OK
    for table in ("solution.csv",):
        assert (tmp_path / "a" / table).read_bytes() == (tmp_path / "b" / table).read_bytes()
    assert main(["solve", *SMALL, "--seed", "5", "--out", str(tmp_path / "c")]) == EXIT_OK
    assert (tmp_path / "a" / "solution.csv").read_bytes() != (tmp_path / "c" / "solution.csv").read_bytes()


def test_exit_code_mapping(tmp_path):
    small = ["--steps", "40", "--particles", "200"]
    assert main(["nonsolvable-demo", *small, "--out", str(tmp_path / "n")]) == EXIT_OK
    assert read_json(tmp_path / "n" / "manifest.json")["status"] == "Unsolvable"
    assert main(["solve", "--problem", "example_3_2", *small, "--out", str(tmp_path / "u")]) == EXIT_NEGATIVE
    assert main(["nonsolvable-demo", "--problem", "example_3_1", *SMALL, "--out", str(tmp_path / "s")]) \
        == EXIT_NEGATIVE
    assert main(["nonsolvable-demo", "--problem", "lq", *SMALL, "--out", str(tmp_path / "e")]) == EXIT_ERROR
    assert read_json(tmp_path / "e" / "manifest.json")["exit_code"] == EXIT_ERROR


def test_solve_on_a_control_problem_uses_the_zero_control(tmp_path):
    assert main(["solve", "--problem", "lq", *SMALL, "--out", str(tmp_path)]) == EXIT_OK
    summary = read_json(tmp_path / "summary.json")
    assert summary["control"] == "zero" and math.isfinite(summary["cost"]["total"])


def test_monotonicity_command(tmp_path):
    assert main(["check-mono", "--particles", "500", "--out", str(tmp_path / "ok")]) == EXIT_OK
    assert main(["check-mono", "--problem", "example_3_2", "--particles", "500",
                 "--out", str(tmp_path / "bad")]) == EXIT_NEGATIVE


def test_print_config_is_parseable(capsys):
    assert main(["lq", "--print-config", "--seed", "9"]) == EXIT_OK
    cfg = parse_config(capsys.readouterr().out, "lq")
    assert cfg.seed == 9 and cfg.problem == "lq"
