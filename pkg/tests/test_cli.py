import json
import re

import numpy as np
import pytest

from conftest import MODELS
from lnareduce.cli import (
    EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, load_config, parse_eps_list, parse_model,
    parse_tspan, run_command, write_csv,
)
from lnareduce.exceptions import SchemaError
from lnareduce.lna import LnaModel
from lnareduce.moments import MomentTrajectory, reduced_layout

SCI = re.compile(r"^-?\d\.\d{16}e[+-]\d{2,3}$")

MINIMAL = """\
schema_version: 1
species: [a]
volume: 1.0
epsilon: 0.1
reactions:
  - name: decay
    stoich: [-1]
    rate_expr: {form: mass_action, scale: 1.0, orders: {a: 1}}
transform:
  A_x: [[1]]
  A_z: []
"""


def _stderr_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def test_builtin_model_is_the_example(params):
    loaded = load_config("phospho-example")
    assert loaded.network.parameters == params.as_dict()
    assert loaded.transform.slow_names == ("v", "g")


def test_yaml_example_matches_builtin():
    builtin = load_config("phospho-example")
    from_file = load_config(str(MODELS / "phospho.yaml"))
    y = np.array([30.0, 10.0, 5.0])
    for loaded in (builtin, from_file):
        assert loaded.network.fast_indices == [2, 3]
    np.testing.assert_allclose(LnaModel(from_file.network).drift(y, 0.0), LnaModel(builtin.network).drift(y, 0.0))
    np.testing.assert_allclose(LnaModel(from_file.network).jacobian(y, 0.0),
                               LnaModel(builtin.network).jacobian(y, 0.0))
    np.testing.assert_array_equal(from_file.network.domain.upper, [np.inf, 100.0, np.inf])


def test_missing_epsilon_names_field_and_line():
    text = MINIMAL.replace("epsilon: 0.1\n", "")
    with pytest.raises(SchemaError) as info:
        parse_model(text)
    assert info.value.field == "epsilon"
    assert info.value.line == 1


def test_bad_value_reports_its_line():
    text = MINIMAL.replace("volume: 1.0", "volume: lots")
    with pytest.raises(SchemaError) as info:
        parse_model(text)
    assert info.value.field == "volume"
    assert info.value.line == 3


def test_unknown_species_in_rate():
    text = MINIMAL.replace("orders: {a: 1}", "orders: {b: 1}")
    with pytest.raises(SchemaError) as info:
        parse_model(text)
    assert info.value.field == "reactions.0.rate_expr.orders.b"
    assert info.value.line == 8


def test_missing_model_file_is_validation_error(tmp_path, capsys):
    code = run_command(["check", "--model", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION
    assert _stderr_json(capsys)["error"] == "ModelValidationError"


def test_parse_helpers():
    assert parse_eps_list("0.1,0.01") == [0.1, 0.01]
    assert parse_eps_list("0.01,0.1,0.05") == [0.1, 0.05, 0.01]
    assert parse_tspan("0:50") == (0.0, 50.0)
    with pytest.raises(ValueError):
        parse_tspan("5:1")


def test_csv_header_only_and_single_row(tmp_path):
    layout = reduced_layout(2)
    empty = MomentTrajectory(np.empty(0), np.empty((0, layout.size)), layout)
    write_csv(empty, tmp_path / "empty.csv", ("v", "g"))
    assert (tmp_path / "empty.csv").read_text() == "t,v,g,m[0],m[1],M[0][0],M[0][1],M[1][1]\n"

    one = MomentTrajectory([0.5], np.arange(layout.size, dtype=float)[None, :] / 3.0, layout)
    write_csv(one, tmp_path / "one.csv", ("v", "g"))
    lines = (tmp_path / "one.csv").read_text().split("\n")
    assert len(lines) == 3 and lines[-1] == ""
    fields = lines[1].split(",")
    assert all(SCI.match(f) for f in fields)
    assert float(fields[3]) == 2.0 / 3.0


def test_unknown_command_is_usage_error(capsys):
    assert run_command(["frobnicate"]) == EXIT_USAGE
    assert _stderr_json(capsys)["error"] == "UsageError"
    assert run_command([]) == EXIT_USAGE


def test_moments_command_writes_grid(tmp_path):
    code = run_command(["moments", "--model", "phospho-example", "--eps", "0.05", "--tspan", "0:50",
                        "--out", str(tmp_path)])
    assert code == EXIT_OK
    lines = (tmp_path / "moments_original.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("t,v,g,c,")
    assert len(lines) == 202
    assert (tmp_path / "moments_reduced.csv").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"]["moments_reduced.csv"]["columns"][:3] == ["t", "v", "g"]


def test_reduce_command_prints_summary(tmp_path, capsys):
    assert run_command(["reduce", "--model", "phospho-example", "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["worst_hurwitz_margin"] < 0
    np.testing.assert_allclose(summary["samples"][0]["gamma2"], [[0.5, 0.0]])
    assert len(summary["samples"]) == 11


def test_check_passes_for_example(tmp_path, capsys):
    assert run_command(["check", "--model", str(MODELS / "phospho.yaml"), "--tspan", "0:10", "--grid", "11",
                        "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_check_fails_for_unstable_fast_subsystem(tmp_path, capsys):
    code = run_command(["check", "--model", str(MODELS / "unstable_fast.yaml"), "--tspan", "0:5", "--grid", "6",
                        "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION
    report = json.loads((tmp_path / "check.json").read_text())
    assert "hurwitz" in report["failures"]
    assert _stderr_json(capsys)["error"] == "AssumptionCheckFailed"


def test_reduce_on_unstable_model_is_numerical_failure(tmp_path, capsys):
    code = run_command(["reduce", "--model", str(MODELS / "unstable_fast.yaml"), "--out", str(tmp_path)])
    assert code == EXIT_NUMERICAL
    assert _stderr_json(capsys)["error"] == "WrongBranchError"


def test_sde_output_is_reproducible_across_threads(tmp_path):
    outputs = []
    for threads in ("1", "3"):
        out = tmp_path / threads
        code = run_command(["sde", "--model", "phospho-example", "--tspan", "0:1", "--grid", "3",
                            "--n", "300", "--seed", "5", "--threads", threads, "--out", str(out)])
        assert code == EXIT_OK
        outputs.append((out / "sde_reduced.csv").read_bytes())
    assert outputs[0] == outputs[1]
    header = outputs[0].decode().splitlines()[0]
    assert header.endswith("se_M[1][1]")


@pytest.mark.slow
def test_sweep_command_reports_first_order_slope(tmp_path, capsys):
    code = run_command(["sweep", "--model", "phospho-example", "--eps", "0.1,0.05,0.02,0.01",
                        "--tspan", "0:50", "--out", str(tmp_path)])
    assert code == EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert 0.8 <= result["slope"] <= 1.2
    assert (tmp_path / "sweep.csv").read_text().startswith("epsilon,e_x,e_m,e_M,w2\n")


@pytest.mark.parametrize("old, new, field", [
    ("initial:\n  y0: [0, 0, 0]", "initial: [0, 0, 0]", "initial"),
    ("inputs:\n  Z:", "inputs:\n  - Z:", "inputs"),
])
def test_list_in_place_of_mapping_is_schema_error(old, new, field):
    text = (MODELS / "phospho.yaml").read_text()
    assert old in text
    with pytest.raises(SchemaError) as info:
        parse_model(text.replace(old, new))
    assert info.value.field == field
    assert info.value.line is not None


def test_list_orders_is_schema_error():
    with pytest.raises(SchemaError) as info:
        parse_model(MINIMAL.replace("orders: {a: 1}", "orders: [a]"))
    assert info.value.field == "reactions.0.rate_expr.orders"


def test_malformed_initial_gives_one_json_error_line(tmp_path, capsys):
    model = tmp_path / "bad.yaml"
    model.write_text((MODELS / "phospho.yaml").read_text().replace("initial:\n  y0: [0, 0, 0]", "initial: [0, 0, 0]"))
    code = run_command(["check", "--model", str(model), "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION
    err = capsys.readouterr().err.strip().splitlines()
    report = json.loads(err[-1])
    assert report["error"] == "SchemaError"
    assert "initial" in report["message"]


def test_sweep_with_ensembles_writes_noise_floors(tmp_path, capsys):
    code = run_command(["sweep", "--model", "phospho-example", "--eps", "0.1,0.05", "--tspan", "0:1",
                        "--grid", "3", "--sde", "--n", "200", "--seed", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "sweep_sde.csv").read_text().startswith("epsilon,e_m,floor_m,e_M,floor_M\n")
    sde = json.loads((tmp_path / "sweep_sde.json").read_text())
    assert sde["n_realizations"] == 200
    assert len(sde["errors"]["M"]) == 2
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert "sweep_sde.csv" in manifest["files"]
