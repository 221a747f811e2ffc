import csv
import json

import pytest

from metastab.cli import main
from metastab.experiments import COLUMNS, EXPERIMENTS, ConfigError, parse_config, run_experiment, validate_config

MODEL = "kappa 2\nwalk_rate 1 2 1\n"


def write_config(tmp_path, body, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(body)
    return p


def config_text(tmp_path, experiment, Ns=(20, 40), extra=""):
    grid = "".join(f"N {n}\n" for n in Ns)
    return f"experiment {experiment}\n{MODEL}{grid}output {tmp_path / 'out'}\n{extra}"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- validation ---------------------------------------------------------------

def test_minimal_config_defaults(tmp_path):
    cfg = parse_config("experiment condensation\nkappa 2\nwalk_rate 1 2 1\nN 50\n")
    assert cfg.model["delta"] == 0.25 and cfg.model["speedup"] is True
    assert cfg.lambda_grid == (0.5, 1.0, 2.0) and cfg.seed == 0
    assert cfg.N_grid == (50,)


def test_model_file(tmp_path):
    (tmp_path / "m.spec").write_text(MODEL + "gamma 0.4\n")
    p = write_config(tmp_path, "experiment h0h1\nmodel m.spec\nN 30\n")
    cfg = validate_config(p)
    assert cfg.model["gamma"] == 0.4 and cfg.model["walk_rates"].shape == (2, 2)


@pytest.mark.parametrize("body,message", [
    ("experiment condensation\nkappa 2\nwalk_rate 1 2 1\ngamma 1.5\nN 50\n", "gamma must be < 2/kappa = 1"),
    ("experiment condensation\nkappa 2\nwalk_rate 1 2 1\nN 100\nN 50\n", "N grid must be strictly increasing"),
    ("experiment nope\nkappa 2\nwalk_rate 1 2 1\nN 50\n", "unknown experiment"),
    ("experiment mixing\nkappa 2\nwalk_rate 1 2 1\nN 50\nlambda -1\n", "lambda grid must be positive"),
    ("experiment mixing\nkappa 2\nwalk_rate 1 2 1\n", "N grid is empty"),
    ("experiment mixing\nmodel missing.spec\nN 50\n", "cannot read model file"),
])
def test_violations(body, message):
    with pytest.raises(ConfigError) as info:
        parse_config(body)
    assert any(message in v for v in info.value.violations)


def test_all_violations_listed():
    with pytest.raises(ConfigError) as info:
        parse_config("experiment x\nkappa 2\nwalk_rate 1 2 1\ngamma 3\nN 9\nN 5\nbogus 1\n")
    assert len(info.value.violations) >= 4


# -- CLI ----------------------------------------------------------------------

def test_cli_validate(tmp_path, capsys):
    p = write_config(tmp_path, config_text(tmp_path, "condensation"))
    assert main(["validate", str(p)]) == 0
    echo = json.loads(capsys.readouterr().out)
    assert echo["experiment"] == "condensation" and echo["N_grid"] == [20, 40]


def test_cli_invalid_config_exit_2(tmp_path, capsys):
    p = write_config(tmp_path, config_text(tmp_path, "nonsense"))
    assert main(["run", str(p)]) == 2
    err = capsys.readouterr().err
    assert "unknown experiment" in err and "usage:" in err and "condensation" in err
    assert not (tmp_path / "out").exists()


def test_cli_unreadable_file(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "absent.cfg")]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_cli_bad_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_cli_chain_info(tmp_path, capsys):
    spec = tmp_path / "m.spec"
    spec.write_text(MODEL)
    assert main(["chain-info", str(spec), "--n", "30"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["states"] == 31 and info["reversible"] and info["irreducible"]
    assert set(info["well_sizes"]) == {"1", "2"} and len(set(info["well_sizes"].values())) == 1
    assert main(["chain-info", str(spec)]) == 2


# -- runs ---------------------------------------------------------------------

def test_run_condensation_and_rerun_identical(tmp_path, capsys):
    p = write_config(tmp_path, config_text(tmp_path, "condensation", Ns=(20, 40, 80)))
    assert main(["run", str(p)]) == 0
    out = tmp_path / "out" / "condensation.csv"
    first = out.read_bytes()
    rows = read_rows(out)
    assert rows[0] == COLUMNS["condensation"] + ["status", "reason"]
    assert [r[0] for r in rows[1:]] == ["20", "40", "80"]
    assert first.count(b"\r\n") == 4
    assert main(["run", str(p), "--workers", "3"]) == 0
    assert out.read_bytes() == first
    man = json.loads((tmp_path / "out" / "condensation.manifest.json").read_text())
    assert man["config"]["N_grid"] == [20, 40, 80] and len(man["cells"]) == 3


def test_failed_cell_does_not_abort(tmp_path):
    cfg = parse_config(config_text(tmp_path, "condensation", Ns=(5, 30)))
    records, status = run_experiment(cfg)
    assert status == 1
    assert records[0].status == "failed" and "smallest valid N" in records[0].reason
    assert records[1].status == "ok"


def test_memory_guard(tmp_path):
    cfg = parse_config(config_text(tmp_path, "condensation", Ns=(30,), extra="max_states 10\n"))
    records, status = run_experiment(cfg)
    assert status == 1 and "cap is 10" in records[0].reason


@pytest.mark.parametrize("experiment", [e for e in EXPERIMENTS if e not in ("order-exit", "condition-V")])
def test_every_experiment_runs(tmp_path, experiment):
    cfg = parse_config(config_text(tmp_path, experiment, Ns=(20, 30), extra="m_terms 4\n"))
    records, status = run_experiment(cfg)
    assert status == 0, [r.reason for r in records]
    rows = read_rows(tmp_path / "out" / f"{experiment}.csv")
    assert rows[0][:len(COLUMNS[experiment])] == COLUMNS[experiment]
    per_lambda = 3 if experiment in ("resolvent-check", "reduced-generator", "condition-D") else 1
    assert len(rows) == 1 + 2 * per_lambda


@pytest.mark.parametrize("experiment", ["order-exit", "condition-V"])
def test_sampling_experiments_deterministic(tmp_path, experiment):
    p = write_config(tmp_path, config_text(tmp_path, experiment, Ns=(20, 30), extra="samples 500\nseed 3\n"))
    assert main(["run", str(p)]) == 0
    out = tmp_path / "out" / f"{experiment}.csv"
    first = out.read_bytes()
    assert main(["run", str(p), "--workers", "2"]) == 0
    assert out.read_bytes() == first
