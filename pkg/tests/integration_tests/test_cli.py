import json
import math

import pandas as pd
import pytest

from cuspbranch.main import cli, run
from cuspbranch.schemas.run_config import build_config
from cuspbranch.utils.constant import OUTPUT_ENV, THREADS_ENV, ExitCode
from cuspbranch.utils.errors import ConfigInvalid


def _write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def _single_run_dir(out):
    run_dirs = list(out.iterdir())
    assert len(run_dirs) == 1
    return run_dirs[0]


def test_crossings_run(tmp_path):
    config = _write_config(tmp_path, "beta=1.5\nn_max=10\nk_target=1\n")
    out = tmp_path / "runs"
    assert cli(["crossings", "--config", config, "--out", str(out), "--threads", "1"]) == 0

    run_dir = _single_run_dir(out)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["exit_code"] == 0
    assert manifest["experiment"] == "crossings"
    assert manifest["config"]["n_max"] == 10
    assert sorted(manifest["artifacts"]) == ["crossings.csv", "crossings.dat"]
    assert manifest["summary"]["strictly_decreasing"]

    table = pd.read_csv(run_dir / "crossings.csv")
    assert table["n"].tolist() == list(range(1, 11))
    assert table["target_k_ln_beta"].iloc[0] == pytest.approx(math.log(1.5))
    header = (run_dir / "crossings.dat").read_text().splitlines()[0]
    assert header == "# n t_n n_t_n"


def test_model_asymptotics_run(tmp_path):
    config = _write_config(
        tmp_path,
        "\n".join(
            [
                "t_min=0.05",
                "t_max=0.2",
                "t_count=4",
                "branch_count=2",
                "mesh.uniform_cells=200",
            ]
        ),
    )
    out = tmp_path / "runs"
    assert cli(["model-asymptotics", "--config", config, "--out", str(out)]) == 0
    run_dir = _single_run_dir(out)
    for name in ("airy_ell1_branch1", "airy_ell1_branch2", "rescaled", "zero_mode"):
        assert (run_dir / f"{name}.csv").exists()
    zero_mode = pd.read_csv(run_dir / "zero_mode.csv")
    assert zero_mode["relative_error"].max() < 0.05


@pytest.mark.parametrize(
    "text",
    [
        "beta=1.5\nalpha_bar=2.0\n",
        "beta=1.5\nnot a key value pair\n",
        "k_target=2\nbeta=2.5\n",
    ],
)
def test_config_errors_exit_with_two(tmp_path, text):
    config = _write_config(tmp_path, text)
    out = tmp_path / "runs"
    assert cli(["crossings", "--config", config, "--out", str(out)]) == 2
    assert not out.exists()


def test_missing_config_file(tmp_path):
    assert cli(["crossings", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_unknown_experiment(tmp_path):
    config = _write_config(tmp_path, "beta=1.5\n")
    with pytest.raises(SystemExit):
        cli(["spectral-flow", "--config", config])


def test_environment_defaults(tmp_path, monkeypatch):
    out = tmp_path / "env-runs"
    monkeypatch.setenv(OUTPUT_ENV, str(out))
    monkeypatch.setenv(THREADS_ENV, "2")
    config = build_config({"experiment": "crossings", "n_max": "5"})
    exit_code, run_dir = run(config)
    assert exit_code is ExitCode.OK
    assert run_dir.parent == out
    assert json.loads((run_dir / "manifest.json").read_text())["threads"] == 2


def test_bad_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "many")
    config = build_config({"experiment": "crossings", "n_max": "5"})
    with pytest.raises(ConfigInvalid):
        run(config, out=str(tmp_path))


def test_failed_run_still_writes_manifest(tmp_path, mocker):
    mocker.patch(
        "cuspbranch.main.run_experiment", side_effect=ArithmeticError("no convergence")
    )
    config = build_config({"experiment": "crossings"})
    exit_code, run_dir = run(config, out=str(tmp_path), threads=1)
    assert exit_code is ExitCode.NUMERICAL_FAILURE
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["exit_code"] == 3
    assert manifest["error"] == "ArithmeticError: no convergence"


def _run_cli(tmp_path, experiment, lines, out_name="runs", threads="1"):
    config = _write_config(tmp_path, "\n".join(lines))
    out = tmp_path / out_name
    assert cli([experiment, "--config", config, "--out", str(out), "--threads", threads]) == 0
    run_dir = _single_run_dir(out)
    return run_dir, json.loads((run_dir / "manifest.json").read_text())


DEGENERATE_LINES = [
    "beta=1.5",
    "t_min=0.05",
    "t_max=0.3",
    "t_count=12",
    "k_max=3",
    "k_target=1",
    "branch_count=1",
    "mesh.uniform_cells=300",
    "mesh.refine_truncation=false",
]


def test_degenerate_run_stays_on_mode_one(tmp_path):
    run_dir, manifest = _run_cli(tmp_path, "degenerate", DEGENERATE_LINES)
    summary = manifest["summary"]
    branch = summary["branch1"]
    assert branch["limit_k"] == 1
    assert branch["lost"] is None
    assert branch["N_valid"]
    assert branch["N_slope"] >= 0.8
    assert branch["tracking_exponent"] >= 0.5
    assert summary["truncation"]["refined"] is False
    assert summary["truncation"]["k_max"] == 3

    table = pd.read_csv(run_dir / "branch1.csv")
    assert table["t"].min() == pytest.approx(0.05)
    assert table.loc[table["t"].idxmin(), "k_mass"] > 0.5
    assert table["ambiguous_step"].sum() == branch["ambiguous_steps"]
    assert {"ambiguous", "gap_over_t", "N_residual_over_t"} <= set(table.columns)

    crossings = pd.read_csv(run_dir / "branch1_crossings.csv")
    assert crossings["n"].min() >= 3
    assert (crossings["coupling_ratio"].dropna() > 0.0).all()
    assert (run_dir / "branch1_crossings.dat").exists()


def test_sweep_run(tmp_path):
    run_dir, manifest = _run_cli(
        tmp_path,
        "sweep",
        [
            "c_values=0.0",
            "w_fractions=0.5",
            "k_max=2",
            "eig_count=3",
            "mesh.uniform_cells=60",
            "mesh.max_refinements=1",
        ],
    )
    summary = manifest["summary"]
    assert summary["alpha_bar"] == pytest.approx(2.0 + math.sqrt(3.0) + 0.1)
    assert summary["points"] == 1
    assert summary["failed_points"] == 0
    assert summary["truncation"]["refined"] is True
    assert summary["truncation"]["rounds"] == 1

    table = pd.read_csv(run_dir / "sweep.csv")
    assert len(table) == 3
    assert (table["status"] == "ok").all()
    assert table["w"].iloc[0] == pytest.approx(0.5)
    assert (table["E"].diff().dropna() >= 0.0).all()


VERIFY_LINES = [
    "t_min=0.02",
    "t_max=0.2",
    "t_count=4",
    "test_functions=2",
    "k_max=2",
    "mesh.uniform_cells=80",
]


def test_verify_forms_run(tmp_path):
    run_dir, manifest = _run_cli(tmp_path, "verify-forms", VERIFY_LINES)
    summary = manifest["summary"]
    assert summary["max_asymmetry"] <= 1e-12
    assert summary["all_masses_factorizable"]
    assert summary["min_poincare_ratio"] >= 1.0
    assert summary["min_slope_q_minus_a"] > 0.9
    assert summary["p_at_1"] == pytest.approx(1.0)
    assert 3.0 < summary["richardson_ratio_median"] < 5.0
    assert summary["derivative_constant_max"] > 0.0

    for name in ("expansion", "symmetry", "derivative_bound", "q_dot_richardson", "poincare"):
        assert (run_dir / f"{name}.csv").exists()
    assert (run_dir / "q_t_max.coo").exists()
    symmetry = pd.read_csv(run_dir / "symmetry.csv")
    assert set(symmetry["kind"]) >= {"q", "a"}
    richardson = pd.read_csv(run_dir / "q_dot_richardson.csv")
    assert (richardson["relative_to_default"] < 1e-5).all()


def test_runs_are_reproducible(tmp_path):
    first, _ = _run_cli(tmp_path, "verify-forms", VERIFY_LINES, out_name="first")
    second, _ = _run_cli(tmp_path, "verify-forms", VERIFY_LINES, "second", threads="2")
    names = sorted(p.name for p in first.glob("*.csv"))
    assert names == sorted(p.name for p in second.glob("*.csv"))
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()
