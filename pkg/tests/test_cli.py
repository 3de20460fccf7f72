import csv

import numpy as np
import pytest

from muxctl import cli
from muxctl.errors import ConfigError, ParseError, ValidationError

SMALL = """
mode = "lq"
t_hat = 2.0
n_steps = 400

[solver]
rng_seed = 3

[[system]]
name = "oscillator"
model = "harmonic_oscillator"
lambda = 0.5
Q = 1.0
R = 1.0
Qhat = 20.0
x0 = [1.0, 0.0]

[[system]]
name = "double integrator"
A = [[0.0, 1.0], [0.0, 0.0]]
B = [0.0, 1.0]
lambda = 0.5
Q = [1.0, 1.0]
R = [[1.0]]
Qhat = [[20.0, 0.0], [0.0, 20.0]]
x0 = [0.5, 0.0]
"""


def _report(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def small_run(small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    status = cli.main(["solve", "--config", str(small_cfg), "--out", str(out)])
    return status, out


# -- config parsing ----------------------------------------------------------------


def test_builtin_lq_parameters():
    cfg = cli.load_config("paper_lq")
    assert (cfg.mode, cfg.t_hat, cfg.n_steps) == ("lq", 3.5, 4000)
    osc, pend = cfg.subsystems
    assert (osc.lam, pend.lam) == (2.0, 1.0)
    assert np.array_equal(osc.Q, 2 * np.eye(2)) and np.array_equal(osc.Qhat, 200 * np.eye(2))
    assert np.array_equal(np.diag(pend.Q), [1, 5, 10, 10])
    assert np.array_equal(np.diag(pend.Qhat), [10, 200, 200, 200])
    assert np.array_equal(osc.x0, [1.0, 0.5])
    assert pend.x0[1] == pytest.approx(np.pi / 10, abs=1e-15)
    assert pend.A[1, 2] == pytest.approx(-0.8175, abs=1e-12)
    assert pend.A[3, 2] == pytest.approx(5.31375, abs=1e-12)


def test_builtin_mayer_parameters():
    cfg = cli.load_config("paper_mayer")
    assert cfg.mode == "mayer"
    for sub in cfg.subsystems:
        assert sub.action_set.contains([1.0]) and sub.action_set.contains([-1.0])
        assert not sub.action_set.contains([1.01])
        assert np.all(sub.xhat == 0.0)


def test_weight_shapes(small_cfg):
    cfg = cli.load_config(small_cfg)
    osc, dbl = cfg.subsystems
    assert np.array_equal(osc.Q, np.eye(2))
    assert np.array_equal(dbl.Q, np.eye(2))
    assert np.array_equal(dbl.Qhat, 20 * np.eye(2))
    assert dbl.B.shape == (2, 1)


def _variant(old, new, count=1):
    assert old in SMALL
    return SMALL.replace(old, new, count)


def test_missing_R():
    with pytest.raises(ValidationError) as info:
        cli.parse_config(_variant("R = 1.0\n", ""))
    assert "R" in str(info.value.key)


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError):
        cli.parse_config(_variant("lambda = 0.5", "lambda = 0.5\ncolour = 3"))
    with pytest.raises(ValidationError):
        cli.parse_config("horizon = 2\n" + SMALL)


def test_parse_error_has_line():
    with pytest.raises(ParseError) as info:
        cli.parse_config(_variant("t_hat = 2.0", "t_hat = = 2.0"))
    assert info.value.line == 3


@pytest.mark.parametrize(
    "old,new",
    [
        ('mode = "lq"', 'mode = "min-time"'),
        ("t_hat = 2.0", "t_hat = -2.0"),
        ("n_steps = 400", "n_steps = 4.5"),
        ("lambda = 0.5", "lambda = 0.0"),
        ("Q = 1.0", "Q = [[1.0, 2.0], [0.0, 1.0]]"),
        ("x0 = [1.0, 0.0]", "x0 = [1.0, 0.0, 3.0]"),
        ('model = "harmonic_oscillator"', 'model = "pogo stick"'),
        ("t_hat = 2.0", 't_hat = "two"'),
        ("rng_seed = 3", "rng_seed = 3\nmax_iter = 0"),
        ('mode = "lq"', 'mode = "lq"\neta = 0'),
    ],
)
def test_invalid_configs_raise_structured_errors(old, new):
    with pytest.raises(ConfigError):
        cli.parse_config(_variant(old, new))


def test_reach_accepts_abnormal_eta():
    text = """
mode = "reach"
eta = 0
t_hat = 1.0
n_steps = 100
[[system]]
model = "harmonic_oscillator"
lambda = 1.0
action_set = {kind = "interval", lower = -1.0, upper = 1.0}
x0 = [1.0, 0.0]
xhat = [0.0, 0.0]
"""
    cfg = cli.parse_config(text)
    assert cfg.problem_mode.eta == 0


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["solve", "--config", str(tmp_path / "nope.toml")]) == cli.EXIT_INPUT
    assert "not found" in capsys.readouterr().err
    assert cli.main(["solve"]) == cli.EXIT_INPUT


def test_bad_toml_exits_1(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("mode = \n")
    assert cli.main(["solve", "--config", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT


# -- solve / verify / simulate ---------------------------------------------------------


def test_solve_writes_artifacts(small_run):
    status, out = small_run
    assert status == cli.EXIT_OK
    for name in ("trajectory.csv", "controls_1.csv", "controls_2.csv", "report.txt"):
        assert (out / name).is_file()
    rep = _report(out / "report.txt")
    assert rep["converged"] == "true"
    assert float(rep["residual_norm"]) <= float(rep["residual_tol"])
    assert rep["multiplexing.passed"] == "true"
    with open(out / "trajectory.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["t", "x_1", "x_2", "x_3", "x_4", "u_1", "u_2", "p_1", "p_2", "p_3", "p_4", "sigma", "H"]


def test_trajectory_csv_roundtrip(small_run, small_cfg):
    _, out = small_run
    problem = cli.load_config(small_cfg).build_problem()
    traj = cli.read_trajectory_csv(out / "trajectory.csv", problem)
    again = cli.write_trajectory_csv(out / "again.csv", traj, problem.joint)
    assert again.read_bytes() == (out / "trajectory.csv").read_bytes()


def test_verify_accepts_solution(small_run, small_cfg, capsys):
    _, out = small_run
    assert cli.main(["verify", "--config", str(small_cfg), "--out", str(out)]) == cli.EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


def test_verify_rejects_overlapping_controls(small_run, small_cfg, tmp_path, capsys):
    _, out = small_run
    rows = list(csv.reader(open(out / "trajectory.csv")))
    i_u1, i_u2 = rows[0].index("u_1"), rows[0].index("u_2")
    rows[11][i_u1], rows[11][i_u2] = "0.5", "0.25"
    bad = tmp_path / "edited.csv"
    with open(bad, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    status = cli.main(["verify", "--config", str(small_cfg), "--trajectory", str(bad)])
    assert status == cli.EXIT_FAILED
    assert "check.multiplexing=FAIL" in capsys.readouterr().out


def test_verify_rejects_truncated_csv(small_run, small_cfg, tmp_path):
    _, out = small_run
    lines = (out / "trajectory.csv").read_text().splitlines()
    bad = tmp_path / "short.csv"
    bad.write_text("\n".join(lines[:-5]) + "\n")
    assert cli.main(["verify", "--config", str(small_cfg), "--trajectory", str(bad)]) == cli.EXIT_INPUT


def test_simulate_from_p0_matches_solve(small_run, small_cfg, tmp_path):
    _, out = small_run
    p0 = _report(out / "report.txt")["p0"]
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "--config", str(small_cfg), f"--p0={p0}", "--out", str(sim)]) == cli.EXIT_OK
    assert (sim / "trajectory.csv").read_bytes() == (out / "trajectory.csv").read_bytes()


def test_simulate_from_controls(small_run, small_cfg, tmp_path):
    _, out = small_run
    sim = tmp_path / "ctl"
    status = cli.main(["simulate", "--config", str(small_cfg), "--controls", str(out / "trajectory.csv"), "--out", str(sim)])
    assert status == cli.EXIT_OK
    assert _report(sim / "report.txt")["multiplexing.passed"] == "true"


def test_simulate_rejects_bad_p0(small_cfg, tmp_path):
    assert cli.main(["simulate", "--config", str(small_cfg), "--p0", "1,2", "--out", str(tmp_path)]) == cli.EXIT_INPUT


def test_solve_is_deterministic(small_run, small_cfg, tmp_path):
    _, out = small_run
    assert cli.main(["solve", "--config", str(small_cfg), "--out", str(tmp_path)]) == cli.EXIT_OK
    for name in ("trajectory.csv", "controls_1.csv", "controls_2.csv", "report.txt"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_seed_override_is_recorded(small_cfg, tmp_path):
    assert cli.main(["solve", "--config", str(small_cfg), "--out", str(tmp_path), "--seed", "11"]) == cli.EXIT_OK
    assert _report(tmp_path / "report.txt")["seed"] == "11"


def test_bad_eps_schedule(small_cfg, tmp_path):
    status = cli.main(["solve", "--config", str(small_cfg), "--out", str(tmp_path), "--eps-schedule", "0.1,0.2"])
    assert status == cli.EXIT_INPUT


# -- benchmark -------------------------------------------------------------------------------


def test_benchmark_table(lq_run, mayer_run, monkeypatch, tmp_path, capsys):
    runs = {"lq": lq_run, "mayer": mayer_run}

    def fake(cfg):
        _, report, problem, secs = runs[cfg.mode]
        return report, problem, secs

    monkeypatch.setattr(cli, "solve_config", fake)
    status = cli.main(["benchmark", "--out", str(tmp_path)])
    text = capsys.readouterr().out
    assert status == cli.EXIT_OK, text
    assert "FAIL" not in text
    assert "Riccati feedback sign" in text and "[-1, -1]" in text
    for name in cli.BUILTINS:
        assert (tmp_path / name / "trajectory.csv").is_file()
