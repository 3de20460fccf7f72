import pytest

from muxctl.cli import load_config, solve_config

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}
CRITERIA = {
    1: "LQ benchmark converges, terminal state, runtime",
    2: "multiplexing feasibility at zero_tol=1e-4",
    3: "LQ joint-off measure >= 0.3 s",
    4: "Mayer bang-off-bang, longer active time than LQ",
    5: "Hamiltonian relative spread <= 5e-2",
    6: "control-law oracle suite",
    7: "Riccati cross-check",
    8: "integrator accuracy",
    9: "determinism",
}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            status = "PASS" if ok else "FAIL"
        else:
            status, detail = "NOT RUN", ""
        terminalreporter.write_line(f"[{status}] {n}. {title}: {detail}")


@pytest.fixture(scope="session")
def lq_run():
    """``(config, report, problem, seconds)`` of the bundled LQ benchmark."""
    cfg = load_config("paper_lq")
    report, problem, secs = solve_config(cfg)
    return cfg, report, problem, secs


@pytest.fixture(scope="session")
def mayer_run():
    cfg = load_config("paper_mayer")
    report, problem, secs = solve_config(cfg)
    return cfg, report, problem, secs
