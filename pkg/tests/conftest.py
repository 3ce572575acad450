import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def toy_lp():
    """min x2 s.t. x1 + x2 = 1."""
    from lp_debias.lp import StandardFormLP
    return StandardFormLP(np.array([[1.0, 1.0]]), np.array([1.0]), np.array([0.0, 1.0]))


@pytest.fixture
def ot2x2():
    from lp_debias.transport import OtProblem, ot_to_lp
    return ot_to_lp(OtProblem([0.5, 0.5], [0.5, 0.5], np.array([[0.0, 1.0], [2.0, 0.0]])))


# ---------------------------------------------------------------- certificates
# Every converged penalized solve in the session is checked for its duality gap
# and primal residual; the acceptance suite asserts on the worst values so far and
# the session fails at exit if a later solve breaks the bounds.

GAP_BOUND, RESIDUAL_BOUND = 1e-8, 1e-10
CERTIFICATES = {"solves": 0, "worst_gap": 0.0, "worst_residual": 0.0}
ACCEPTANCE_LINES = []


def _record(lp, pen, r, sol):
    from lp_debias.penalized import duality_gap, primal_objective
    gap = duality_gap(lp, pen, r, sol) / (1.0 + abs(primal_objective(lp, pen, r, sol.x)))
    res = sol.primal_residual / (1.0 + float(np.max(np.abs(lp.b))))
    CERTIFICATES["solves"] += 1
    CERTIFICATES["worst_gap"] = max(CERTIFICATES["worst_gap"], gap)
    CERTIFICATES["worst_residual"] = max(CERTIFICATES["worst_residual"], res)


@pytest.fixture(autouse=True)
def _certify_solves(monkeypatch):
    import lp_debias.cli as cli
    import lp_debias.debias as debias
    import lp_debias.penalized as penalized
    inner = penalized.solve_penalized

    def recording(lp, pen, r, opts=None, method="auto"):
        sol = inner(lp, pen, r, opts, method=method)
        _record(lp, pen, r, sol)
        return sol

    monkeypatch.setattr(penalized, "solve_penalized", recording)
    monkeypatch.setattr(debias, "solve_penalized", recording)
    monkeypatch.setattr(cli, "solve_penalized", recording)
    yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    if CERTIFICATES["solves"]:
        terminalreporter.write_line(
            "certified {solves} penalized solves in this process: worst relative gap "
            "{worst_gap:.2e}, worst relative residual {worst_residual:.2e}".format(**CERTIFICATES))


def pytest_sessionfinish(session, exitstatus):
    if (CERTIFICATES["worst_gap"] > GAP_BOUND
            or CERTIFICATES["worst_residual"] > RESIDUAL_BOUND):
        session.exitstatus = pytest.ExitCode.TESTS_FAILED
