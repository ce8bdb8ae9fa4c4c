import os

import pytest

from levyrefract.levy_model import JumpDiffusionSpec, Uniform, Weibull

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def record_acceptance(number: int, ok: bool, detail: str) -> bool:
    line = "ACCEPTANCE %d: %s - %s" % (number, "PASS" if ok else "FAIL", detail)
    ACCEPTANCE_LINES.append((number, line))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_line("")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

# Truncated-drift coefficient that puts the slope between jumps at 0.6 for
# the reference jump mix (unit-rate Uniform(0,1) up, Weibull(2,1) down).
REFERENCE_GAMMA = 0.7210553083590153

FULL_SCALE = os.environ.get("LEVYREFRACT_FULL_SCALE", "") not in ("", "0")


@pytest.fixture(scope="session")
def ref_spec_bv():
    return JumpDiffusionSpec(
        gamma=REFERENCE_GAMMA, sigma=0.0,
        jump_components=((1.0, 1, Uniform(0.0, 1.0)),
                         (1.0, -1, Weibull(2.0, 1.0))))


@pytest.fixture(scope="session")
def ref_spec_gauss(ref_spec_bv):
    from dataclasses import replace
    return replace(ref_spec_bv, sigma=1.0)


def drift_only(delta: float, x0: float = 0.0) -> JumpDiffusionSpec:
    return JumpDiffusionSpec(gamma=delta, sigma=0.0, jump_components=(), x0=x0)
