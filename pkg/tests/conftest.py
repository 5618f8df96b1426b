import pytest

from nesydm.diffusion import make_rng
from nesydm.model import Architecture, init_params


def tiny_model(seed=0, W=2, V=2, x_dim=2, hidden=(4,), layout="joint", condition=True, context=True, scale=1.5):
    rng = make_rng(seed)
    arch = Architecture(x_dim, W, V, hidden=hidden, layout=layout, context=context, condition=condition)
    return init_params(arch, rng, scale=scale), rng.normal(size=x_dim)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny():
    return tiny_model()



CRITERIA = []


def record(number, title, passed, detail):
    """Register one acceptance line; printed in the terminal summary."""
    line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    CRITERIA.append((number, line))
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(CRITERIA):
        terminalreporter.write_line(line)
