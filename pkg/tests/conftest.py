import warnings

import numpy as np
import pytest

from asyncchunk.kinematics import SingularJacobian


@pytest.fixture(autouse=True)
def _quiet_singular():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularJacobian)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_policy(tmp_path_factory):
    """A quickly trained flow policy on a handful of demonstrations."""
    from asyncchunk.demo import teach
    from asyncchunk.policy import train_policy

    root = tmp_path_factory.mktemp("demos") / "ds"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularJacobian)
        teach(root, episodes=6, seed=3, laps=1.0)
        policy, _ = train_policy(root, objective="cfm", h_o=2, h_a=10, epochs=3, n_rff=256, seed=0)
    return policy


_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    recorded = []

    def record(number: int, ok: bool, detail: str):
        line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _VERDICTS[number] = line
        recorded.append(number)
        print(line)
        assert ok, line

    yield record
    if not recorded:
        number = int(request.node.name.split("_")[1])
        _VERDICTS.setdefault(number, f"CRITERION {number:2d} FAIL: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
