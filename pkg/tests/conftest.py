import numpy as np
import pytest

from stochshape.field_model import Mode, StreamSpec, default_field_family


@pytest.fixture(scope="session")
def spec():
    return default_field_family()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def single(mode: Mode) -> StreamSpec:
    return StreamSpec(((mode,),))


# acceptance results keyed by criterion part ("4", "6a", "10b", ...)
CRITERIA: dict[str, tuple[bool, str]] = {}


def record(key: str, ok: bool, detail: str) -> bool:
    ok = bool(ok)
    CRITERIA[key] = (ok, detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    groups: dict[int, list[str]] = {}
    for key in CRITERIA:
        groups.setdefault(int(key.rstrip("abcdefgh")), []).append(key)
    terminalreporter.section("acceptance criteria")
    for num in sorted(groups):
        keys = sorted(groups[num])
        ok = all(CRITERIA[k][0] for k in keys)
        parts = "; ".join((f"({k[len(str(num)):]}) " if len(keys) > 1 else "")
                          + ("FAIL " if len(keys) > 1 and not CRITERIA[k][0] else "") + CRITERIA[k][1] for k in keys)
        terminalreporter.write_line(f"CRITERION {num}: {'PASS' if ok else 'FAIL'}  {parts}")
