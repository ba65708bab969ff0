import numpy as np
import pytest

from calibflow.numcore import RngStream

# criterion number -> {part: (passed, detail)}
_CRITERIA: dict[int, dict[str, tuple[bool, str]]] = {}


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(0)


@pytest.fixture
def criterion():
    """Record one part of an acceptance criterion; the summary prints one line per criterion."""
    def record(number: int, part: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA.setdefault(number, {})[part] = (bool(passed), detail)
        print(f"criterion {number} [{part}]: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        ok = all(p for p, _ in parts.values())
        failed = [k for k, (p, _) in parts.items() if not p]
        tail = f" (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}{tail}")
        for k, (p, d) in parts.items():
            terminalreporter.write_line(f"    {k}: {'pass' if p else 'FAIL'} {d}")
    terminalreporter.write_line("criterion 11: not reproduced at desk scale (licensed data, "
                                "multi-day GPU training); see README")
