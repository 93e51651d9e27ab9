import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Recorder for acceptance verdicts, echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number, title, passed, detail=""):
        verdict = "PASS" if passed else "FAIL"
        line = f"acceptance {number:>2} {verdict}  {title}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
