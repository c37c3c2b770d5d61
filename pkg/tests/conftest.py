import contextlib

import pytest

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class _Record:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def acceptance():
    """``with acceptance(n, title) as rec:`` records one criterion's outcome for the summary."""

    @contextlib.contextmanager
    def criterion(number: int, title: str):
        rec = _Record()
        try:
            yield rec
        except BaseException:
            _ACCEPTANCE[number] = (title, False, rec.detail)
            raise
        _ACCEPTANCE[number] = (title, True, rec.detail)

    return criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
