import pytest


@pytest.fixture
def criterion(capsys):
    """Emit one visible pass/fail line per acceptance criterion."""

    def report(num, name, ok, detail):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"[criterion {num:2d}] {name}: {status} ({detail})")
        return ok

    return report
