import pytest

from metric_cgenn import algebra, autodiff, metric


def _clear_structure_caches():
    algebra._outer_table.cache_clear()
    autodiff.cayley_structure.cache_clear()


@pytest.fixture
def sign_flip(monkeypatch):
    """Corrupt one reordering sign in the blade product table (e1 e2 -> -e12)."""
    original = algebra._structure.__wrapped__

    def flipped(dim):
        result, sign, shared = original(dim)
        if dim >= 2:
            sign = sign.copy()
            sign[1, 2] = -sign[1, 2]
            sign.setflags(write=False)
        return result, sign, shared

    monkeypatch.setattr(algebra, "_structure", flipped)
    monkeypatch.setattr(autodiff, "_structure", flipped)
    _clear_structure_caches()
    yield
    monkeypatch.undo()
    _clear_structure_caches()


@pytest.fixture
def unsymmetrized(monkeypatch):
    """Drop the symmetrization of the metric gradient."""
    monkeypatch.setattr(metric, "SYMMETRIZE_GRADIENTS", False)
    yield


def pytest_terminal_summary(terminalreporter):
    lines = []
    for report in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", []):
        for key, value in getattr(report, "user_properties", []):
            if key == "acceptance":
                lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

