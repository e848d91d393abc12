import numpy as np
import pytest

from brushwork import imageio

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reference measurement")
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """``verdict(n, checks)`` records one pass/fail line for criterion ``n``.

    ``checks`` maps a short description to a bool; the line lists every failed check.
    """
    def record(number, checks):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        detail = "; ".join(checks) if ok else "failed: " + "; ".join(failed)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  ({detail})"
        request.config.stash[VERDICTS].append(line)
        with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
            print("\n" + line)
        return ok
    return record


@pytest.fixture(scope="session")
def style_pair():
    """64x64 (subject, inspiration): a cat photo and a brick texture."""
    photos = pytest.importorskip("brushwork.photos")
    subject = imageio.resize(photos.load_photo("chelsea")[50:250, 100:300] / 255.0, 64, 64)
    inspiration = imageio.resize(photos.load_photo("brick")[:256, :256] / 255.0, 64, 64)
    return subject, inspiration


@pytest.fixture
def rng():
    return np.random.default_rng(0)
