import os

import numpy as np
import pytest


@pytest.fixture(scope="session", autouse=True)
def _lut_cache(tmp_path_factory):
    """Keep the bias table cache out of the user's home directory."""
    path = tmp_path_factory.mktemp("lut-cache")
    old = os.environ.get("RAWDENOISE_CACHE")
    os.environ["RAWDENOISE_CACHE"] = str(path)
    from rawdenoise.vst import clear_lut_memo

    clear_lut_memo()
    yield path
    clear_lut_memo()
    if old is None:
        os.environ.pop("RAWDENOISE_CACHE", None)
    else:
        os.environ["RAWDENOISE_CACHE"] = old


@pytest.fixture(scope="session")
def lut(_lut_cache):
    from rawdenoise.vst import get_lut

    return get_lut()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def natural_scene():
    from rawdenoise.harness.synth import procedural_scene

    return procedural_scene(7, 256, "natural")


@pytest.fixture(scope="session")
def flat_scene():
    from rawdenoise.harness.synth import procedural_scene

    return procedural_scene(3, 256, "flat")


ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record pass/fail and wall time of one acceptance criterion for the end-of-run summary."""
    import time
    from contextlib import contextmanager

    @contextmanager
    def run(number, title, limit_s):
        t0 = time.perf_counter()
        detail = []
        try:
            yield detail
        except BaseException as exc:
            ACCEPTANCE[number] = (title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        elapsed = time.perf_counter() - t0
        ok = elapsed < limit_s
        note = "; ".join(detail) + f"; {elapsed:.1f} s (limit {limit_s:g} s)"
        ACCEPTANCE[number] = (title, ok, note.lstrip("; "))
        assert ok, f"criterion {number} took {elapsed:.1f} s, limit {limit_s:g} s"

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, note = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {note}")
