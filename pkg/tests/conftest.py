import numpy as np
import pytest

from dynsplat.geometry import Camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam100():
    return Camera(100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture(scope="session")
def static_run():
    """Ten frames of the bundled room without the moving box, mapped with ground-truth poses."""
    from dynsplat.pipeline import PipelineConfig, run_parallel
    from dynsplat.synthetic import SynthConfig, synth_generate

    seq = synth_generate(SynthConfig(n_frames=10, dynamic=None))
    cfg = PipelineConfig(leaf_size=0.25, mode="gt", deterministic=True)
    return seq, cfg, run_parallel(seq, cfg)


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store one verdict per acceptance criterion for the end-of-run summary."""

    def _record(criterion: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(ok), detail)
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
