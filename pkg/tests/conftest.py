import contextlib
import time

import pytest

from cadenza.dataio import SynthSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_ds():
    spec = SynthSpec(
        n_videos=40, segments_per_video=3, latent_dim=4, audio_dim=12, video_dim=8,
        cross_modal_correlation=0.9, noise_sigma=0.05, n_genres=3, n_tags=5, seed=7,
    )
    return generate_synthetic(spec)


def pytest_configure(config):
    config.acceptance_lines = []


class _Detail:
    text = ""


@pytest.fixture()
def criterion(request):
    """Context manager that logs one PASS/FAIL line per acceptance criterion."""
    lines = request.config.acceptance_lines

    @contextlib.contextmanager
    def run(number: int, title: str):
        detail = _Detail()
        start = time.perf_counter()
        try:
            yield detail
        except BaseException:
            status = "FAIL"
            raise
        else:
            status = "PASS"
        finally:
            line = f"[{status}] criterion {number:>2}: {title} ({time.perf_counter() - start:.1f}s) {detail.text}".rstrip()
            lines.append(line)
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
