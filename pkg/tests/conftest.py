import pytest

from crossmodal.data import SynthConfig, generate_corpus

TINY = dict(num_top=4, depth=3, branching=2, examples_per_class=10, frames=10, video_dim=8, audio_dim=6,
            latent_dim=6, event_frames=2, min_length=6, seed=3)


@pytest.fixture(scope="session")
def tiny_config():
    return SynthConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_config):
    return generate_corpus(tiny_config)


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(SynthConfig())


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_KEY, [])

    def check(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return check


_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
