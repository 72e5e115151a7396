import pytest

from fskws.synth import SynthSpec, synth_build

SMALL = SynthSpec(n_train=11, n_val=11, n_test=11, clips_train=12, clips_val=12, clips_test=12, n_aux=30,
                  n_aux_variants=4, aux_max_count=40, aux_min_count=8, seed=3)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """A small corpus written to disk; returns (root, corpus)."""
    root = tmp_path_factory.mktemp("corpus")
    return root, synth_build(SMALL, root)


_ACCEPTANCE: dict[int, str] = {}


def acceptance_line(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[n] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
