import pytest
from hypothesis import HealthCheck, settings

from smfuse.workload import KernelSpec

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def small_spec():
    return KernelSpec(name="small", cta_count=4, warps_per_cta=2, instructions_per_warp=60,
                      load_rate=0.2, store_rate=0.05, branch_rate=0.1,
                      branch_divergence_prob=0.5, locality=0.5, seed=7)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcdefg")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
