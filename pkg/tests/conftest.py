import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ddg_lab.config import CodebookConfig, RunConfig  # noqa: E402
from ddg_lab.data import DatasetManifest, generate  # noqa: E402


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    """A few-second run: 3 domains, 12x12 images, 3x3 patch grid."""
    return RunConfig(
        manifest=DatasetManifest(seed=3, n_classes=3, n_domains=3, per_domain=30, side=12, patch=4),
        iterations=30, batch_size=8, val_every=10, hidden=(8,),
        codebook=CodebookConfig(size=8, dim=4),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return generate(tiny_config.manifest, tiny_config.domains)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    try:
        from test_acceptance import CRITERIA
    except ImportError:
        return
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::" in getattr(rep, "nodeid", ""):
                name = rep.nodeid.split("::")[-1]
                if outcomes.get(name) in ("failed", "error"):
                    continue
                outcomes[name] = key
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, text in CRITERIA.items():
        state = outcomes.get(name)
        label = {"passed": "PASS", None: "NOT RUN"}.get(state, "FAIL")
        num, desc = text.split(" ", 1)
        terminalreporter.write_line(f"{label:7} criterion {num:<3} {desc}")
