import re

import pytest
import torch

from dlf.config import ModelConfig


@pytest.fixture()
def tiny_cfg() -> ModelConfig:
    """Smallest config that still exercises every code path."""
    return ModelConfig(
        embed_dim=32,
        detail_dim=8,
        num_stages=2,
        num_heads=2,
        codebook_size=64,
        detail_codebook_size=16,
        entropy_hidden=16,
        gen_base=32,
        aux_base=32,
    )


@pytest.fixture()
def tiny_model(tiny_cfg):
    from dlf.network import DualBranchCodec

    torch.manual_seed(0)
    model = DualBranchCodec(tiny_cfg)
    model.eval()
    return model


_CRITERION_RE = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in rep.nodeid:
                continue
            m = _CRITERION_RE.search(rep.nodeid)
            if not m:
                continue
            status = "PASS" if outcome == "passed" else "FAIL"
            name = m.group(2).replace("_", " ")
            lines.append((int(m.group(1)), f"acceptance criterion {int(m.group(1)):2d} ({name}): {status}"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
