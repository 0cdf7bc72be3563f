import json
import warnings

import numpy as np
import pytest

from wsprune.archzoo import ArchSpec, build_network


def tiny_spec(family="vgg", frames=16, mels=8, base=4, **kw):
    if family == "mobilenet":
        return ArchSpec("mobilenet", None, kw.pop("width", 1.0), input_shape=(1, mels, frames),
                        base_channels=base, **kw)
    depth = kw.pop("depth", 7 if family == "vgg" else 11)
    return ArchSpec(family, depth, input_shape=(1, mels, frames), base_channels=base, **kw)


def tiny_net(family="vgg", seed=0, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_network(tiny_spec(family, **kw), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion that ran."""
    lines = {}
    for key in ("passed", "failed"):
        for report in terminalreporter.stats.get(key, []):
            if report.when != "call":
                continue
            for name, value in getattr(report, "user_properties", []):
                if name == "acceptance":
                    rec = json.loads(value)
                    lines[rec["n"]] = rec
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        rec = lines[n]
        verdict = "PASS" if rec["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {n} {verdict}  {rec['title']}: {rec['detail']}")
