import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest

from outfitforge import data


TINY = dict(num_users=40, num_items=120, num_categories=8, num_outfits=200, image_dim=16, text_dim=8, cf_dim=8)


@pytest.fixture(scope="session")
def tiny_world():
    return data.synthesize_world(data.SyntheticWorldConfig(seed=3, **TINY))


@pytest.fixture(scope="session")
def tiny_vecs(tiny_world):
    """Random (num_items, 8) item embeddings for model-level tests."""
    import numpy as np
    return np.random.default_rng(11).normal(size=(len(tiny_world.catalog), 8))


@pytest.fixture
def record(request):
    """Log one acceptance line; collected lines are repeated in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def _record(label, ok, detail):
        line = f"[{label}] {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        lines.append(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=_criterion_key):
            terminalreporter.write_line(line)


def _criterion_key(line):
    label = line[1:line.index("]")].split()[-1]
    return (0, int(label)) if label.isdigit() else (1, label)
