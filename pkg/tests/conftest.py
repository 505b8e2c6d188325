import os
import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings
from PIL import Image

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=10, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


def write_image(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def image_tree(tmp_path):
    """Factory for ``<root>/<identity>/<n>.png`` trees of random 8-bit images."""

    def make(n_ids, n_per_id, size=(12, 12), seed=0, root_name="data"):
        rng = np.random.default_rng(seed)
        root = tmp_path / root_name
        for i in range(n_ids):
            for j in range(n_per_id):
                write_image(root / f"p{i:03d}" / f"{j:03d}.png", rng.integers(0, 256, size=(size[1], size[0])))
        return root

    return make


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c: ...; c.check(ok, detail)`` records one PASS/FAIL line."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    class Recorder:
        def __init__(self, number, title):
            self.number, self.title = number, title
            self.passed, self.detail = False, "not evaluated"

        def check(self, passed, detail):
            self.passed, self.detail = bool(passed), detail

        def __enter__(self):
            self.start = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            elapsed = time.perf_counter() - self.start
            if exc_type is not None and not issubclass(exc_type, AssertionError):
                self.passed, self.detail = False, f"{exc_type.__name__}: {exc}"
            line = f"{'PASS' if self.passed else 'FAIL'} criterion {self.number}: {self.title} | {self.detail} | {elapsed:.1f}s"
            results[self.number] = line
            print(line)
            return False

    return Recorder


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
