import time

import hypothesis
import numpy as np
import pytest

np.seterr(all="raise", under="ignore")

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.load_profile("default")


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



class DeskRuns:
    """Lazily trained small CNNs on the desk-scale image set, cached per (seed, lambda).

    The image set is a CIFAR-10 binary subset when ``JAFR_CIFAR`` names the
    batch files (comma separated), an IDX set when ``JAFR_IDX`` names
    ``images[,labels]``, and otherwise the bundled 16x16 digits.
    """

    def __init__(self):
        import os

        from jafr.data import load_cifar_bin, load_digits16, load_idx, split_dataset

        if os.environ.get("JAFR_CIFAR"):
            ds = load_cifar_bin(os.environ["JAFR_CIFAR"].split(",")).take(6000, seed=0)
            n_test = 1000
        elif os.environ.get("JAFR_IDX"):
            ds = load_idx(*os.environ["JAFR_IDX"].split(",")).take(6000, seed=0)
            n_test = 1000
        else:
            ds = load_digits16()
            n_test = 300
        self.name = ds.provenance
        self.dataset = ds
        self.train, self.test = split_dataset(ds, n_test, seed=0)
        self._cache = {}
        self.train_seconds = {}

    def model(self, seed: int, lam: float):
        from jafr.models import ModelSpec
        from jafr.trainer import TrainConfig, train

        if (seed, lam) not in self._cache:
            spec = ModelSpec(input_shape=self.train.image_shape, num_classes=self.train.num_classes)
            t0 = time.perf_counter()
            self._cache[seed, lam] = train(spec, self.train, TrainConfig(lambda_freq=lam, seed=seed, epochs=5))[0]
            self.train_seconds[seed, lam] = time.perf_counter() - t0
        return self._cache[seed, lam]


@pytest.fixture(scope="session")
def desk_runs():
    return DeskRuns()


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(n, ok, detail)``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append((n, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
