import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from fernnet.data import Dataset, write_idx

hypothesis.settings.register_profile("default", deadline=None, max_examples=40)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=5)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("FERNNET_MNIST", ROOT / "data" / "mnist"))

_acceptance_lines = []


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() and \
        (MNIST_DIR / "t10k-images-idx3-ubyte").exists()


needs_mnist = pytest.mark.skipif(not mnist_available(),
                                 reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def record():
    """Collects one summary line per acceptance criterion."""
    def _record(criterion: str, ok: bool, detail: str):
        _acceptance_lines.append(f"{'PASS' if ok else 'FAIL'}  [{criterion}] {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


def toy_dataset(rng: np.random.Generator, per_class: int = 20, classes: int = 10,
                size: int = 28, noise: float = 0.1) -> Dataset:
    """Per-class random blob prototypes plus noise, quantized to bytes/255."""
    protos = (rng.random((classes, size, size)) > 0.7).astype(np.float64)
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    images = protos[labels] + rng.uniform(-noise, noise, size=(labels.size, size, size))
    pixels = np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)
    return Dataset((pixels.astype(np.float32) / np.float32(255))[:, None], labels.astype(np.int64))


@pytest.fixture
def toy_data_dir(tmp_path):
    """Directory holding a small MNIST-named IDX train/test pair."""
    rng = np.random.default_rng(7)
    train = toy_dataset(rng, per_class=20)
    d = tmp_path / "toy"
    d.mkdir()
    write_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte",
              train.images, train.labels)
    write_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte",
              train.images[:100], train.labels[:100])
    return d
