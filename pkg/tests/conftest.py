import numpy as np
import pytest

from gdiscap.corpus import Vocabulary, synth_generate, write_dataset, load_dataset
from gdiscap.model import CaptionModel, ModelConfig
from gdiscap.system import GdisCap


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """24 synthetic images (4 themes of 6) written to disk and reloaded."""
    path = tmp_path_factory.mktemp("corpus") / "small.jsonl"
    write_dataset(synth_generate(3, 24), path)
    records, vocab = load_dataset(path)
    return path, records, vocab


@pytest.fixture
def tiny_vocab():
    return Vocabulary(["a", "dog", "cat", "on", "grass", "red", "ball"])


@pytest.fixture
def tiny_model(tiny_vocab):
    cfg = ModelConfig(vocab_size=len(tiny_vocab), d_in=4, d_model=8, heads=2, d_ff=16,
                      enc_layers=1, dec_layers=1, max_len=6)
    return CaptionModel(cfg, seed=0)


@pytest.fixture
def tiny_system(tiny_vocab):
    cfg = ModelConfig(vocab_size=len(tiny_vocab), d_in=4, d_model=8, heads=2, d_ff=16,
                      enc_layers=1, dec_layers=1, max_len=6)
    return GdisCap(cfg, seed=0)


def rand_features(rng, n_images, n_regions=3, d=4):
    return [rng.normal(size=(n_regions, d)) for _ in range(n_images)]


CRITERIA = []


class Criterion:
    """Collects checks for one acceptance criterion and records a single line."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.failures, self.notes = [], []

    def check(self, ok, what):
        self.notes.append(what)
        if not ok:
            self.failures.append(what)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.failures.append(f"{exc_type.__name__}: {exc}")
        status = "FAIL" if self.failures else "PASS"
        shown = self.failures or self.notes
        line = f"criterion {self.number} [{self.title}]: {status}  " + "; ".join(shown)
        CRITERIA.append((self.number, line))
        print(line)
        if exc is None and self.failures:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(CRITERIA):
            terminalreporter.write_line(line)
