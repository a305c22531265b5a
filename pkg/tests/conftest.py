import numpy as np
import pytest

from certsmooth import classifiers, dataset
from certsmooth.classifiers import InputMode, TrainConfig


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    spec = dataset.CorpusSpec(n_benign=30, n_malicious=30, size_range=(8192, 20000), overlay_prob=0.4,
                              pe32plus_prob=0.3, seed=11)
    dataset.generate_corpus(spec, out)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return dataset.ingest(corpus_dir, corpus_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def samples(corpus):
    return list(corpus.samples())


@pytest.fixture(scope="session")
def benign_pool(samples):
    return b"".join(d for d, y in samples[:20] if y == 0)


@pytest.fixture(scope="session")
def chunk_model(samples):
    return classifiers.train(samples, TrainConfig(z=512, max_epochs=3, seed=0), "histogram")


@pytest.fixture(scope="session")
def prefix_model(samples):
    return classifiers.train(samples, TrainConfig(z=512, max_epochs=3, seed=0), "histogram", InputMode.PREFIX)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
