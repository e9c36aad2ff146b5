import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fogsound import audio, classifier, features

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def featurize(clips):
    return classifier.Dataset.from_items(
        [(features.extract_features(c.clip), c.class_id) for c in clips])


@pytest.fixture(scope="session")
def small_corpus():
    """10 clips per class, 2 s each."""
    return audio.synth_corpus(10, 2.0, seed=11)


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return featurize(small_corpus)


@pytest.fixture(scope="session")
def trained_model(small_dataset):
    model = classifier.fit_normalizer(classifier.init_model(3), small_dataset)
    return classifier.train(model, small_dataset, classifier.TrainSpec(epochs=300, learning_rate=0.1))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
