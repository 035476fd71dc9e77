"""Shared toy datasets and trained models.

The expensive fixtures (dataset rendering, toy training runs) are session
scoped so the unit tests and the acceptance suite reuse one set of runs.
"""

import pytest

from sound_selector.nets import SelectorConfig, load_checkpoint
from sound_selector.synth import CorpusIndex, SceneConfig, build_dataset
from sound_selector.train import TrainConfig, fit

NUM_CLASSES = 5

ACCEPTANCE_RESULTS = []


def record_acceptance(name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}: {name} -- {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_corpus():
    return CorpusIndex.synthetic(NUM_CLASSES)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return tmp_path_factory.mktemp("toy")


@pytest.fixture(scope="session")
def toy_train(toy_corpus, toy_root):
    build_dataset(SceneConfig(), toy_corpus, toy_root / "train", 200, seed=1, split="train")
    return toy_root / "train"


@pytest.fixture(scope="session")
def toy_dev(toy_corpus, toy_root):
    build_dataset(SceneConfig(), toy_corpus, toy_root / "dev", 20, seed=4, split="dev")
    return toy_root / "dev"


@pytest.fixture(scope="session")
def toy_test(toy_corpus, toy_root):
    build_dataset(SceneConfig(), toy_corpus, toy_root / "test", 40, seed=2, split="test")
    return toy_root / "test"


@pytest.fixture(scope="session")
def toy_long(toy_corpus, toy_root):
    """10 s scenes containing all five classes."""
    config = SceneConfig(duration_s=10.0, num_events=8, class_policy=(5,), num_targets=5)
    build_dataset(config, toy_corpus, toy_root / "long", 20, seed=3, split="test")
    return toy_root / "long"


@pytest.fixture(scope="session")
def trained_selector(toy_train, toy_dev, toy_root):
    """Toy-preset selector trained on 2 s crops of the 200 training scenes (~300 steps)."""
    config = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=6, crop_s=2.0, seed=0)
    result = fit(toy_train, "selector", config, SelectorConfig.toy(NUM_CLASSES), toy_root / "selector",
                 dev_manifest=toy_dev)
    return load_checkpoint(result.best_checkpoint or result.checkpoint).model


@pytest.fixture(scope="session")
def toy_ten(toy_corpus, toy_root):
    """Ten fixed training scenes."""
    build_dataset(SceneConfig(), toy_corpus, toy_root / "ten", 10, seed=1, split="train")
    return toy_root / "ten"


@pytest.fixture(scope="session")
def overfit_run(toy_ten, toy_root):
    """Single-class selector trained on ten fixed full-length scenes."""
    config = TrainConfig(learning_rate=3e-3, batch_size=2, max_epochs=1, steps_per_epoch=250,
                         target_count_distribution=(1.0,), seed=0)
    return fit(toy_ten, "selector", config, SelectorConfig.toy(NUM_CLASSES), toy_root / "overfit")
