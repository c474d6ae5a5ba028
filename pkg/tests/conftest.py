import pytest

from multipath.synthdata import ProposalQuality, SceneConfig, generate_dataset, proposals_for
from multipath.trainer import TrainingSet

SMALL_SCENE = SceneConfig(image_size=64, size_edges=(6, 16, 32, 56))


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SMALL_SCENE, 8, seed=1)


@pytest.fixture(scope="session")
def small_training_set(small_dataset):
    props = proposals_for(small_dataset, ProposalQuality(quality=0.7, count=60), seed=1)
    return TrainingSet(small_dataset, props)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
