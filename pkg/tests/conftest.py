import pytest

from serforge.synth import generate_dataset


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Small synthetic corpus: 5 sessions x 2 speakers x 4 classes x 2 utts."""
    root = tmp_path_factory.mktemp("mini_corpus")
    summary = generate_dataset(root, seed=11, utts_per_speaker_class=2,
                               duration_range=(0.5, 0.8))
    return root, summary


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    """Acceptance-sized corpus: 50 utterances per class."""
    root = tmp_path_factory.mktemp("full_corpus")
    summary = generate_dataset(root, seed=0, utts_per_speaker_class=5)
    return root, summary
