import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from corpus import make_corpus  # noqa: E402


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small corpus for fast unit tests: ~170 files."""
    return make_corpus(tmp_path_factory.mktemp("tiny-corpus"), seed=0)


@pytest.fixture(scope="session")
def trend_corpus(tmp_path_factory):
    """Larger corpus for the pretraining trend checks (1060 train clips)."""
    return make_corpus(tmp_path_factory.mktemp("trend-corpus"),
                       per_word_train=100, per_word_val=10, per_word_test=15,
                       unknown_per_split=(60, 8, 10), seed=1)
