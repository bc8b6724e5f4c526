import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ebama.prompt_graph import FixtureAnnotator, ObjectGraph  # noqa: E402
from ebama.toy import ToyDenoiser  # noqa: E402


@pytest.fixture(scope="session")
def toy():
    return ToyDenoiser(seed=0)


@pytest.fixture(scope="session")
def fixtures():
    return FixtureAnnotator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def graph_from_words(words, objects, modifiers, externals=()):
    """Build an ObjectGraph by hand from word lists and index sets."""
    return ObjectGraph(
        objects=tuple(objects),
        modifiers={s: frozenset(modifiers.get(s, ())) for s in objects},
        token_count=len(words),
        externals=frozenset(externals),
        words=tuple(words),
    )
