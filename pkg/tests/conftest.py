import logging

import numpy as np
import pytest

from mtaffect.data import SyntheticSpec, align_dataset, synthesize
from mtaffect.zoo import HeadSpec, ModelGraph, toy_backbone

logging.getLogger("mtaffect.geometry").setLevel(logging.ERROR)

TINY = SyntheticSpec(seed=3, n_videos=5, utterances_per_video=(2, 3), frames_per_utterance=(6, 14), extent=16)


@pytest.fixture(scope="session")
def tiny_ds():
    return align_dataset(synthesize(TINY))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(topology="parallel-krnn", taps=("pool1", "pool3", "fc"), seq_len=4, seed=0, extent=16,
               use_landmarks=True, units=6):
    bb = toy_backbone(extent, 1, widths=(2, 2, 3, 3, 4, 4), fc_units=8)
    return ModelGraph(bb, HeadSpec(topology, rnn_units=units, fc_units=5), list(taps), seq_len, seed, use_landmarks)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
