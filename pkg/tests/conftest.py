import sys

import numpy as np
import pytest

from cifasr import tensor as T
from cifasr.config import desk_config
from cifasr.text import Lexicon


@pytest.fixture(autouse=True)
def _fp64():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def abc_lexicon():
    return Lexicon.from_pairs([("A", "sy1"), ("B", "sy1"), ("C", "sy2")])


def tiny_model_config(n_chars=8, n_sylls=6, unit="syllable", blocks=1, dropout=0.0):
    cfg = desk_config(model={
        "feat_dim": 4,
        "encoder": {"num_blocks": blocks, "d_model": 8, "num_heads": 2, "d_ffn": 12,
                    "conv_kernel_width": 3, "dropout": dropout},
        "syllable_blocks": blocks,
        "decoder_blocks": blocks,
        "n_chars": n_chars,
        "n_sylls": n_sylls,
        "unit": unit,
    })
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
