import numpy as np
import pytest

from tinyvlm.tensor import default_dtype


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, max_seq_len=48):
    from tinyvlm.data import corpus_words
    from tinyvlm.language import Tokenizer
    from tinyvlm.model import CaptionModel
    from tinyvlm.vision import ViTConfig

    vit = ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2)
    return CaptionModel.build(Tokenizer.from_texts(corpus_words()), seed=seed, vit=vit, lm_dim=16, lm_depth=1,
                              lm_heads=2, max_seq_len=max_seq_len)


def tiny_dataset(model, n=6, seed=0, style="short"):
    from tinyvlm.data import synthesize_dataset
    from tinyvlm.training import CaptionDataset

    return CaptionDataset.from_manifest(synthesize_dataset(seed, n, style), model, style)


# acceptance criteria register a one-line verdict here; printed after the run
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
