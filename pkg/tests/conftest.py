"""Shared fixtures: tiny model shapes sized for fast, exact checks."""

import numpy as np
import pytest

from sketchlab.dataset import descriptions, synth_fixture
from sketchlab.encoder import EncoderConfig, EncoderModel
from sketchlab.tokenizer import Tokenizer


TINY = EncoderConfig(
    model_dim=16,
    embed_dim=8,
    num_heads=2,
    text_blocks=1,
    image_blocks=1,
    fusion_blocks=1,
    image_size=16,
    patch_size=4,
    max_text_len=32,
    vocab_cap=512,
    cond_dim=8,
)


@pytest.fixture(scope="session")
def tiny_pairs():
    return synth_fixture(2, 3, seed=5, image_size=16)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_pairs):
    return Tokenizer.fit(descriptions(tiny_pairs), vocab_cap=TINY.vocab_cap)


@pytest.fixture()
def tiny_model(tiny_tokenizer):
    return EncoderModel(TINY, tiny_tokenizer, seed=0)


@pytest.fixture(scope="session")
def default_model():
    """Full-size encoder on the default 64x64 architecture (read-only use)."""
    pairs = synth_fixture(2, 2, seed=1)
    tok = Tokenizer.fit(descriptions(pairs))
    return EncoderModel(EncoderConfig(), tok, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_image(rng, size=16):
    from sketchlab.images import GrayImage

    return GrayImage.from_array(rng.integers(0, 256, (size, size), dtype=np.uint8))
