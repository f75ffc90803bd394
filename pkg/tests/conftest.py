import numpy as np
import pytest

from dermdiff import corpus


@pytest.fixture(scope="session")
def small_corpus():
    """240 balanced 32x32 samples shared across tests (seeded, deterministic)."""
    spec = corpus.CorpusSpec(image_size=32, counts=corpus.balanced_counts(40), corpus_seed=7)
    return corpus.generate_corpus(spec)


@pytest.fixture(scope="session")
def msssim_images():
    """20 seeded 64x64 corpus images (large enough for 3 MS-SSIM scales)."""
    spec = corpus.CorpusSpec(image_size=64, counts=corpus.balanced_counts(4), corpus_seed=19)
    records = corpus.generate_corpus(spec)
    rng = np.random.default_rng(5)
    picks = rng.permutation(len(records))[:20]
    return [records[i].image for i in picks]
