import numpy as np
import pytest

from simdrc.dialogue import segmentation_from_lengths


def random_case(seed, t_max=32, d_max=16, min_utts=1):
    """Random embedding matrix with a matching random segmentation."""
    rng = np.random.default_rng(seed)
    while True:
        lengths = []
        budget = int(rng.integers(3, t_max + 1)) - 1
        while budget >= 2:
            n = int(rng.integers(2, budget + 1)) if rng.random() < 0.3 else int(rng.integers(2, min(budget, 5) + 1))
            lengths.append(n)
            budget -= n
        if len(lengths) >= min_utts:
            break
    seg = segmentation_from_lengths(lengths)
    d = int(rng.integers(1, d_max + 1))
    H = rng.standard_normal((seg.total_len, d))
    return H, seg


@pytest.fixture
def seed17_case():
    """The T=9, d=4, seed 17 fixture: three utterances of 3, 2 and 3 tokens."""
    rng = np.random.default_rng(17)
    seg = segmentation_from_lengths([3, 2, 3])
    H = rng.standard_normal((9, 4))
    return H, seg
