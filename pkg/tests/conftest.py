import numpy as np
import pytest

from fscil.backbone import make_extractor
from fscil.head import StochasticHead
from fscil.numerics import Rng


def random_head(rng: Rng, d=4, classes_per_task=(2, 3), m=4, eta=16.0, sigma_scale=0.3):
    head = StochasticHead(d, m, eta)
    cid = 0
    for t, n in enumerate(classes_per_task):
        ids = list(range(cid, cid + n))
        cid += n
        head.add_classes(t, ids, rng.normal((n, m, d)), sigma_scale * np.abs(rng.normal((n, d))))
    return head


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_extractor():
    return make_extractor(5, (1, 4, 4), hidden=6, out_dim=4)
