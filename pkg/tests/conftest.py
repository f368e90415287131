import numpy as np
import pytest

from condattn.autodiff import Tensor
from condattn.backbone import FeatureBundle
from condattn.gradcheck import tiny_caption_model, tiny_recognition_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_rec():
    return tiny_recognition_model(3)


@pytest.fixture
def tiny_cap():
    return tiny_caption_model(5)


def random_bundle(rng, n=2, c1=3, hw1=4, c2=5, hw2=2, d_g=6):
    return FeatureBundle(
        Tensor(rng.standard_normal((n, c1, hw1, hw1))),
        Tensor(rng.standard_normal((n, c2, hw2, hw2))),
        Tensor(rng.standard_normal((n, d_g))),
    )
