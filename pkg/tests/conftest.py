import numpy as np
import pytest

from cvse.model import CvseModel, FeatureMap, ModelDims, Study


def make_feature_map(rng, width=2, height=2, channels=3):
    return FeatureMap(width=width, height=height,
                      regions=rng.standard_normal((width * height, channels)))


def make_study(rng, study_id="s0", gold=(), width=2, height=2, channels=3):
    return Study(study_id=study_id,
                 frontal=make_feature_map(rng, width, height, channels),
                 lateral=make_feature_map(rng, width, height, channels),
                 gold=tuple(gold))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_model():
    return CvseModel.init(ModelDims(d1=4, d2=3, d=4, d_att=4), seed=1)
