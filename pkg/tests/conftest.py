import numpy as np
import pytest

from ttprompt.config import ExperimentConfig
from ttprompt.data import SyntheticSpec, gen_data
from ttprompt.model import Batch, ModelConfig, PromptModel
from ttprompt.numcore import Rng

TINY = dict(view_dims=[3, 4], d=8, n_layers=1, n_heads=1, k=2, ranks=2)


@pytest.fixture
def tiny_model():
    model = PromptModel(ModelConfig(**TINY), Rng(0).stream("init"))
    model.add_task(3)
    return model


@pytest.fixture
def tiny_batch():
    g = np.random.default_rng(1)
    mask = np.array([[1, 0], [0, 1], [1, 1], [1, 1]], dtype=np.uint8)
    return Batch([g.normal(size=(4, 3)), g.normal(size=(4, 4))], mask,
                 (g.random((4, 3)) < 0.5).astype(float))


def small_config(**kw) -> ExperimentConfig:
    base = dict(synthetic=dict(samples=240, views=3, dims=6, classes=6, labels_per_sample=1.5),
                d=16, n_layers=1, n_heads=2, k=2, ranks=2, batch_size=32, epochs=3, patience=5,
                T=3, missing_rate=0.3, seeds=[0])
    base.update(kw)
    cfg = ExperimentConfig(**base)
    cfg.validate()
    return cfg


@pytest.fixture
def small_dataset():
    return gen_data(SyntheticSpec(samples=120, views=3, dims=5, classes=6, labels_per_sample=1.5, seed=3))
