import pytest

from iter_sgg import config as sgg_config
from iter_sgg import dataset
from iter_sgg.world import WorldConfig

TINY_WORLD = {"eta": 3, "upsilon": 6, "grid_w": 4, "grid_h": 4, "max_entities": 4, "seed": 0}
TINY_SPLITS = {"n_train": 24, "n_val": 8, "n_test": 8}


def tiny_config_dict(model_type="triple_decoder", **overrides):
    if model_type == "triple_decoder":
        model = {"type": "triple_decoder", "d_model": 8, "n_heads": 2, "encoder_layers": 1, "n_layers": 2,
                 "n_queries": 12}
    else:
        model = {"type": "motif", "d_r": 8, "n_heads": 2, "n_steps": 2}
    config = {
        "model": model,
        "dataset": {**TINY_WORLD, **TINY_SPLITS},
        "training": {"seed": 0, "epochs": 1, "batch_size": 4},
        "evaluation": {"ks": [5, 10]},
    }
    for section, values in overrides.items():
        config.setdefault(section, {}).update(values)
    return config


@pytest.fixture
def tiny_world():
    return WorldConfig(**TINY_WORLD)


@pytest.fixture
def tiny_config(monkeypatch):
    monkeypatch.delenv("ITER_SGG_SEED", raising=False)
    return sgg_config.load_config(tiny_config_dict())


@pytest.fixture
def tiny_motif_config(monkeypatch):
    monkeypatch.delenv("ITER_SGG_SEED", raising=False)
    return sgg_config.load_config(tiny_config_dict("motif"))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    return dataset.build_dataset(WorldConfig(**TINY_WORLD), path=path, **TINY_SPLITS)
