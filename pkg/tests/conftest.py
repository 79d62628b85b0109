import copy
import sys
from pathlib import Path

import pytest
import yaml

from pabnet.config import from_dict
from pabnet.data import generate_synthetic
from pabnet.train import build_network, build_provider, set_deterministic

# lets test modules import the shared oracles
sys.path.insert(0, str(Path(__file__).parent))

TINY = {
    "synth": {"n_identities": 6, "image_size": 64, "illumination_levels": [0.9, 1.1]},
    "train": {
        "steps": 30,
        "pose_pretrain_steps": 20,
        "backbone_pretrain_steps": 30,
        "backbone_pretrain_identities": 12,
        "eval_pairs": 32,
    },
}


@pytest.fixture(scope="session", autouse=True)
def _deterministic():
    set_deterministic(True)


@pytest.fixture(scope="session")
def tiny_config():
    return from_dict(copy.deepcopy(TINY))


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    return generate_synthetic(tiny_config.synth)


@pytest.fixture(scope="session")
def _tiny_models(tiny_config, tiny_data):
    images, records = tiny_data
    net = build_network(tiny_config.backbone, tiny_config.train)
    provider = build_provider(
        tiny_config.backbone, tiny_config.train, images, [r.yaw_degrees for r in records]
    )
    return net, provider


@pytest.fixture
def tiny_models(_tiny_models):
    """Fresh copies of a pretrained network and pose provider."""
    net, provider = _tiny_models
    return copy.deepcopy(net), copy.deepcopy(provider)


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path
