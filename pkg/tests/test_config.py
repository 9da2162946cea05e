import json

import pytest

from mcpad.config import RunConfig, from_dict, load_config
from mcpad.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg == from_dict({})
    assert cfg.preprocess.sigma == 4
    assert cfg.train.epochs == 50 and cfg.train.seed == 7
    assert cfg.metrics.target_bpcer == 0.002
    assert (cfg.grid.stride, cfg.grid.scales, cfg.grid.aspect_ratios) == (16, (24, 48, 96), (1.0, 1.3))
    assert (cfg.loss.alpha, cfg.loss.gamma) == (0.25, 2)
    assert cfg.gen.counts == {"train": 200, "dev": 100, "eval": 100}


def test_round_trip_through_json():
    cfg = from_dict({"train": {"epochs": 3, "lr": 0.01}, "grid": {"scales": [16, 32], "pos_iou": 0.5, "neg_iou": 0.4}})
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.grid.scales == (16.0, 32.0) and (cfg.pos_iou, cfg.neg_iou) == (0.5, 0.4)


def test_grid_follows_image_size():
    cfg = from_dict({"gen": {"image_size": 64, "face_max": 48}})
    assert (cfg.grid.width, cfg.grid.height) == (64, 64)


def test_with_seed():
    cfg = RunConfig().with_seed(11)
    assert cfg.gen.seed == 11 and cfg.train.seed == 11


@pytest.mark.parametrize(
    "doc,msg",
    [
        ([], "JSON object"),
        ({"optimizer": {}}, "unknown config section"),
        ({"train": {"learning_rate": 1}}, "unknown key"),
        ({"train": []}, "must be an object"),
        ({"train": {"epochs": 1.5}}, "wrong type"),
        ({"train": {"epochs": True}}, "wrong type"),
        ({"train": {"lr": -1}}, "lr"),
        ({"preprocess": {"sigma": 0}}, "sigma"),
        ({"grid": {"scales": [16, "a"]}}, "grid.scales"),
        ({"grid": {"pos_iou": 0.2, "neg_iou": 0.3}}, "neg_iou"),
        ({"scoring": {"aggregation": "max"}}, "aggregation"),
        ({"metrics": {"target_bpcer": 2}}, "target_bpcer"),
        ({"gen": {"counts": {"train": 1, "dev": 1, "eval": True}}}, "integers"),
        ({"gen": {"class_mix": {"bonafide": 1.2}}}, "sum to 1"),
        ({"loss": {"beta": 0}}, "beta"),
    ],
)
def test_rejects(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        from_dict(doc)


def test_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"train": {"epochs": 3,}}')
    with pytest.raises(ConfigError, match="line 1 column"):
        load_config(p)


def test_unreadable(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
