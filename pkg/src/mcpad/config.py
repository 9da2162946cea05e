"""JSON run configuration with strict parsing.

Every section and key is optional; missing ones take the library
defaults. Unknown sections or keys, wrong types and out-of-range values
all raise :class:`~mcpad.errors.ConfigError`, so a typo never silently
falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from mcpad.detector import AdamConfig
from mcpad.errors import ConfigError
from mcpad.geometry import DEFAULT_NEG_IOU, DEFAULT_POS_IOU, AnchorGrid
from mcpad.loss import DEFAULT_BETA, FocalConfig
from mcpad.preprocess import NormConfig
from mcpad.scoring import AGGREGATIONS
from mcpad.synthgen import GenConfig


@dataclass(frozen=True)
class ScoringConfig:
    det_threshold: float = 0.5
    floor: float = 0.0
    aggregation: str = "mean"

    def __post_init__(self):
        if not 0 <= self.det_threshold <= 1:
            raise ValueError("det_threshold must lie in [0, 1]")
        if not 0 <= self.floor <= 1:
            raise ValueError("floor must lie in [0, 1]")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass(frozen=True)
class MetricsConfig:
    target_bpcer: float = 0.002
    alpha_grid_size: int = 21

    def __post_init__(self):
        if not 0 <= self.target_bpcer <= 1:
            raise ValueError("target_bpcer must lie in [0, 1]")
        if self.alpha_grid_size < 1:
            raise ValueError("alpha_grid_size must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    preprocess: NormConfig = field(default_factory=NormConfig)
    grid: AnchorGrid = field(default_factory=AnchorGrid)
    pos_iou: float = DEFAULT_POS_IOU
    neg_iou: float = DEFAULT_NEG_IOU
    loss: FocalConfig = field(default_factory=FocalConfig)
    beta: float = DEFAULT_BETA
    train: AdamConfig = field(default_factory=AdamConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def with_seed(self, seed: int) -> RunConfig:
        """Same config with both the data and the training seed replaced."""
        return dataclasses.replace(
            self,
            gen=dataclasses.replace(self.gen, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "gen": {
                "image_size": self.gen.image_size,
                "counts": dict(self.gen.counts),
                "class_mix": dict(self.gen.class_mix),
                "noise": self.gen.noise,
                "seed": self.gen.seed,
                "frames_per_sample": self.gen.frames_per_sample,
                "face_min": self.gen.face_min,
                "face_max": self.gen.face_max,
            },
            "preprocess": {"sigma": self.preprocess.sigma},
            "grid": {
                "stride": self.grid.stride,
                "scales": list(self.grid.scales),
                "ratios": list(self.grid.aspect_ratios),
                "pos_iou": self.pos_iou,
                "neg_iou": self.neg_iou,
            },
            "loss": {"alpha": self.loss.alpha, "gamma": self.loss.gamma, "beta": self.beta},
            "train": {f.name: getattr(self.train, f.name) for f in dataclasses.fields(AdamConfig)},
            "scoring": dataclasses.asdict(self.scoring),
            "metrics": dataclasses.asdict(self.metrics),
        }


# key -> accepted python types; bool is excluded from numbers on purpose
_NUM = (int, float)
_SCHEMA = {
    "gen": {
        "image_size": int,
        "counts": dict,
        "class_mix": dict,
        "noise": _NUM,
        "seed": int,
        "frames_per_sample": int,
        "face_min": int,
        "face_max": int,
    },
    "preprocess": {"sigma": _NUM},
    "grid": {"stride": _NUM, "scales": list, "ratios": list, "pos_iou": _NUM, "neg_iou": _NUM},
    "loss": {"alpha": _NUM, "gamma": _NUM, "beta": _NUM},
    "train": {
        "lr": _NUM,
        "epochs": int,
        "seed": int,
        "batch_size": int,
        "beta1": _NUM,
        "beta2": _NUM,
        "eps": _NUM,
    },
    "scoring": {"det_threshold": _NUM, "floor": _NUM, "aggregation": str},
    "metrics": {"target_bpcer": _NUM, "alpha_grid_size": int},
}


def _check_types(doc) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        keys = _SCHEMA[section]
        extra = set(body) - set(keys)
        if extra:
            raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(extra))}")
        for key, value in body.items():
            expected = keys[key]
            if isinstance(value, bool) or not isinstance(value, expected):
                raise ConfigError(f"{section}.{key} has the wrong type: {value!r}")


def _numbers(values, name: str) -> tuple[float, ...]:
    if any(isinstance(v, bool) or not isinstance(v, _NUM) for v in values):
        raise ConfigError(f"{name} must be a list of numbers")
    return tuple(float(v) for v in values)


def from_dict(doc: dict) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed JSON document."""
    _check_types(doc)
    sec = {name: doc.get(name, {}) for name in _SCHEMA}
    try:
        g = dict(sec["gen"])
        if "counts" in g:
            if any(isinstance(v, bool) or not isinstance(v, int) for v in g["counts"].values()):
                raise ConfigError("gen.counts values must be integers")
        if "class_mix" in g:
            g["class_mix"] = dict(zip(g["class_mix"], _numbers(g["class_mix"].values(), "gen.class_mix")))
        gen = GenConfig(**g)

        gr = dict(sec["grid"])
        pos_iou = float(gr.pop("pos_iou", DEFAULT_POS_IOU))
        neg_iou = float(gr.pop("neg_iou", DEFAULT_NEG_IOU))
        base = AnchorGrid()
        grid = AnchorGrid(
            float(gr.get("stride", base.stride)),
            _numbers(gr.get("scales", base.scales), "grid.scales"),
            _numbers(gr.get("ratios", base.aspect_ratios), "grid.ratios"),
            gen.image_size,
            gen.image_size,
        )
        lo = dict(sec["loss"])
        beta = float(lo.pop("beta", DEFAULT_BETA))
        return RunConfig(
            gen=gen,
            preprocess=NormConfig(**sec["preprocess"]),
            grid=grid,
            pos_iou=pos_iou,
            neg_iou=neg_iou,
            loss=FocalConfig(**lo),
            beta=beta,
            train=AdamConfig(**sec["train"]),
            scoring=ScoringConfig(**sec["scoring"]),
            metrics=MetricsConfig(**sec["metrics"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return from_dict(doc)
