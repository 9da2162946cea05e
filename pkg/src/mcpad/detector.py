"""Reference anchor detector over composite images.

Each anchor is described by hand-crafted statistics of its pixel support,
and two linear heads sit on top: a two-class sigmoid classifier
(bonafide, non-face) and a four-output box regressor. Training uses focal
loss, smooth-L1 regression and Adam.

Feature layout (index: meaning), computed over the anchor clipped to the
image, with the "center" being the inner half of the support along each
axis and the "border" the remaining ring::

    0-2    mean of gray, depth, infrared
    3-5    standard deviation of gray, depth, infrared
    6-8    center mean minus border mean, per plane (0 if no ring)
    9-11   |gray - depth|, |gray - infrared|, |depth - infrared| of the means
    12-38  3x3 grid of cell means, plane-major then row-major (gray cells
           12-20, depth 21-29, infrared 30-38)

The heads do not see these 39 statistics directly. Each is standardized
with training-set moments, then every pairwise product ``z_i * z_j``
(``i <= j``, 780 of them) is appended and standardized in turn, giving
819 inputs plus a constant bias. The grid cells let a head see where
inside the anchor a cue sits (relief at the centre, a dark band across
the eyes); the products let it require two cues at once, e.g. skin-level
infrared *and* near depth, which a linear rule on raw statistics cannot.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcpad.errors import CorruptFileError, DegenerateAnchorError, InvalidBoxError, UnlearnableDatasetError
from mcpad.geometry import (
    POSITIVE,
    AnchorAssignment,
    DEFAULT_NEG_IOU,
    DEFAULT_POS_IOU,
    AnchorGrid,
    BBox,
    assign_anchors,
    clip_array,
    decode_array,
    encode_array,
    generate_anchors_array,
)
from mcpad.loss import DEFAULT_BETA, FocalConfig, detector_loss_and_grads, sigmoid
from mcpad.preprocess import CompositeImage, round_half_up

log = logging.getLogger(__name__)

BONAFIDE = "bonafide"
NONFACE = "non-face"
CLASS_NAMES = (BONAFIDE, NONFACE)
GRID_CELLS = 3
NUM_STATS = 12 + 3 * GRID_CELLS * GRID_CELLS
_PAIRS = np.triu_indices(NUM_STATS)
NUM_FEATURES = NUM_STATS + len(_PAIRS[0])
FEATURE_DIM = NUM_FEATURES + 1
# rows per chunk when a pass over many anchors would not fit in memory at once
_CHUNK = 2048
PRIOR_PROB = 0.01
# learning rate reported for the pretrained CNN; far too small for heads trained from scratch
PRETRAINED_CNN_LR = 2e-5

MODEL_MAGIC = b"MCPD"
MODEL_VERSION = 1


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    seed: int = 7
    batch_size: int = 8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: AdamConfig) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m[k] = cfg.beta1 * state.m.get(k, np.zeros_like(g)) + (1 - cfg.beta1) * g
        v[k] = cfg.beta2 * state.v.get(k, np.zeros_like(g)) + (1 - cfg.beta2) * g * g
        new_params[k] = p - cfg.lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + cfg.eps)
    return new_params, AdamState(t, m, v)


@dataclass
class DetectorModel:
    grid: AnchorGrid
    feat_mean: np.ndarray  # (NUM_FEATURES,)
    feat_std: np.ndarray  # (NUM_FEATURES,)
    w_cls: np.ndarray  # (2, FEATURE_DIM)
    w_reg: np.ndarray  # (4, FEATURE_DIM)

    def __post_init__(self):
        if self.feat_mean.shape != (NUM_FEATURES,) or self.feat_std.shape != (NUM_FEATURES,):
            raise ValueError("normalization stats must have one entry per feature")
        if self.w_cls.shape != (len(CLASS_NAMES), FEATURE_DIM) or self.w_reg.shape != (4, FEATURE_DIM):
            raise ValueError(f"weight shapes {self.w_cls.shape}, {self.w_reg.shape} do not match feature dim")

    @classmethod
    def zeros(cls, grid: AnchorGrid = AnchorGrid()) -> DetectorModel:
        return cls(
            grid,
            np.zeros(NUM_FEATURES),
            np.ones(NUM_FEATURES),
            np.zeros((len(CLASS_NAMES), FEATURE_DIM)),
            np.zeros((4, FEATURE_DIM)),
        )

    @property
    def params(self) -> dict:
        return {"w_cls": self.w_cls, "w_reg": self.w_reg}

    def with_params(self, params: dict) -> DetectorModel:
        return DetectorModel(self.grid, self.feat_mean, self.feat_std, params["w_cls"], params["w_reg"])

    def normalize(self, stats: np.ndarray) -> np.ndarray:
        """Map raw ``(N, NUM_STATS)`` statistics to ``(N, FEATURE_DIM)`` head inputs."""
        out = np.empty((len(stats), FEATURE_DIM))
        z = out[:, :NUM_STATS]
        np.subtract(stats, self.feat_mean[:NUM_STATS], out=z)
        z /= self.feat_std[:NUM_STATS]
        pair_products(z, out=out[:, NUM_STATS:-1])
        q = out[:, NUM_STATS:-1]
        q -= self.feat_mean[NUM_STATS:]
        q /= self.feat_std[NUM_STATS:]
        out[:, -1] = 1.0
        return out


@dataclass(frozen=True)
class Detection:
    label: str
    probability: float
    box: BBox
    anchor_index: int = 0

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise ValueError(f"unknown label {self.label!r}")
        if not 0 <= self.probability <= 1:
            raise ValueError(f"probability {self.probability} outside [0, 1]")


# --- features -------------------------------------------------------------


def _integral(plane: np.ndarray) -> np.ndarray:
    s = np.zeros((plane.shape[0] + 1, plane.shape[1] + 1), dtype=np.int64)
    s[1:, 1:] = plane.astype(np.int64).cumsum(0).cumsum(1)
    return s


def _box_sum(s: np.ndarray, x0, y0, x1, y1) -> np.ndarray:
    return s[y1, x1] - s[y0, x1] - s[y1, x0] + s[y0, x0]


def pixel_support(anchors: np.ndarray, width: int, height: int) -> np.ndarray:
    """Integer ``[x0, y0, x1, y1)`` pixel ranges of anchors clipped to the image."""
    px = round_half_up(clip_array(anchors, width, height)).astype(np.int64)
    bad = (px[:, 2] <= px[:, 0]) | (px[:, 3] <= px[:, 1])
    if bad.any():
        raise DegenerateAnchorError(f"anchor {anchors[np.flatnonzero(bad)[0]].tolist()} has no pixels inside the image")
    return px


def anchor_statistics(img: CompositeImage, anchors: np.ndarray) -> np.ndarray:
    """Raw (unnormalized) ``(N, NUM_STATS)`` statistics for every anchor."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    px = pixel_support(anchors, img.width, img.height)
    x0, y0, x1, y1 = px.T
    w = x1 - x0
    h = y1 - y0
    cx0, cx1 = x0 + w // 4, x1 - w // 4
    cy0, cy1 = y0 + h // 4, y1 - h // 4
    n = w * h
    n_center = (cx1 - cx0) * (cy1 - cy0)
    n_border = n - n_center

    xs = [x0 + w * i // GRID_CELLS for i in range(GRID_CELLS + 1)]
    ys = [y0 + h * i // GRID_CELLS for i in range(GRID_CELLS + 1)]

    out = np.empty((len(anchors), NUM_STATS))
    col = 12
    for k in range(3):
        plane = img.planes[k]
        s1 = _integral(plane)
        for i in range(GRID_CELLS):
            for j in range(GRID_CELLS):
                cell_n = (xs[j + 1] - xs[j]) * (ys[i + 1] - ys[i])
                cell = _box_sum(s1, xs[j], ys[i], xs[j + 1], ys[i + 1])
                # cells of anchors under 3 px wide are empty; fall back to the anchor mean
                with np.errstate(invalid="ignore", divide="ignore"):
                    out[:, col] = np.where(cell_n > 0, cell / cell_n, _box_sum(s1, x0, y0, x1, y1) / n)
                col += 1
        s2 = _integral(plane.astype(np.int64) ** 2)
        total = _box_sum(s1, x0, y0, x1, y1)
        total_sq = _box_sum(s2, x0, y0, x1, y1)
        center = _box_sum(s1, cx0, cy0, cx1, cy1)
        out[:, k] = total / n
        # exact integer numerator keeps constant regions at zero variance
        out[:, 3 + k] = np.sqrt((n * total_sq - total * total) / (n * n).astype(np.float64))
        with np.errstate(invalid="ignore", divide="ignore"):
            contrast = center / n_center - (total - center) / n_border
        out[:, 6 + k] = np.where(n_border > 0, contrast, 0.0)
    out[:, 9] = np.abs(out[:, 0] - out[:, 1])
    out[:, 10] = np.abs(out[:, 0] - out[:, 2])
    out[:, 11] = np.abs(out[:, 1] - out[:, 2])
    return out


def pair_products(z: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """All products ``z[:, i] * z[:, j]`` with ``i <= j``, row-major over ``(i, j)``."""
    n, d = z.shape
    if out is None:
        out = np.empty((n, d * (d + 1) // 2))
    offset = 0
    for i in range(d):
        np.multiply(z[:, i : i + 1], z[:, i:], out=out[:, offset : offset + d - i])
        offset += d - i
    return out


def extract_features(img: CompositeImage, anchor: BBox, model: DetectorModel | None = None) -> np.ndarray:
    """Features of one anchor.

    With a model, the ``FEATURE_DIM`` head inputs; without one, the raw
    ``NUM_STATS`` statistics followed by the bias term.
    """
    stats = anchor_statistics(img, anchor.as_array()[None])
    if model is not None:
        return model.normalize(stats)[0]
    return np.append(stats[0], 1.0)


# --- inference ------------------------------------------------------------


def anchors_for(model_or_grid, img: CompositeImage) -> np.ndarray:
    grid = model_or_grid.grid if isinstance(model_or_grid, DetectorModel) else model_or_grid
    return generate_anchors_array(grid.for_image(img.width, img.height))


def predict(model: DetectorModel, img: CompositeImage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-anchor class probabilities ``(N, 2)``, raw deltas ``(N, 4)`` and anchors ``(N, 4)``."""
    anchors = anchors_for(model, img)
    feats = model.normalize(anchor_statistics(img, anchors))
    return sigmoid(feats @ model.w_cls.T), feats @ model.w_reg.T, anchors


def forward(model: DetectorModel, img: CompositeImage, det_threshold: float = 0.5) -> list[Detection]:
    """Detections for every anchor whose better class probability reaches ``det_threshold``.

    The label is the more probable class (bonafide on a tie). A decoded
    box that collapses after clipping falls back to the clipped anchor.
    """
    probs, deltas, anchors = predict(model, img)
    best = probs.argmax(axis=1)
    best_p = probs[np.arange(len(probs)), best]
    keep = np.flatnonzero(best_p >= det_threshold)
    if not len(keep):
        return []
    boxes = clip_array(decode_array(anchors[keep], deltas[keep]), img.width, img.height)
    fallback = clip_array(anchors[keep], img.width, img.height)
    dets = []
    for row, i in enumerate(keep):
        try:
            box = BBox.from_array(boxes[row])
        except InvalidBoxError:
            box = BBox.from_array(fallback[row])
        dets.append(Detection(CLASS_NAMES[best[i]], float(best_p[i]), box, int(i)))
    return dets


# --- training -------------------------------------------------------------


@dataclass
class SceneTargets:
    """Fixed per-scene training arrays (features do not depend on weights)."""

    stats: np.ndarray
    assign: AnchorAssignment
    reg_targets: np.ndarray


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_loss: float | None


@dataclass
class TrainResult:
    model: DetectorModel
    history: list[EpochLog]
    initial_loss: float
    selected_epoch: int


def prepare_scene(img, gt, grid: AnchorGrid, pos_thr=DEFAULT_POS_IOU, neg_thr=DEFAULT_NEG_IOU) -> SceneTargets:
    anchors = anchors_for(grid, img)
    assign = assign_anchors(anchors, gt, pos_thr, neg_thr)
    reg = np.zeros((len(anchors), 4))
    pos = np.flatnonzero(assign.labels == POSITIVE)
    if len(pos):
        gt_boxes = np.array([box.as_array() for box, _ in gt])
        reg[pos] = encode_array(anchors[pos], gt_boxes[assign.matched[pos]])
    return SceneTargets(anchor_statistics(img, anchors), assign, reg)


def _chunks(stats: np.ndarray):
    for start in range(0, len(stats), _CHUNK):
        yield stats[start : start + _CHUNK]


def fit_normalization(scenes: list[SceneTargets]) -> tuple[np.ndarray, np.ndarray]:
    """Training-set mean and std of every non-bias feature (std 0 becomes 1)."""
    stats = np.concatenate([s.stats for s in scenes])
    mean = np.empty(NUM_FEATURES)
    std = np.empty(NUM_FEATURES)
    mean[:NUM_STATS] = stats.mean(axis=0)
    std[:NUM_STATS] = stats.std(axis=0)
    std[:NUM_STATS][std[:NUM_STATS] == 0] = 1.0
    # two chunked passes over the products so they are never all in memory
    n = len(stats)
    z = (stats - mean[:NUM_STATS]) / std[:NUM_STATS]
    total = sum(pair_products(c).sum(axis=0) for c in _chunks(z))
    mean[NUM_STATS:] = total / n
    sq = sum(((pair_products(c) - mean[NUM_STATS:]) ** 2).sum(axis=0) for c in _chunks(z))
    std[NUM_STATS:] = np.sqrt(sq / n)
    std[NUM_STATS:][std[NUM_STATS:] == 0] = 1.0
    return mean, std


class _Pool:
    """Anchors of several scenes; features are expanded chunk by chunk."""

    def __init__(self, scenes: list[SceneTargets], model: DetectorModel):
        self.stats = np.concatenate([s.stats for s in scenes])
        self.model = model
        self.assign = AnchorAssignment(
            np.concatenate([s.assign.labels for s in scenes]),
            np.concatenate([s.assign.classes for s in scenes]),
            np.concatenate([s.assign.matched for s in scenes]),
            np.concatenate([s.assign.max_iou for s in scenes]),
        )
        self.reg = np.concatenate([s.reg_targets for s in scenes])

    def loss_and_grads(self, params: dict, focal: FocalConfig, beta: float, need_grads: bool = True):
        """Loss parts and, if asked, weight gradients.

        With gradients the expanded features are kept for the backward
        product, so only call that on pools small enough to hold them.
        """
        w = np.concatenate([params["w_cls"], params["w_reg"]])
        feats = [self.model.normalize(c) for c in _chunks(self.stats)] if need_grads else None
        if feats is not None:
            out = np.concatenate([f @ w.T for f in feats])
        else:
            out = np.concatenate([self.model.normalize(c) @ w.T for c in _chunks(self.stats)])
        total, cls_part, reg_part, g_cls, g_reg = detector_loss_and_grads(
            self.assign, out[:, :2], out[:, 2:], self.reg, focal, beta
        )
        if feats is None:
            return (total, cls_part, reg_part), None
        g = np.concatenate([g_cls, g_reg], axis=1)
        gw = np.zeros_like(w)
        for k, f in enumerate(feats):
            gw += g[k * _CHUNK : (k + 1) * _CHUNK].T @ f
        return (total, cls_part, reg_part), {"w_cls": gw[:2], "w_reg": gw[2:]}


def detector_loss(model: DetectorModel, scenes: list[SceneTargets], focal=FocalConfig(), beta=DEFAULT_BETA):
    """Pooled loss ``(total, cls, reg)`` and weight gradients over ``scenes``."""
    return _Pool(scenes, model).loss_and_grads(model.params, focal, beta)


def init_model(grid: AnchorGrid, mean, std, seed: int) -> DetectorModel:
    rng = np.random.default_rng(seed)
    w_cls = rng.normal(0.0, 0.01, (len(CLASS_NAMES), FEATURE_DIM))
    w_cls[:, -1] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    w_reg = rng.normal(0.0, 0.01, (4, FEATURE_DIM))
    return DetectorModel(grid, mean, std, w_cls, w_reg)


def train(
    dataset: list,
    cfg: AdamConfig = AdamConfig(),
    focal: FocalConfig = FocalConfig(),
    grid: AnchorGrid = AnchorGrid(),
    val: list | None = None,
    beta: float = DEFAULT_BETA,
    pos_thr: float = DEFAULT_POS_IOU,
    neg_thr: float = DEFAULT_NEG_IOU,
) -> TrainResult:
    """Fit the detector on ``[(CompositeImage, [(BBox, class_index), ...]), ...]``.

    Scenes are visited in a seeded shuffle, ``cfg.batch_size`` per Adam
    step. With a validation set, the returned model is the one from the
    epoch with the lowest validation loss (earliest on ties); otherwise
    the last epoch's.

    Raises:
        UnlearnableDatasetError: no anchor in the training set is positive.
    """
    if not dataset:
        raise UnlearnableDatasetError("training set is empty")
    scenes = [prepare_scene(img, gt, grid, pos_thr, neg_thr) for img, gt in dataset]
    if sum(s.assign.num_positive for s in scenes) == 0:
        raise UnlearnableDatasetError("no positive anchors in the training set")
    val_scenes = [prepare_scene(img, gt, grid, pos_thr, neg_thr) for img, gt in val] if val else None

    mean, std = fit_normalization(scenes)
    model = init_model(grid, mean, std, cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    full = _Pool(scenes, model)
    dev = _Pool(val_scenes, model) if val_scenes else None
    params = model.params
    state = AdamState()
    initial_loss = full.loss_and_grads(params, focal, beta, need_grads=False)[0][0]
    history = []
    best = (math.inf, 0, params)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), cfg.batch_size):
            batch = _Pool([scenes[i] for i in order[start : start + cfg.batch_size]], model)
            _, grads = batch.loss_and_grads(params, focal, beta)
            params, state = adam_step(params, grads, state, cfg)
        train_loss = full.loss_and_grads(params, focal, beta, need_grads=False)[0][0]
        dev_loss = dev.loss_and_grads(params, focal, beta, need_grads=False)[0][0] if dev else None
        history.append(EpochLog(epoch, train_loss, dev_loss))
        log.debug("epoch %d train %.6f dev %s", epoch, train_loss, dev_loss)
        score = dev_loss if dev else -epoch
        if score < best[0]:
            best = (score, epoch, copy.deepcopy(params))

    _, selected, params = best
    return TrainResult(model.with_params(params), history, initial_loss, selected)


# --- persistence ----------------------------------------------------------

_HEAD = struct.Struct("<4sHHHHd")


def model_to_bytes(model: DetectorModel) -> bytes:
    """Binary layout, all little-endian::

        magic "MCPD", version u16, n_scales u16, n_ratios u16, feature_dim u16,
        stride f64, scales f64[n_scales], ratios f64[n_ratios],
        feat_mean f64[819], feat_std f64[819], w_cls f64[2*820], w_reg f64[4*820]
    """
    g = model.grid
    parts = [
        _HEAD.pack(MODEL_MAGIC, MODEL_VERSION, len(g.scales), len(g.aspect_ratios), FEATURE_DIM, g.stride),
        np.asarray(g.scales, dtype="<f8").tobytes(),
        np.asarray(g.aspect_ratios, dtype="<f8").tobytes(),
    ]
    for arr in (model.feat_mean, model.feat_std, model.w_cls, model.w_reg):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes, source="<bytes>") -> DetectorModel:
    if len(buf) < _HEAD.size:
        raise CorruptFileError(source, "truncated model header")
    magic, version, n_s, n_r, dim, stride = _HEAD.unpack_from(buf)
    if magic != MODEL_MAGIC:
        raise CorruptFileError(source, f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise CorruptFileError(source, f"unsupported model version {version}")
    if dim != FEATURE_DIM:
        raise CorruptFileError(source, f"feature dim {dim} != {FEATURE_DIM}")
    counts = [n_s, n_r, NUM_FEATURES, NUM_FEATURES, 2 * FEATURE_DIM, 4 * FEATURE_DIM]
    expected = _HEAD.size + 8 * sum(counts)
    if len(buf) != expected:
        raise CorruptFileError(source, f"expected {expected} bytes, found {len(buf)}")
    arrays, offset = [], _HEAD.size
    for c in counts:
        arrays.append(np.frombuffer(buf, dtype="<f8", count=c, offset=offset).astype(np.float64))
        offset += 8 * c
    scales, ratios, mean, std, w_cls, w_reg = arrays
    try:
        grid = AnchorGrid(stride, tuple(scales), tuple(ratios))
    except ValueError as exc:
        raise CorruptFileError(source, str(exc)) from exc
    return DetectorModel(grid, mean, std, w_cls.reshape(2, FEATURE_DIM), w_reg.reshape(4, FEATURE_DIM))


def save_model(model: DetectorModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> DetectorModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFileError(path, f"unreadable: {exc.strerror}") from exc
    return model_from_bytes(buf, path)
