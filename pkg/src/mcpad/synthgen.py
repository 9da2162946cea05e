"""Seeded synthetic multi-channel scenes with one face or attack instrument.

Every scene has a tilted background wall (far depth, graded infrared,
blocky color texture) and one subject inside the face box. What the
classes look like in each channel, before noise:

=============  ============================  ==============================
class          depth                         infrared
=============  ============================  ==============================
bonafide       ellipsoidal head + nose       warm centre, darker eye sockets
print          flat sheet over the box       uniform paper reflectance
replay         flat screen over the box      dark (screens emit little NIR)
rigid-mask     ellipsoid, no nose            uniform plastic, below skin
flexible-mask  shallower ellipsoid           uniform, just below skin
paper-mask     half-depth curved sheet       uniform paper reflectance
fake-head      ellipsoid + nose              below skin, mild gradient
glasses        as bonafide                   as bonafide, dark band over eyes
=============  ============================  ==============================

All classes share the same grayscale face drawing, so color alone cannot
separate them. Depth holes (zeros) are sprinkled at random, and Gaussian
noise of ``noise`` intensity units is added to every channel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcpad.container import RawFrame, read_frames, write_frames
from mcpad.errors import DataLayoutError
from mcpad.geometry import BBox

BONAFIDE = "bonafide"
ATTACK_CLASSES = ("print", "replay", "rigid-mask", "flexible-mask", "fake-head", "paper-mask", "glasses")
CLASSES = (BONAFIDE,) + ATTACK_CLASSES
TWO_D_ATTACKS = ("print", "replay")
SPLITS = ("train", "dev", "eval")
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("id", "split", "class", "x_min", "y_min", "x_max", "y_max", "seed")
FRAME_SUFFIX = ".mc16"

HOLE_FRACTION = 0.005
FACE_DEPTH = 1450.0
HEAD_RELIEF = 140.0
NOSE_RELIEF = 40.0
# skin is the most NIR-reflective material in the scene
SKIN_IR = 1300.0

SKIN_RGB = (205, 160, 135)
EYE_RGB = (50, 35, 30)
MOUTH_RGB = (150, 70, 70)


def default_mix() -> dict:
    mix = {BONAFIDE: 0.5}
    mix.update({c: 0.5 / len(ATTACK_CLASSES) for c in ATTACK_CLASSES})
    return mix


@dataclass(frozen=True)
class SceneSpec:
    cls: str
    face_box: BBox
    noise: float = 6.0
    seed: int = 0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown scene class {self.cls!r}")
        b = self.face_box
        if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
            raise ValueError(f"face box {b} not inside {self.width}x{self.height} image")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 128
    counts: dict = field(default_factory=lambda: {"train": 200, "dev": 100, "eval": 100})
    class_mix: dict = field(default_factory=default_mix)
    noise: float = 6.0
    seed: int = 7
    frames_per_sample: int = 1
    face_min: int = 24
    face_max: int = 96

    def __post_init__(self):
        if set(self.counts) != set(SPLITS) or any(int(c) <= 0 for c in self.counts.values()):
            raise ValueError(f"counts must give a positive size for each of {SPLITS}")
        unknown = set(self.class_mix) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown classes in mix: {sorted(unknown)}")
        if any(w < 0 for w in self.class_mix.values()) or not math.isclose(sum(self.class_mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError("class mix weights must be non-negative and sum to 1")
        if self.frames_per_sample < 1:
            raise ValueError("frames_per_sample must be at least 1")
        if not 8 <= self.face_min <= self.face_max <= self.image_size:
            raise ValueError("need 8 <= face_min <= face_max <= image_size")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


# --- scene rendering ------------------------------------------------------


def _ellipse(u, v, cu, cv, ru, rv):
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1


def _face_drawing(u, v, inside):
    """RGB face shared by every class."""
    rgb = np.zeros(u.shape + (3,))
    rgb[inside] = SKIN_RGB
    eyes = (_ellipse(u, v, -0.38, -0.2, 0.18, 0.09) | _ellipse(u, v, 0.38, -0.2, 0.18, 0.09)) & inside
    mouth = _ellipse(u, v, 0.0, 0.5, 0.3, 0.08) & inside
    rgb[eyes] = EYE_RGB
    rgb[mouth] = MOUTH_RGB
    return rgb


def _background(spec: SceneSpec, rng, xx, yy):
    depth = 1500.0 + 6.0 * xx + 2.0 * yy
    infrared = 300.0 + 9.0 * xx + 3.0 * yy
    coarse = rng.uniform(60, 180, size=(math.ceil(spec.height / 8), math.ceil(spec.width / 8), 3))
    color = np.kron(coarse, np.ones((8, 8, 1)))[: spec.height, : spec.width]
    return depth, infrared, color


def generate_scene(spec: SceneSpec) -> tuple[RawFrame, BBox, str]:
    """Render one frame; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64) + 0.5
    depth, infrared, color = _background(spec, rng, xx, yy)

    box = spec.face_box
    cx, cy = box.center
    u = (xx - cx) / (box.width / 2)
    v = (yy - cy) / (box.height / 2)
    r2 = u * u + v * v
    head = r2 <= 1
    rect = (xx >= box.x_min) & (xx < box.x_max) & (yy >= box.y_min) & (yy < box.y_max)
    dome = np.sqrt(np.clip(1 - r2, 0, None))
    nose = np.exp(-(u**2 + (v - 0.05) ** 2) / 0.03)
    face_rgb = _face_drawing(u, v, head)
    sockets = _ellipse(u, v, -0.38, -0.2, 0.26, 0.16) | _ellipse(u, v, 0.38, -0.2, 0.26, 0.16)
    skin_ir = SKIN_IR + 600.0 * np.exp(-r2 / 0.6) - 300.0 * sockets

    cls = spec.cls
    if cls in (BONAFIDE, "glasses"):
        depth = np.where(head, FACE_DEPTH - HEAD_RELIEF * dome - NOSE_RELIEF * nose, depth)
        infrared = np.where(head, skin_ir, infrared)
        color = np.where(head[..., None], face_rgb, color)
        if cls == "glasses":
            band = head & (v >= -0.42) & (v <= 0.02) & (np.abs(u) <= 0.85)
            infrared = np.where(band, 220.0, infrared)
            color = np.where(band[..., None], 0.6 * color, color)
    elif cls in TWO_D_ATTACKS:
        depth = np.where(rect, FACE_DEPTH + 0.8 * (xx - cx), depth)
        if cls == "print":
            luma = face_rgb.mean(axis=-1)
            infrared = np.where(rect, 1000.0 + 0.5 * luma, infrared)
            surround = np.array([235.0, 235.0, 230.0])
            color = np.where(rect[..., None], np.where(head[..., None], 0.9 * face_rgb + 20, surround), color)
        else:
            infrared = np.where(rect, 380.0, infrared)
            bezel = np.array([25.0, 25.0, 30.0])
            color = np.where(rect[..., None], np.where(head[..., None], np.minimum(face_rgb * 1.1, 255), bezel), color)
    else:
        relief, nose_relief, ir = {
            "rigid-mask": (1.0, 0.0, 1150.0),
            "flexible-mask": (0.8, 0.5, 1250.0),
            "paper-mask": (0.5, 0.0, 950.0),
            "fake-head": (1.0, 1.0, 1050.0 + 100.0 * u),
        }[cls]
        depth = np.where(head, FACE_DEPTH - HEAD_RELIEF * relief * dome - NOSE_RELIEF * nose_relief * nose, depth)
        infrared = np.where(head, ir, infrared)
        color = np.where(head[..., None], face_rgb, color)

    if spec.noise > 0:
        depth = depth + rng.normal(0, spec.noise, depth.shape)
        infrared = infrared + rng.normal(0, spec.noise, infrared.shape)
        color = color + rng.normal(0, spec.noise, color.shape)
    depth = np.clip(np.rint(depth), 1, 65535)
    depth[rng.random(depth.shape) < HOLE_FRACTION] = 0
    frame = RawFrame(
        depth.astype(np.uint16),
        np.clip(np.rint(infrared), 1, 65535).astype(np.uint16),
        np.clip(np.rint(color), 0, 255).astype(np.uint8),
    )
    return frame, spec.face_box, cls


# --- datasets on disk -----------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    id: str
    split: str
    cls: str
    box: BBox
    seed: int

    @property
    def label(self) -> str:
        return BONAFIDE if self.cls == BONAFIDE else "attack"

    @property
    def attack_type(self) -> str:
        return "" if self.cls == BONAFIDE else self.cls


def allocate(total: int, mix: dict) -> list[str]:
    """Exact class counts by largest remainder, in canonical class order."""
    classes = [c for c in CLASSES if mix.get(c, 0) > 0]
    quotas = [total * mix[c] for c in classes]
    counts = [math.floor(q) for q in quotas]
    by_remainder = sorted(range(len(classes)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in by_remainder[: total - sum(counts)]:
        counts[i] += 1
    return [c for c, n in zip(classes, counts) for _ in range(n)]


def _sample_box(rng, cfg: GenConfig) -> BBox:
    aspect = rng.uniform(1.1, 1.33)
    w = int(round(rng.uniform(cfg.face_min, cfg.face_max / aspect)))
    h = min(cfg.face_max, int(round(w * aspect)))
    x0 = int(rng.integers(0, cfg.image_size - w + 1))
    y0 = int(rng.integers(0, cfg.image_size - h + 1))
    return BBox(x0, y0, x0 + w, y0 + h)


def plan_dataset(cfg: GenConfig) -> list[ManifestRow]:
    """Manifest rows for every sample, sorted by id."""
    split_seeds = np.random.SeedSequence(cfg.seed).spawn(len(SPLITS))
    rows = []
    for split, ss in zip(SPLITS, split_seeds):
        rng = np.random.default_rng(ss)
        classes = allocate(int(cfg.counts[split]), cfg.class_mix)
        rng.shuffle(classes)
        for i, cls in enumerate(classes):
            box = _sample_box(rng, cfg)
            seed = int(rng.integers(0, 2**63 - 1))
            rows.append(ManifestRow(f"{split}_{i:05d}", split, cls, box, seed))
    return sorted(rows, key=lambda r: r.id)


def sample_frames(row: ManifestRow, cfg: GenConfig) -> list[RawFrame]:
    seeds = np.random.SeedSequence(row.seed).generate_state(cfg.frames_per_sample, dtype=np.uint64)
    frames = []
    for s in seeds:
        spec = SceneSpec(row.cls, row.box, cfg.noise, int(s), cfg.image_size, cfg.image_size)
        frames.append(generate_scene(spec)[0])
    return frames


def frame_path(root, sample_id: str) -> Path:
    return Path(root) / "frames" / f"{sample_id}{FRAME_SUFFIX}"


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            b = r.box
            w.writerow([r.id, r.split, r.cls, _num(b.x_min), _num(b.y_min), _num(b.x_max), _num(b.y_max), r.seed])


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def read_manifest(root) -> list[ManifestRow]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise DataLayoutError(f"no {MANIFEST} in {root}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataLayoutError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        for rec in reader:
            try:
                box = BBox(*(float(rec[k]) for k in ("x_min", "y_min", "x_max", "y_max")))
                row = ManifestRow(rec["id"], rec["split"], rec["class"], box, int(rec["seed"]))
            except (ValueError, TypeError) as exc:
                raise DataLayoutError(f"{path}: bad row {rec}: {exc}") from exc
            if row.split not in SPLITS or row.cls not in CLASSES:
                raise DataLayoutError(f"{path}: bad split or class in row {rec}")
            rows.append(row)
    return rows


def load_frames(root, row: ManifestRow) -> list[RawFrame]:
    path = frame_path(root, row.id)
    if not path.is_file():
        raise DataLayoutError(f"frame file for {row.id} missing: {path}")
    return read_frames(path)


def generate_dataset(cfg: GenConfig, out_dir) -> list[ManifestRow]:
    """Write every sample under ``out_dir/frames`` plus ``out_dir/manifest.csv``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rows = plan_dataset(cfg)
    for row in rows:
        write_frames(frame_path(out, row.id), sample_frames(row, cfg))
    write_manifest(out / MANIFEST, rows)
    return rows
