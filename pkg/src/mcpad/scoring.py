"""Turning detector output into a scalar PAD score.

Higher scores mean more bonafide. A presentation is accepted as bonafide
at threshold ``tau`` iff ``score >= tau``.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Iterable

from mcpad.detector import BONAFIDE, NONFACE, Detection

PROVENANCE_BONAFIDE = "bonafide-detection"
PROVENANCE_NONFACE = "nonface-detection"
PROVENANCE_NONE = "no-detection"
PROVENANCE_VIDEO = "video-aggregate"

AGGREGATIONS = ("mean", "median")


@dataclass(frozen=True)
class PadScore:
    value: float
    provenance: str

    def __post_init__(self):
        if not 0 <= self.value <= 1:
            raise ValueError(f"score {self.value} outside [0, 1]")


def _rank(det: Detection) -> tuple:
    return (-det.probability, det.label != BONAFIDE, det.anchor_index)


def select_detection(dets: Iterable[Detection], det_threshold: float = 0.5) -> Detection | None:
    """Most confident detection at or above ``det_threshold``.

    Ties go to bonafide over non-face, then to the lowest anchor index.
    """
    qualifying = [d for d in dets if d.probability >= det_threshold]
    if not qualifying:
        return None
    return min(qualifying, key=_rank)


def pad_score(det: Detection | None, floor: float = 0.0) -> PadScore:
    if not 0 <= floor <= 1:
        raise ValueError(f"floor {floor} outside [0, 1]")
    if det is None:
        return PadScore(floor, PROVENANCE_NONE)
    if det.label == BONAFIDE:
        return PadScore(det.probability, PROVENANCE_BONAFIDE)
    if det.label == NONFACE:
        return PadScore(1.0 - det.probability, PROVENANCE_NONFACE)
    raise ValueError(f"unknown detection label {det.label!r}")


def aggregate_video(frame_scores: list[PadScore], rule: str = "mean") -> PadScore:
    """Collapse the frame scores of one video into a single score."""
    if not frame_scores:
        raise ValueError("cannot aggregate an empty list of frame scores")
    if len(frame_scores) == 1:
        return frame_scores[0]
    values = [s.value for s in frame_scores]
    if rule == "mean":
        value = math.fsum(values) / len(values)
    elif rule == "median":
        value = statistics.median(values)
    else:
        raise ValueError(f"unknown aggregation rule {rule!r}; expected one of {AGGREGATIONS}")
    # fsum / n can land one ulp outside the inputs; keep the mean between them
    return PadScore(min(max(values), max(min(values), value)), PROVENANCE_VIDEO)
