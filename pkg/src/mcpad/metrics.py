"""ISO/IEC 30107-3 PAD error rates, threshold selection, ROC and EPC.

Score orientation is fixed: a presentation is accepted as bonafide iff
``score >= tau``. Under that convention FMR is APCER and FNMR is BPCER.
Candidate thresholds are always observed score values (plus 0), never
interpolated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from mcpad.errors import UndefinedMetricError

BONAFIDE = "bonafide"
ATTACK = "attack"
LABELS = (BONAFIDE, ATTACK)
ATTACK_TYPES = ("print", "replay", "rigid-mask", "flexible-mask", "fake-head", "paper-mask", "glasses")


@dataclass(frozen=True)
class ScoredSample:
    id: str
    label: str
    score: float
    attack_type: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if (self.label == ATTACK) != bool(self.attack_type):
            raise ValueError(f"{self.id}: attack_type must be set exactly for attack samples")
        if not 0 <= self.score <= 1:
            raise ValueError(f"{self.id}: score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class EpcPoint:
    alpha: float
    dev_threshold: float
    eval_hter: float


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    apcer: float
    bpcer: float


@dataclass(frozen=True)
class PerAttackReport:
    apcer_by_type: dict
    apcer_ap: float
    bpcer: float
    acer_ap: float


def _sorted(scores, metric: str) -> np.ndarray:
    arr = np.sort(np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=np.float64))
    if arr.size == 0:
        raise UndefinedMetricError(metric, "empty score set")
    return arr


def _accepted(sorted_scores: np.ndarray, tau) -> np.ndarray:
    return sorted_scores.size - np.searchsorted(sorted_scores, tau, side="left")


def _rejected(sorted_scores: np.ndarray, tau) -> np.ndarray:
    return np.searchsorted(sorted_scores, tau, side="left")


def apcer(attack_scores, tau: float) -> float:
    """Fraction of attack presentations accepted as bonafide."""
    s = _sorted(attack_scores, "APCER")
    return float(_accepted(s, tau) / s.size)


def bpcer(bonafide_scores, tau: float) -> float:
    """Fraction of bonafide presentations rejected."""
    s = _sorted(bonafide_scores, "BPCER")
    return float(_rejected(s, tau) / s.size)


def wer(fmr: float, fnmr: float, alpha: float) -> float:
    """Weighted error rate ``alpha * FMR + (1 - alpha) * FNMR``."""
    return alpha * fmr + (1 - alpha) * fnmr


def acer(apcer_value: float, bpcer_value: float) -> float:
    """Mean of the two error rates, computed as WER at alpha 0.5 so the two agree bit for bit."""
    return wer(apcer_value, bpcer_value, 0.5)


hter = acer


def threshold_at_bpcer(dev_bonafide_scores, target: float) -> float:
    """Highest candidate threshold whose dev BPCER stays within ``target``.

    Candidates are the dev bonafide scores plus 0. Taking the highest
    admissible one rejects as many attacks as the BPCER budget allows.
    """
    if not 0 <= target <= 1:
        raise ValueError(f"target rate {target} outside [0, 1]")
    s = _sorted(dev_bonafide_scores, "BPCER")
    candidates = np.unique(np.append(s, 0.0))
    rates = _rejected(s, candidates) / s.size
    ok = np.flatnonzero(rates <= target)
    return float(candidates[ok[-1]])


def split_scores(samples: Iterable[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    bona = np.array([s.score for s in samples if s.label == BONAFIDE], dtype=np.float64)
    att = np.array([s.score for s in samples if s.label == ATTACK], dtype=np.float64)
    return bona, att


def _require_both(samples, split: str):
    bona, att = split_scores(samples)
    if bona.size == 0:
        raise UndefinedMetricError("BPCER", f"no bonafide samples in {split} split")
    if att.size == 0:
        raise UndefinedMetricError("APCER", f"no attack samples in {split} split")
    return bona, att


def per_attack_apcer(samples: Sequence[ScoredSample], tau: float) -> PerAttackReport:
    """APCER per attack type, the worst of them (APCER-AP), and ACER-AP."""
    bona, _ = _require_both(samples, "given")
    by_type: dict[str, list[float]] = {}
    for s in samples:
        if s.label == ATTACK:
            by_type.setdefault(s.attack_type, []).append(s.score)
    rates = {t: apcer(v, tau) for t, v in sorted(by_type.items())}
    worst = max(rates.values())
    b = bpcer(bona, tau)
    return PerAttackReport(rates, worst, b, acer(worst, b))


def epc_curve(dev: Sequence[ScoredSample], eval_: Sequence[ScoredSample], alphas) -> list[EpcPoint]:
    """Expected performance curve.

    For each ``alpha`` the threshold minimizing dev WER is chosen among the
    distinct dev scores plus 0 (lowest threshold on ties), and the eval
    HTER at that threshold is reported.
    """
    dev_b, dev_a = _require_both(dev, "dev")
    ev_b, ev_a = _require_both(eval_, "eval")
    dev_b, dev_a, ev_b, ev_a = (np.sort(x) for x in (dev_b, dev_a, ev_b, ev_a))
    candidates = np.unique(np.concatenate([dev_b, dev_a, [0.0]]))
    fmr = _accepted(dev_a, candidates) / dev_a.size
    fnmr = _rejected(dev_b, candidates) / dev_b.size
    points = []
    for alpha in alphas:
        alpha = float(alpha)
        if not 0 <= alpha <= 1:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        w = alpha * fmr + (1 - alpha) * fnmr
        tau = float(candidates[int(np.argmin(w))])
        ev = hter(float(_accepted(ev_a, tau) / ev_a.size), float(_rejected(ev_b, tau) / ev_b.size))
        points.append(EpcPoint(alpha, tau, ev))
    return points


def alpha_grid(size: int = 21) -> np.ndarray:
    if size < 1:
        raise ValueError("alpha grid needs at least one point")
    return np.linspace(0.0, 1.0, size) if size > 1 else np.array([0.5])


def roc_points(samples: Sequence[ScoredSample]) -> list[RocPoint]:
    """Error rates at 0, every distinct score, and just above the top score.

    Points are ordered by increasing threshold, so APCER is non-increasing
    and BPCER non-decreasing along the list.
    """
    bona, att = _require_both(samples, "given")
    bona, att = np.sort(bona), np.sort(att)
    scores = np.concatenate([bona, att])
    top = np.nextafter(scores.max(), np.inf)
    taus = np.append(np.unique(np.append(scores, 0.0)), top)
    a = _accepted(att, taus) / att.size
    b = _rejected(bona, taus) / bona.size
    return [RocPoint(float(t), float(x), float(y)) for t, x, y in zip(taus, a, b)]


@dataclass(frozen=True)
class SplitReport:
    apcer: float
    bpcer: float
    acer: float
    apcer_by_type: dict
    apcer_ap: float
    acer_ap: float
    n_bonafide: int
    n_attack: int


def split_report(samples: Sequence[ScoredSample], tau: float, split: str) -> SplitReport:
    bona, att = _require_both(samples, split)
    a, b = apcer(att, tau), bpcer(bona, tau)
    per = per_attack_apcer(samples, tau)
    return SplitReport(a, b, acer(a, b), per.apcer_by_type, per.apcer_ap, per.acer_ap, int(bona.size), int(att.size))
