"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here shares code with the library: rates are plain loops over
samples, and threshold searches scan every candidate explicitly.
"""

from __future__ import annotations

import math

import numpy as np


def count_apcer(attacks, tau):
    return sum(1 for s in attacks if s >= tau) / len(attacks)


def count_bpcer(bonafide, tau):
    return sum(1 for s in bonafide if s < tau) / len(bonafide)


def scan_threshold_at_bpcer(bonafide, target):
    best = None
    for tau in sorted(set(bonafide) | {0.0}):
        if count_bpcer(bonafide, tau) <= target:
            best = tau
    return best


def scan_epc_point(dev_b, dev_a, ev_b, ev_a, alpha):
    """(tau, eval HTER) minimizing dev WER, lowest tau among ties."""
    best = None
    for tau in sorted(set(dev_b) | set(dev_a) | {0.0}):
        w = alpha * count_apcer(dev_a, tau) + (1 - alpha) * count_bpcer(dev_b, tau)
        if best is None or w < best[0]:
            best = (w, tau)
    tau = best[1]
    return tau, (count_apcer(ev_a, tau) + count_bpcer(ev_b, tau)) / 2


def scan_roc(bonafide, attacks):
    scores = sorted(set(bonafide) | set(attacks) | {0.0})
    taus = scores + [math.nextafter(max(scores), math.inf)]
    return [(t, count_apcer(attacks, t), count_bpcer(bonafide, t)) for t in taus]


def per_type_apcer(samples, tau):
    groups = {}
    for s in samples:
        if s.label == "attack":
            groups.setdefault(s.attack_type, []).append(s.score)
    return {t: count_apcer(v, tau) for t, v in groups.items()}


def median(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else (v[n // 2 - 1] + v[n // 2]) / 2


# --- vectorized counting, for oracle runs over many large score sets ---------


def accept_rates(scores, taus):
    """Per tau, the fraction of ``scores`` at or above it."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(taus, dtype=float)
    return (s[None, :] >= t[:, None]).sum(axis=1) / len(s)


def reject_rates(scores, taus):
    s = np.asarray(scores, dtype=float)
    t = np.asarray(taus, dtype=float)
    return (s[None, :] < t[:, None]).sum(axis=1) / len(s)


def scan_threshold_at_bpcer_fast(bonafide, target):
    taus = np.array(sorted(set(bonafide) | {0.0}))
    ok = np.flatnonzero(reject_rates(bonafide, taus) <= target)
    return float(taus[ok[-1]])


def scan_roc_fast(bonafide, attacks):
    scores = sorted(set(bonafide) | set(attacks) | {0.0})
    taus = np.array(scores + [math.nextafter(max(scores), math.inf)])
    return list(zip(taus.tolist(), accept_rates(attacks, taus).tolist(), reject_rates(bonafide, taus).tolist()))


def scan_epc_points(dev_b, dev_a, ev_b, ev_a, alphas):
    """(tau, eval HTER) per alpha, lowest tau among dev WER ties."""
    taus = np.array(sorted(set(dev_b) | set(dev_a) | {0.0}))
    dev_apcer = accept_rates(dev_a, taus)
    dev_bpcer = reject_rates(dev_b, taus)
    out = []
    for alpha in alphas:
        w = alpha * dev_apcer + (1 - alpha) * dev_bpcer
        tau = float(taus[np.flatnonzero(w == w.min())[0]])
        out.append((tau, (count_apcer(ev_a, tau) + count_bpcer(ev_b, tau)) / 2))
    return out
