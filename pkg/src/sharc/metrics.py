"""Diarization error rate and pairwise clustering F1."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import SharcError
from .data import RttmRecord


class DerError(SharcError, ValueError):
    pass


@dataclass(frozen=True)
class DerResult:
    """Error components in integer milliseconds."""

    missed: int
    false_alarm: int
    confusion: int
    total: int

    @property
    def der(self) -> float:
        if self.total == 0:
            raise DerError("no scored reference speech")
        return 100.0 * (self.missed + self.false_alarm + self.confusion) / self.total

    def __add__(self, other: "DerResult") -> "DerResult":
        return DerResult(
            self.missed + other.missed,
            self.false_alarm + other.false_alarm,
            self.confusion + other.confusion,
            self.total + other.total,
        )


def _ms(t: float) -> int:
    return int(round(t * 1000.0))


def _activity(spans, points, n_cols):
    """Per elementary interval, 0/1 activity of each column."""
    diff = np.zeros((points.size, max(n_cols, 1)), dtype=np.int64)
    for s, e, col in spans:
        i0, i1 = np.searchsorted(points, [s, e])
        diff[i0, col] += 1
        diff[i1, col] -= 1
    return (np.cumsum(diff, axis=0)[:-1, :n_cols] > 0).astype(np.int64)


def der_recording(
    ref: Sequence[RttmRecord],
    hyp: Sequence[RttmRecord],
    collar: float = 0.0,
    score_overlap: bool = True,
    collar_mode: str = "both",
) -> DerResult:
    """DER components for one recording.

    The speaker mapping maximises total overlap (exact assignment). Regions
    within ``collar`` seconds of a segment boundary are not scored; with
    ``collar_mode="both"`` boundaries of both reference and hypothesis
    segments are collared, with ``"reference"`` only reference boundaries.
    When ``score_overlap`` is false, reference regions with two or more
    active speakers are dropped.
    """
    if collar_mode not in ("both", "reference"):
        raise ValueError(f"unknown collar_mode {collar_mode!r}")
    if not ref:
        raise DerError("empty reference")
    ref_spk = {s: i for i, s in enumerate(sorted({r.speaker for r in ref}))}
    hyp_spk = {s: i for i, s in enumerate(sorted({r.speaker for r in hyp}))}
    ref_spans = [(_ms(r.onset), _ms(r.end), ref_spk[r.speaker]) for r in ref]
    hyp_spans = [(_ms(r.onset), _ms(r.end), hyp_spk[r.speaker]) for r in hyp]
    c = _ms(collar)

    bounds = {t for s, e, _ in ref_spans for t in (s, e)}
    if collar_mode == "both":
        bounds |= {t for s, e, _ in hyp_spans for t in (s, e)}
    collars = [(b - c, b + c, 0) for b in sorted(bounds)] if c > 0 else []

    pts = {t for s, e, _ in ref_spans + hyp_spans for t in (s, e)}
    pts |= {t for s, e, _ in collars for t in (s, e)}
    points = np.array(sorted(pts), dtype=np.int64)
    dur = np.diff(points)

    R = _activity(ref_spans, points, len(ref_spk))
    H = _activity(hyp_spans, points, len(hyp_spk))
    scored = np.ones(dur.size, dtype=bool)
    if collars:
        scored &= _activity(collars, points, 1)[:, 0] == 0
    n_ref, n_hyp = R.sum(axis=1), H.sum(axis=1)
    if not score_overlap:
        scored &= n_ref < 2
    w = np.where(scored, dur, 0)

    total = int((n_ref * w).sum())
    if total == 0:
        raise DerError("no scored reference speech")
    correct = np.zeros(dur.size, dtype=np.int64)
    if len(ref_spk) and len(hyp_spk):
        overlap = R.T @ (H * w[:, None])
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        for a, b in zip(rows, cols):
            correct += R[:, a] * H[:, b]
    missed = int((np.maximum(n_ref - n_hyp, 0) * w).sum())
    fa = int((np.maximum(n_hyp - n_ref, 0) * w).sum())
    conf = int(((np.minimum(n_ref, n_hyp) - correct) * w).sum())
    return DerResult(missed, fa, conf, total)


def _by_recording(records: Iterable[RttmRecord]) -> dict:
    out = defaultdict(list)
    for r in records:
        out[r.recording_id].append(r)
    return out


def der_report(
    ref: Iterable[RttmRecord],
    hyp: Iterable[RttmRecord],
    collar: float = 0.0,
    score_overlap: bool = True,
    collar_mode: str = "both",
) -> dict:
    """Per-recording :class:`DerResult`; hypothesis recordings must exist in ref."""
    ref_by, hyp_by = _by_recording(ref), _by_recording(hyp)
    if not ref_by:
        raise DerError("empty reference")
    extra = sorted(set(hyp_by) - set(ref_by))
    if extra:
        raise DerError(f"hypothesis recordings missing from reference: {extra}")
    return {
        rec: der_recording(ref_by[rec], hyp_by.get(rec, []), collar, score_overlap, collar_mode)
        for rec in sorted(ref_by)
    }


def der(
    ref: Iterable[RttmRecord],
    hyp: Iterable[RttmRecord],
    collar: float = 0.0,
    score_overlap: bool = True,
    collar_mode: str = "both",
) -> float:
    """Time-weighted DER (percent) over all recordings in ``ref``."""
    results = der_report(ref, hyp, collar, score_overlap, collar_mode).values()
    return sum(results, DerResult(0, 0, 0, 0)).der


def pairwise_f1(true_labels, pred_labels) -> float:
    """F1 over unordered node pairs, a pair being positive when co-clustered.

    Two partitions without any positive pair are identical and score 1.0;
    otherwise zero true positives give 0.0.
    """
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if t.shape != p.shape:
        raise ValueError("label vectors differ in length")
    _, t_ids = np.unique(t, return_inverse=True)
    _, p_ids = np.unique(p, return_inverse=True)
    joint = np.unique(np.stack([t_ids, p_ids]), axis=1, return_counts=True)[1]

    def pairs(counts):
        counts = np.asarray(counts, dtype=np.int64)
        return int((counts * (counts - 1) // 2).sum())

    tp = pairs(joint)
    true_pos, pred_pos = pairs(np.bincount(t_ids)), pairs(np.bincount(p_ids))
    if true_pos == 0 and pred_pos == 0:
        return 1.0
    if tp == 0:
        return 0.0
    return 2.0 * tp / (true_pos + pred_pos)
