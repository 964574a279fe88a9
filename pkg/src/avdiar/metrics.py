"""Diarization error rate scoring with miss / false-alarm / confusion split.

Both annotations are rasterized on a 1 ms grid, an optimal reference-to-
hypothesis speaker mapping is found by linear assignment on overlapped time,
and errors are accumulated frame by frame.  A collar excludes the region
around every reference segment boundary from scoring; overlapped speech is
scored (multi-label) unless ``score_overlap`` is disabled for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from avdiar.annotation import DiarizationAnnotation
from avdiar.errors import NumericalError

STEP = 0.001  # scoring grid, finer than any model resolution


@dataclass
class DerReport:
    miss: float  # percentages of scored reference speech time
    false_alarm: float
    confusion: float
    der: float
    scored_time: float  # seconds of scored reference speech
    mapping: list[tuple[str, str, float]] = field(default_factory=list)

    def __str__(self) -> str:
        return (
            f"MI {self.miss:6.2f}  FA {self.false_alarm:6.2f}  "
            f"SC {self.confusion:6.2f}  DER {self.der:6.2f}"
        )


@dataclass
class _Counts:
    miss_sec: float = 0.0
    fa_sec: float = 0.0
    conf_sec: float = 0.0
    ref_sec: float = 0.0
    mapping: list[tuple[str, str, float]] = field(default_factory=list)

    def report(self) -> DerReport:
        if self.ref_sec <= 0:
            raise NumericalError("DER undefined: no scored reference speech")
        scale = 100.0 / self.ref_sec
        mi = self.miss_sec * scale
        fa = self.fa_sec * scale
        sc = self.conf_sec * scale
        return DerReport(mi, fa, sc, mi + fa + sc, self.ref_sec, self.mapping)


def _rasterize(annotation: DiarizationAnnotation, n_frames: int) -> tuple[np.ndarray, list[str]]:
    speakers = annotation.speakers()
    grid = np.zeros((len(speakers), n_frames), dtype=bool)
    idx = {s: i for i, s in enumerate(speakers)}
    for seg in annotation.segments:
        a = int(round(seg.onset / STEP))
        b = int(round(seg.offset / STEP))
        grid[idx[seg.speaker_id], a : min(b, n_frames)] = True
    return grid, speakers


def _score_counts(
    reference: DiarizationAnnotation,
    hypothesis: DiarizationAnnotation,
    collar: float,
    score_overlap: bool,
    uem: tuple[float, float] | None,
) -> _Counts:
    if collar < 0:
        raise NumericalError("collar must be non-negative")
    end = max(reference.extent(), hypothesis.extent()) + collar + STEP
    n = int(round(end / STEP)) + 1
    ref, ref_ids = _rasterize(reference, n)
    hyp, hyp_ids = _rasterize(hypothesis, n)

    scored = np.ones(n, dtype=bool)
    if collar > 0:
        for seg in reference.segments:
            for b in (seg.onset, seg.offset):
                a = max(0, int(round((b - collar) / STEP)))
                z = min(n, int(round((b + collar) / STEP)))
                scored[a:z] = False
    if uem is not None:
        u = np.zeros(n, dtype=bool)
        a = max(0, int(round(uem[0] / STEP)))
        z = min(n, int(round(uem[1] / STEP)))
        u[a:z] = True
        scored &= u

    if not score_overlap:
        scored &= ref.sum(axis=0) <= 1

    ref_s = ref & scored
    hyp_s = hyp & scored
    n_ref = ref_s.sum(axis=0).astype(np.int64)
    n_hyp = hyp_s.sum(axis=0).astype(np.int64)

    counts = _Counts(ref_sec=float(n_ref.sum()) * STEP)
    if len(ref_ids) and len(hyp_ids):
        overlap = ref_s.astype(np.float32) @ hyp_s.T.astype(np.float32)
        rows, cols = linear_sum_assignment(-overlap)
        n_corr = np.zeros(n, dtype=np.int64)
        for i, j in zip(rows, cols):
            if overlap[i, j] > 0:
                n_corr += ref_s[i] & hyp_s[j]
                counts.mapping.append((ref_ids[i], hyp_ids[j], float(overlap[i, j]) * STEP))
    else:
        n_corr = np.zeros(n, dtype=np.int64)

    counts.miss_sec = float(np.maximum(n_ref - n_hyp, 0).sum()) * STEP
    counts.fa_sec = float(np.maximum(n_hyp - n_ref, 0).sum()) * STEP
    counts.conf_sec = float((np.minimum(n_ref, n_hyp) - n_corr).sum()) * STEP
    return counts


def score(
    reference: DiarizationAnnotation,
    hypothesis: DiarizationAnnotation,
    collar: float = 0.0,
    score_overlap: bool = True,
    uem: tuple[float, float] | None = None,
) -> DerReport:
    """Score one hypothesis against one reference.

    Returns percentages relative to the scored reference speech time; the
    total DER is exactly miss + false_alarm + confusion.
    """
    return _score_counts(reference, hypothesis, collar, score_overlap, uem).report()


def score_corpus(
    references: dict[str, DiarizationAnnotation],
    hypotheses: dict[str, DiarizationAnnotation],
    collar: float = 0.0,
    score_overlap: bool = True,
    uems: dict[str, tuple[float, float]] | None = None,
) -> tuple[DerReport, dict[str, DerReport]]:
    """Time-weighted corpus aggregate plus per-recording reports.

    Recordings present in the reference but missing from the hypothesis are
    scored against an empty hypothesis (pure miss).
    """
    total = _Counts()
    per_rec: dict[str, DerReport] = {}
    for rec, ref in sorted(references.items()):
        hyp = hypotheses.get(rec, DiarizationAnnotation(rec, []))
        uem = (uems or {}).get(rec)
        counts = _score_counts(ref, hyp, collar, score_overlap, uem)
        per_rec[rec] = counts.report()
        total.miss_sec += counts.miss_sec
        total.fa_sec += counts.fa_sec
        total.conf_sec += counts.conf_sec
        total.ref_sec += counts.ref_sec
    return total.report(), per_rec
