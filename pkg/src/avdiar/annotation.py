"""Diarization annotations, RTTM I/O, and voice-activity matrices.

RTTM is the interchange format throughout: one ``SPEAKER`` line per segment,
times serialized with three decimals.  Voice-activity matrices carry
per-speaker, per-frame speech scores at a declared temporal resolution and
convert losslessly to and from annotations when segment boundaries are
aligned to the frame grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from avdiar.errors import DataError


class Segment(NamedTuple):
    speaker_id: str
    onset: float
    duration: float

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class DiarizationAnnotation:
    """A set of speaker-attributed speech segments for one recording."""

    recording_id: str
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self) -> None:
        checked = []
        for seg in self.segments:
            seg = Segment(str(seg[0]), float(seg[1]), float(seg[2]))
            if not seg.speaker_id:
                raise DataError(f"{self.recording_id}: empty speaker id")
            if not np.isfinite(seg.onset) or seg.onset < 0:
                raise DataError(f"{self.recording_id}: onset {seg.onset} out of range")
            if not np.isfinite(seg.duration) or seg.duration <= 0:
                raise DataError(
                    f"{self.recording_id}: duration {seg.duration} must be positive"
                )
            checked.append(seg)
        self.segments = checked

    def speakers(self) -> list[str]:
        return sorted({s.speaker_id for s in self.segments})

    def sorted_segments(self) -> list[Segment]:
        return sorted(self.segments, key=lambda s: (s.onset, s.speaker_id, s.duration))

    def extent(self) -> float:
        """End time of the last segment (0 for an empty annotation)."""
        return max((s.offset for s in self.segments), default=0.0)

    def speech_regions(self) -> list[tuple[float, float]]:
        """Merged (start, end) intervals where at least one speaker is active."""
        spans = sorted((s.onset, s.offset) for s in self.segments)
        merged: list[tuple[float, float]] = []
        for a, b in spans:
            if merged and a <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], b))
            else:
                merged.append((a, b))
        return merged


@dataclass
class VoiceActivityMatrix:
    """N x T' matrix of per-speaker speech scores at a fixed resolution."""

    values: np.ndarray
    resolution: float
    speaker_ids: list[str]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("voice-activity values must be a 2-D matrix")
        if len(self.speaker_ids) != self.values.shape[0]:
            raise DataError("speaker_ids length must match matrix rows")
        if self.resolution <= 0:
            raise DataError("resolution must be positive")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise DataError("voice-activity values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def read_rttm(path) -> list[DiarizationAnnotation]:
    """Parse an RTTM file into one annotation per recording.

    Lines whose first field is not ``SPEAKER`` are skipped.  A malformed
    ``SPEAKER`` line raises a DataError naming the line number.
    """
    per_rec: dict[str, list[Segment]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] != "SPEAKER":
                continue
            if len(parts) < 9:
                raise DataError(f"{path}:{lineno}: expected >= 9 fields, got {len(parts)}")
            try:
                onset = float(parts[3])
                duration = float(parts[4])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric onset/duration") from exc
            rec = parts[1]
            try:
                seg = Segment(parts[7], onset, duration)
                per_rec.setdefault(rec, []).append(seg)
                DiarizationAnnotation(rec, [seg])
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return [DiarizationAnnotation(rec, segs) for rec, segs in per_rec.items()]


def write_rttm(annotations: Iterable[DiarizationAnnotation], path, header: str | None = None) -> None:
    """Serialize annotations as RTTM, times rounded to the millisecond.

    ``header`` (e.g. a config hash) is written as a ``;;`` comment line, which
    readers skip.
    """
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f";; {header}\n")
        for ann in annotations:
            for seg in ann.sorted_segments():
                fh.write(
                    f"SPEAKER {ann.recording_id} 1 {seg.onset:.3f} {seg.duration:.3f} "
                    f"<NA> <NA> {seg.speaker_id} <NA> <NA>\n"
                )


def _snap(x: float) -> float:
    """Absorb float noise on frame boundaries (1 ns tolerance per unit)."""
    r = round(x)
    return float(r) if abs(x - r) < 1e-9 * max(1.0, abs(x)) else x


def annotation_to_matrix(
    annotation: DiarizationAnnotation,
    speaker_order: Sequence[str],
    resolution: float,
    start: float = 0.0,
    chunk_length: float | None = None,
) -> VoiceActivityMatrix:
    """Rasterize an annotation onto the frame grid.

    Frame t spans [start + t*res, start + (t+1)*res).  A frame is active for a
    speaker iff any of the speaker's segments overlaps it with positive
    measure.  Speakers absent from the annotation yield all-zero rows.
    """
    if chunk_length is None:
        chunk_length = max(annotation.extent() - start, resolution)
    n_frames = chunk_length / resolution
    if abs(n_frames - round(n_frames)) > 1e-6:
        raise DataError(
            f"resolution {resolution} does not divide chunk_length {chunk_length}"
        )
    n_frames = int(round(n_frames))
    order = list(speaker_order)
    if len(set(order)) != len(order):
        raise DataError("speaker_order must list distinct ids")
    index = {spk: i for i, spk in enumerate(order)}
    values = np.zeros((len(order), n_frames), dtype=np.float64)
    for seg in annotation.segments:
        row = index.get(seg.speaker_id)
        if row is None:
            continue
        u = _snap((seg.onset - start) / resolution)
        v = _snap((seg.offset - start) / resolution)
        t_first = max(0, int(np.floor(u)))
        t_last = min(n_frames - 1, int(np.ceil(v)) - 1)
        if t_last >= t_first:
            values[row, t_first : t_last + 1] = 1.0
    return VoiceActivityMatrix(values, resolution, order)


def matrix_to_annotation(
    matrix: VoiceActivityMatrix,
    threshold: float,
    recording_id: str = "rec",
    start: float = 0.0,
) -> DiarizationAnnotation:
    """Turn per-frame scores back into segments.

    Maximal runs of frames with value strictly above ``threshold`` become one
    segment each; onsets and durations are multiples of the resolution.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError("threshold must lie strictly inside (0, 1)")
    res = matrix.resolution
    segments: list[Segment] = []
    for row, spk in zip(matrix.values, matrix.speaker_ids):
        active = row > threshold
        padded = np.concatenate(([False], active, [False]))
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        for a, b in zip(edges[::2], edges[1::2]):
            segments.append(Segment(spk, start + a * res, (b - a) * res))
    return DiarizationAnnotation(recording_id, sorted(segments, key=lambda s: s.onset))
