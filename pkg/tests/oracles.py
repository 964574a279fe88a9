"""Independent reference implementations used only to check the real ones.

Everything here is written for clarity over speed and deliberately avoids
sharing code paths with the package.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np

from avdiar.annotation import DiarizationAnnotation

MS = 0.001


def rasterize_ms(annotation: DiarizationAnnotation, n_frames: int) -> dict[str, np.ndarray]:
    """Per-speaker boolean activity on a 1 ms grid, interval by interval."""
    out = {spk: np.zeros(n_frames, dtype=bool) for spk in annotation.speakers()}
    for seg in annotation.segments:
        a = int(round(seg.onset / MS))
        b = int(round((seg.onset + seg.duration) / MS))
        out[seg.speaker_id][a : min(b, n_frames)] = True
    return out


def frame_matrix_bruteforce(
    annotation: DiarizationAnnotation,
    speaker_order: list[str],
    resolution: float,
    start: float,
    chunk_length: float,
) -> np.ndarray:
    """Frame active iff any 1 ms cell inside it is active (times on ms grid)."""
    n_frames = int(round(chunk_length / resolution))
    per_ms = int(round(resolution / MS))
    total_ms = n_frames * per_ms
    start_ms = int(round(start / MS))
    grid = rasterize_ms(annotation, start_ms + total_ms)
    values = np.zeros((len(speaker_order), n_frames))
    for i, spk in enumerate(speaker_order):
        if spk not in grid:
            continue
        cells = grid[spk][start_ms : start_ms + total_ms]
        values[i] = cells.reshape(n_frames, per_ms).any(axis=1)
    return values


def der_bruteforce(
    reference: DiarizationAnnotation,
    hypothesis: DiarizationAnnotation,
    collar: float = 0.0,
) -> float:
    """DER via exhaustive search over speaker bijections.

    Uses the identity error(t) = max(Nref, Nhyp) - Ncorrect(t) and minimizes
    over every injective speaker mapping; no miss/fa/confusion split.
    """
    end = max(reference.extent(), hypothesis.extent()) + collar + MS
    n = int(round(end / MS)) + 2
    ref = rasterize_ms(reference, n)
    hyp = rasterize_ms(hypothesis, n)
    scored = np.ones(n, dtype=bool)
    for seg in reference.segments:
        for b in (seg.onset, seg.onset + seg.duration):
            a = max(0, int(round((b - collar) / MS)))
            z = min(n, int(round((b + collar) / MS)))
            scored[a:z] = False

    ref_rows = [ref[s] & scored for s in sorted(ref)]
    hyp_rows = [hyp[s] & scored for s in sorted(hyp)]
    n_ref = np.sum(ref_rows, axis=0) if ref_rows else np.zeros(n, dtype=np.int64)
    n_hyp = np.sum(hyp_rows, axis=0) if hyp_rows else np.zeros(n, dtype=np.int64)
    denom = float(n_ref.sum())
    if denom == 0:
        raise ZeroDivisionError("no reference speech")

    base = np.maximum(n_ref, n_hyp)
    best_correct = 0.0
    small, large = (ref_rows, hyp_rows) if len(ref_rows) <= len(hyp_rows) else (hyp_rows, ref_rows)
    if small:
        for assignment in permutations(range(len(large)), len(small)):
            correct = 0.0
            for i, j in enumerate(assignment):
                correct += float(np.sum(small[i] & large[j]))
            best_correct = max(best_correct, correct)
    error = float(base.sum()) - best_correct
    return 100.0 * error / denom


def best_assignment_bruteforce(scores: np.ndarray) -> float:
    """Maximum total score over all full assignments of a square matrix."""
    n = scores.shape[0]
    best = -np.inf
    for perm in permutations(range(n)):
        best = max(best, sum(scores[i, perm[i]] for i in range(n)))
    return best


def stitch_bruteforce(chunks: list[np.ndarray], starts: list[int], total: int) -> np.ndarray:
    """Coverage-weighted average of chunk posteriors, frame by frame."""
    n_spk = chunks[0].shape[0]
    acc = np.zeros((n_spk, total))
    cov = np.zeros(total)
    for mat, s in zip(chunks, starts):
        for t in range(mat.shape[1]):
            if 0 <= s + t < total:
                acc[:, s + t] += mat[:, t]
                cov[s + t] += 1
    cov[cov == 0] = 1
    return acc / cov
