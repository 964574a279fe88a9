"""On-the-fly synthesis of multi-speaker audio-visual conversations.

Each synthetic speaker has a fixed spectral envelope (a sum of band-passed
noise components whose center frequencies are derived from the speaker id),
so speakers are acoustically discriminable.  Lip clips show a face-like
static pattern with a mouth region that carries a traveling-wave texture
while the speaker talks and stays frozen while silent, so speech activity is
visible as temporal motion.

Single-speaker utterances alternate speech and silence segments with lengths
drawn uniformly from [0, max_segment] seconds, quantized to whole video
frames; mixtures are the arithmetic mean of the single-speaker waveforms.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from avdiar.annotation import DiarizationAnnotation, Segment
from avdiar.config import SimConfig, VideoConfig
from avdiar.errors import DataError
from avdiar.media import AudioSignal, LipTrack

MOUTH_VALUE_STATIC = 0.08


def _id_seed(seed: int, speaker_id: str) -> list[int]:
    digest = hashlib.sha256(f"{seed}:{speaker_id}".encode()).digest()
    return [seed, int.from_bytes(digest[:8], "little")]


@dataclass
class _Voice:
    sos: np.ndarray  # cascade of band-pass sections
    gains: np.ndarray
    am_rate: float
    am_phase: float


class SourceCorpus:
    """Deterministic per-speaker speech and lip-clip generators."""

    def __init__(
        self,
        speaker_ids: list[str],
        sample_rate: int,
        fps: float,
        resolution: int,
        seed: int,
    ):
        self.speaker_ids = list(speaker_ids)
        self.sample_rate = sample_rate
        self.fps = fps
        self.resolution = resolution
        self.seed = seed
        self._voices: dict[str, _Voice] = {}

    def _voice(self, speaker_id: str) -> _Voice:
        voice = self._voices.get(speaker_id)
        if voice is None:
            rng = np.random.default_rng(_id_seed(self.seed, speaker_id))
            nyq = self.sample_rate / 2.0
            bands = []
            for lo_f, hi_f in ((0.04, 0.10), (0.12, 0.25), (0.28, 0.46)):
                center = rng.uniform(lo_f, hi_f)
                half_bw = center * rng.uniform(0.10, 0.18)
                bands.append((center - half_bw, center + half_bw))
            sos = np.concatenate(
                [sps.butter(2, (lo, hi), btype="bandpass", output="sos") for lo, hi in bands]
            ).reshape(len(bands), -1, 6)
            gains = np.array([1.0, rng.uniform(0.4, 0.8), rng.uniform(0.2, 0.5)])
            voice = _Voice(sos, gains, rng.uniform(2.5, 5.5), rng.uniform(0, 2 * np.pi))
            self._voices[speaker_id] = voice
        return voice

    def speech(self, speaker_id: str, duration: float, rng: np.random.Generator) -> np.ndarray:
        """Speaker-colored noise at a fixed RMS of 0.1."""
        n = int(round(duration * self.sample_rate))
        if n == 0:
            return np.zeros(0)
        voice = self._voice(speaker_id)
        white = rng.standard_normal(n)
        out = np.zeros(n)
        for band_sos, gain in zip(voice.sos, voice.gains):
            out += gain * sps.sosfilt(band_sos, white)
        t = np.arange(n) / self.sample_rate
        out *= 1.0 + 0.25 * np.sin(2 * np.pi * voice.am_rate * t + voice.am_phase)
        rms = np.sqrt(np.mean(out**2))
        if rms > 0:
            out *= 0.1 / rms
        return out

    def base_face(self, rng: np.random.Generator) -> np.ndarray:
        """Static blocky pattern standing in for a face crop."""
        res = self.resolution
        coarse = rng.uniform(0.25, 0.7, size=(4, 4))
        face = np.kron(coarse, np.ones((res // 4, res // 4)))[:res, :res]
        return face.astype(np.float32)

    def _mouth_mask(self) -> np.ndarray:
        res = self.resolution
        yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
        cy, cx = 0.62 * res, 0.5 * res
        ry, rx = max(1.5, 0.18 * res), max(2.0, 0.30 * res)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    def lip_clip(
        self, active: bool, n_frames: int, face: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """Mouth texture travels while talking and freezes while silent."""
        res = self.resolution
        mouth = self._mouth_mask()
        frames = np.repeat(face[None], n_frames, axis=0).copy()
        if not active:
            frames[:, mouth] = MOUTH_VALUE_STATIC
            return frames
        rate = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        yy = np.mgrid[0:res, 0:res][0][mouth]
        for t in range(n_frames):
            wave = 0.5 + 0.45 * np.sin(2 * np.pi * rate * t / self.fps + 0.9 * yy + phase)
            frames[t, mouth] = wave
        return np.clip(frames, 0.0, 1.0)


@dataclass
class SimulatedSample:
    """One synthetic conversation with aligned audio, lips, and ground truth."""

    audio: AudioSignal
    lip_tracks: list[LipTrack]
    annotation: DiarizationAnnotation
    num_speakers: int
    source_speakers: list[str] = field(default_factory=list)
    overlap_ratio: float = 0.0

    def __post_init__(self) -> None:
        if len(self.lip_tracks) != self.num_speakers:
            raise DataError("lip track count must equal num_speakers")
        annotated = {s.speaker_id for s in self.annotation.segments}
        slots = {slot_speaker_id(i) for i in range(self.num_speakers)}
        if not annotated <= slots:
            raise DataError("annotation speakers must map to track slots")


def slot_speaker_id(index: int) -> str:
    return f"spk{index}"


def simulate_speaker_utterance(
    corpus: SourceCorpus,
    speaker_id: str,
    total_duration: float,
    rng: np.random.Generator,
    max_segment: float = 4.0,
) -> tuple[AudioSignal, list[tuple[float, float]]]:
    """Alternating speech/silence; returns the waveform and speech segments.

    Segment lengths are U(0, max_segment) quantized to whole video frames;
    the first segment type is chosen uniformly; the last segment is truncated
    at total_duration.  Silence is exact zeros.
    """
    if total_duration <= 0:
        raise DataError("total_duration must be positive")
    quantum = 1.0 / corpus.fps
    sr = corpus.sample_rate
    samples = np.zeros(int(round(total_duration * sr)))
    speaking = bool(rng.random() < 0.5)
    segments: list[tuple[float, float]] = []
    t = 0.0
    for _ in range(100000):
        if t >= total_duration - 1e-9:
            break
        length = rng.uniform(0.0, max_segment)
        length = round(length / quantum) * quantum
        length = min(length, total_duration - t)
        if length > 1e-9 and speaking:
            seg = corpus.speech(speaker_id, length, rng)
            a = int(round(t * sr))
            samples[a : a + len(seg)] = seg
            segments.append((round(t / quantum) * quantum, length))
        t += length
        speaking = not speaking
    return AudioSignal(samples, sr), segments


def simulate_lip_track(
    corpus: SourceCorpus,
    segments: list[tuple[float, float]],
    total_duration: float,
    rng: np.random.Generator,
) -> LipTrack:
    """Active clips cover the speech segments, a frozen face covers the rest."""
    n_frames = int(round(total_duration * corpus.fps))
    face = corpus.base_face(rng)
    frames = corpus.lip_clip(False, n_frames, face, rng)
    for onset, duration in segments:
        a = int(round(onset * corpus.fps))
        b = min(n_frames, a + int(round(duration * corpus.fps)))
        if b > a:
            frames[a:b] = corpus.lip_clip(True, b - a, face, rng)
    return LipTrack(frames, corpus.fps, np.ones(n_frames, dtype=bool))


def lip_motion(frames: np.ndarray) -> np.ndarray:
    """Per-frame activity statistic: the smaller of the mean absolute
    differences to the two neighboring frames (single diff at the ends).

    Frozen spans score exactly 0; the traveling mouth texture scores well
    above SimConfig.lip_motion_threshold on every frame.
    """
    n = len(frames)
    if n < 2:
        return np.zeros(n)
    d = np.abs(np.diff(frames.astype(np.float64), axis=0)).mean(axis=(1, 2))
    motion = np.empty(n)
    motion[0] = d[0]
    motion[-1] = d[-1]
    if n > 2:
        motion[1:-1] = np.minimum(d[:-1], d[1:])
    return motion


def overlap_ratio(annotation: DiarizationAnnotation, fps: float, duration: float) -> float:
    """Time with two or more simultaneous speakers over summed per-speaker
    speech time (0 when nobody speaks)."""
    speakers = annotation.speakers()
    if not speakers:
        return 0.0
    n = int(round(duration * fps))
    grid = np.zeros((len(speakers), n), dtype=bool)
    for seg in annotation.segments:
        a = int(round(seg.onset * fps))
        b = min(n, int(round(seg.offset * fps)))
        grid[speakers.index(seg.speaker_id), a:b] = True
    total = grid.sum()
    if total == 0:
        return 0.0
    return float((grid.sum(axis=0) >= 2).sum()) / float(total)


def simulate_sample(
    corpus: SourceCorpus,
    num_speakers: int,
    duration: float,
    rng: np.random.Generator,
    max_segment: float = 4.0,
    noise_snr_db: float | None = None,
    return_sources: bool = False,
):
    """Mix ``num_speakers`` single-speaker utterances into one conversation.

    The mixture is the arithmetic mean of the per-speaker waveforms; lip
    tracks are kept separate; the annotation labels slots spk0..spkN-1 in
    track order.  Optional additive white noise is scaled to the requested
    SNR against the mixture's active-speech RMS.
    """
    if not 1 <= num_speakers <= 4:
        raise DataError("num_speakers must be between 1 and 4")
    ids = [str(s) for s in rng.choice(corpus.speaker_ids, size=num_speakers, replace=False)]
    child_seeds = rng.integers(0, 2**62, size=num_speakers)
    waves, segments_all, tracks = [], [], []
    for i, (speaker, child_seed) in enumerate(zip(ids, child_seeds)):
        child = np.random.default_rng(int(child_seed))
        audio, segs = simulate_speaker_utterance(corpus, speaker, duration, child, max_segment)
        track = simulate_lip_track(corpus, segs, duration, child)
        waves.append(audio.samples)
        tracks.append(track)
        segments_all.extend(Segment(slot_speaker_id(i), on, du) for on, du in segs)
    stack = np.stack(waves)
    mixture = stack.mean(axis=0)
    annotation = DiarizationAnnotation("sim", sorted(segments_all, key=lambda s: s.onset))
    if noise_snr_db is not None:
        active = np.abs(stack).max(axis=0) > 0
        rms = np.sqrt(np.mean(mixture[active] ** 2)) if active.any() else 0.1
        mixture = mixture + rng.normal(0.0, rms * 10 ** (-noise_snr_db / 20.0), len(mixture))
    sample = SimulatedSample(
        audio=AudioSignal(mixture, corpus.sample_rate),
        lip_tracks=tracks,
        annotation=annotation,
        num_speakers=num_speakers,
        source_speakers=ids,
        overlap_ratio=overlap_ratio(annotation, corpus.fps, duration),
    )
    if return_sources:
        return sample, [AudioSignal(w, corpus.sample_rate) for w in waves]
    return sample


def apply_lip_missing(
    sample: SimulatedSample,
    scenario: str,
    miss_rate: float,
    rng: np.random.Generator,
) -> SimulatedSample:
    """Zero out lip frames to emulate off-screen speakers.

    partial:  one contiguous window of miss_rate of each track is removed.
    complete: ceil(miss_rate * N) randomly chosen tracks are fully removed.
    hybrid:   a fair coin per speaker picks the partial treatment or, with
              probability miss_rate, full removal (expected missing fraction
              is miss_rate either way).

    The annotation is never altered.
    """
    if scenario not in ("partial", "complete", "hybrid"):
        raise DataError(f"unknown lip-missing scenario {scenario!r}")
    if not 0.0 <= miss_rate <= 1.0:
        raise DataError("miss_rate must lie in [0, 1]")

    def partial(track: LipTrack) -> LipTrack:
        n = track.num_frames
        m = int(round(miss_rate * n))
        if m == 0:
            return track
        start = int(rng.integers(0, n - m + 1))
        return track.mask_frames(start, start + m)

    def complete(track: LipTrack) -> LipTrack:
        return track.mask_frames(0, track.num_frames)

    tracks = list(sample.lip_tracks)
    if scenario == "partial":
        tracks = [partial(t) for t in tracks]
    elif scenario == "complete":
        k = int(np.ceil(miss_rate * len(tracks)))
        chosen = rng.choice(len(tracks), size=k, replace=False) if k else []
        for i in chosen:
            tracks[i] = complete(tracks[i])
    else:
        for i in range(len(tracks)):
            if rng.random() < 0.5:
                tracks[i] = partial(tracks[i])
            elif rng.random() < miss_rate:
                tracks[i] = complete(tracks[i])
    return SimulatedSample(
        audio=sample.audio,
        lip_tracks=tracks,
        annotation=sample.annotation,
        num_speakers=sample.num_speakers,
        source_speakers=sample.source_speakers,
        overlap_ratio=sample.overlap_ratio,
    )


def make_corpus(
    sim: SimConfig, video: VideoConfig, sample_rate: int, seed: int, domain: str = "train"
) -> SourceCorpus:
    """Domain corpora use disjoint speaker inventories and derived seeds."""
    prefixes = {"train": ("tr", 0), "adapt": ("ad", 1), "test": ("te", 2)}
    if domain not in prefixes:
        raise DataError(f"unknown domain {domain!r}")
    prefix, offset = prefixes[domain]
    counts = {
        "train": sim.num_speakers_train,
        "adapt": sim.num_speakers_adapt,
        "test": sim.num_speakers_test,
    }
    ids = [f"{prefix}{i:03d}" for i in range(counts[domain])]
    return SourceCorpus(ids, sample_rate, video.fps, video.resolution, seed * 3 + offset)
