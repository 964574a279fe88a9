"""Audio and lip-track data types, mouth-crop geometry, and track storage.

Lip tracks are stored one file per (recording, speaker): a small binary
container holding the frame array plus a JSON sidecar for the frame rate and
per-frame validity mask.

Container layout (all integers little-endian):

    bytes 0-3   magic ``LIPT``
    bytes 4-7   uint32 version (1)
    bytes 8-19  uint32 dims T, H, W
    bytes 20-   T*H*W float32 little-endian frame data, C-order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from avdiar.errors import DataError, NumericalError

_MAGIC = b"LIPT"
_VERSION = 1


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def slice(self, start: float, length: float) -> "AudioSignal":
        """Cut [start, start+length), zero-padding past the end."""
        a = int(round(start * self.sample_rate))
        n = int(round(length * self.sample_rate))
        out = np.zeros(n, dtype=self.samples.dtype)
        src = self.samples[a : a + n]
        out[: len(src)] = src
        return AudioSignal(out, self.sample_rate)


@dataclass
class LipTrack:
    """Grayscale mouth-crop sequence; invalid frames are exact zeros."""

    frames: np.ndarray
    fps: float
    valid_mask: np.ndarray

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(-1)
        if self.frames.ndim != 3:
            raise DataError("lip frames must be T x H x W")
        if self.frames.shape[1] != self.frames.shape[2]:
            raise DataError("lip frames must be square")
        if len(self.valid_mask) != self.frames.shape[0]:
            raise DataError("valid_mask length must match frame count")
        if self.fps <= 0:
            raise DataError("fps must be positive")
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 1):
            raise DataError("lip frame values must lie in [0, 1]")
        invalid = ~self.valid_mask
        if invalid.any() and np.any(self.frames[invalid]):
            raise DataError("invalid lip frames must be exactly zero")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> int:
        return self.frames.shape[1]

    def mask_frames(self, start: int, stop: int) -> "LipTrack":
        """Return a copy with frames [start, stop) zeroed and marked invalid."""
        frames = self.frames.copy()
        mask = self.valid_mask.copy()
        frames[start:stop] = 0.0
        mask[start:stop] = False
        return LipTrack(frames, self.fps, mask)

    def slice_frames(self, start: int, count: int) -> "LipTrack":
        """Cut ``count`` frames from ``start``, zero-padding past the end."""
        frames = np.zeros((count, *self.frames.shape[1:]), dtype=self.frames.dtype)
        mask = np.zeros(count, dtype=bool)
        src = self.frames[start : start + count]
        frames[: len(src)] = src
        mask[: len(src)] = self.valid_mask[start : start + count]
        return LipTrack(frames, self.fps, mask)


@dataclass(frozen=True)
class FaceLandmarks:
    """Nose tip and mouth corners, in pixel coordinates."""

    nose_tip: tuple[float, float]
    mouth_left: tuple[float, float]
    mouth_right: tuple[float, float]

    def __post_init__(self) -> None:
        for p in (self.nose_tip, self.mouth_left, self.mouth_right):
            if not np.all(np.isfinite(p)):
                raise DataError("landmark coordinates must be finite")


@dataclass(frozen=True)
class LipRoi:
    x_center: float
    y_center: float
    width: float

    @property
    def height(self) -> float:
        return self.width


def compute_lip_roi(landmarks: FaceLandmarks) -> LipRoi:
    """Square mouth crop from the nose tip and mouth corners.

    The box is centered on the mouth-corner midpoint with side
    min(3.2 * d_mn, 2 * max(d_mn, d_corners)), where d_mn is the distance
    from the nose tip to the mouth center and d_corners the mouth width.
    """
    p1 = np.asarray(landmarks.nose_tip, dtype=np.float64)
    p2 = np.asarray(landmarks.mouth_left, dtype=np.float64)
    p3 = np.asarray(landmarks.mouth_right, dtype=np.float64)
    center = (p2 + p3) / 2.0
    d_mn = float(np.linalg.norm(p1 - center))
    d_corners = float(np.linalg.norm(p2 - p3))
    if d_mn == 0.0 and d_corners == 0.0:
        raise NumericalError("degenerate landmarks: nose tip and mouth corners coincide")
    width = min(3.2 * d_mn, 2.0 * max(d_mn, d_corners))
    return LipRoi(float(center[0]), float(center[1]), width)


def _track_paths(root, recording_id: str, speaker_id: str) -> tuple[Path, Path]:
    base = Path(root) / recording_id
    return base / f"{speaker_id}.lips", base / f"{speaker_id}.json"


def save_lip_track(track: LipTrack, root, recording_id: str, speaker_id: str) -> Path:
    bin_path, json_path = _track_paths(root, recording_id, speaker_id)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    t, h, w = track.frames.shape
    with open(bin_path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _VERSION, t, h, w))
        fh.write(np.ascontiguousarray(track.frames, dtype="<f4").tobytes())
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"fps": track.fps, "valid_mask": track.valid_mask.astype(int).tolist()}, fh)
    return bin_path


def load_lip_track(root, recording_id: str, speaker_id: str) -> LipTrack:
    bin_path, json_path = _track_paths(root, recording_id, speaker_id)
    with open(bin_path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataError(f"{bin_path}: bad magic {magic!r}")
        version, t, h, w = struct.unpack("<IIII", fh.read(16))
        if version != _VERSION:
            raise DataError(f"{bin_path}: unsupported version {version}")
        data = fh.read(t * h * w * 4)
        if len(data) != t * h * w * 4:
            raise DataError(f"{bin_path}: truncated frame data")
    frames = np.frombuffer(data, dtype="<f4").reshape(t, h, w)
    with open(json_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    mask = np.asarray(meta["valid_mask"], dtype=bool)
    return LipTrack(frames.astype(np.float32), float(meta["fps"]), mask)


def list_lip_tracks(root, recording_id: str) -> list[str]:
    base = Path(root) / recording_id
    if not base.is_dir():
        return []
    return sorted(p.stem for p in base.glob("*.lips"))
