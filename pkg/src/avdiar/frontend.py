"""Trainable feature extractors for audio and lip video.

The audio trunk is a residual 2-D network over log-Mel spectrograms with a
total temporal downsampling of 8.  It backs two heads: per-frame segmental
statistic pooling for the diarization model, and utterance-level statistic
pooling plus a linear projection for speaker embeddings.  The video
front-end is a residual 3-D network that keeps the temporal axis untouched.

All normalization layers are per-time-frame (FrameNorm): statistics never
mix batch items or time steps, so outputs are deterministic, batch-order
independent, and temporally local.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from avdiar.config import AudioConfig, ModelConfig
from avdiar.errors import DataError
from avdiar.media import AudioSignal

EPS = 1e-5  # unified log / variance floor


@dataclass
class FeatureSequence:
    """Frame-level features with their modality and frame period."""

    values: np.ndarray  # T x F
    modality: str  # "audio" | "video"
    frame_period: float

    def __post_init__(self) -> None:
        if self.modality not in ("audio", "video"):
            raise DataError(f"unknown modality {self.modality!r}")
        if self.frame_period <= 0:
            raise DataError("frame_period must be positive")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature values must be finite")


def _mel_bank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 20.0) -> np.ndarray:
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = to_hz(np.linspace(to_mel(fmin), to_mel(sample_rate / 2.0), n_mels + 2))
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_mels, len(fft_freqs)))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (fft_freqs - lo) / (center - lo)
        falling = (hi - fft_freqs) / (hi - center)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def extract_logmel(audio: AudioSignal, cfg: AudioConfig) -> np.ndarray:
    """Log Mel-filterbank energies, frame count 1 + (len - win) // hop."""
    x = np.asarray(audio.samples, dtype=np.float64)
    win, hop = cfg.win_length, cfg.hop_length
    if len(x) < win:
        raise DataError(f"audio of {len(x)} samples is shorter than one {win}-sample window")
    n_frames = 1 + (len(x) - win) // hop
    n_fft = 1 << (win - 1).bit_length()
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = power @ _mel_bank(cfg.sample_rate, n_fft, cfg.n_mels).T
    return np.log(np.maximum(mel, EPS))


def normalize_features(feats: np.ndarray) -> np.ndarray:
    """Per-chunk mean/variance normalization along time, per bin."""
    mu = feats.mean(axis=0, keepdims=True)
    sd = feats.std(axis=0, keepdims=True)
    return (feats - mu) / np.maximum(sd, EPS)


class FrameNorm(nn.Module):
    """Normalize over channels and space independently for every time frame.

    Input layout (B, C, T, *spatial); statistics are computed over all dims
    except batch and time, with per-channel affine parameters.
    """

    def __init__(self, channels: int, eps: float = EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dims = (1,) + tuple(range(3, x.ndim))
        mu = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, unbiased=False, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return x * self.weight.view(shape) + self.bias.view(shape)


class _Block2d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = FrameNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = FrameNorm(cout)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), FrameNorm(cout)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.norm1(self.conv1(x)).relu()
        out = self.norm2(self.conv2(out))
        return (out + self.skip(x)).relu()


class AudioTrunk(nn.Module):
    """Residual network over (B, 1, T, n_mels); downsamples both axes by 8."""

    def __init__(self, widths: tuple[int, ...], blocks: tuple[int, ...]):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, widths[0], 3, padding=1, bias=False), FrameNorm(widths[0]), nn.ReLU()
        )
        stages = []
        cin = widths[0]
        for i, (width, reps) in enumerate(zip(widths, blocks)):
            for j in range(reps):
                stride = 2 if (i > 0 and j == 0) else 1
                stages.append(_Block2d(cin, width, stride))
                cin = width
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))


class SegmentalStatPooling(nn.Module):
    """Aggregate the frequency axis of a trunk map into per-frame mean+std.

    (B, C, T, F) -> (B, T, 2C).  With ``var_floor=0`` a constant-over-
    frequency map yields exactly zero std channels (probe mode).
    """

    def __init__(self, var_floor: float = EPS):
        super().__init__()
        self.var_floor = var_floor

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        mean = fmap.mean(dim=3)
        var = fmap.var(dim=3, unbiased=False)
        if self.var_floor > 0:
            std = torch.sqrt(var + self.var_floor)
        else:
            std = torch.sqrt(var.clamp_min(0.0))
        return torch.cat([mean, std], dim=1).transpose(1, 2)


class AudioFrontend(nn.Module):
    """Log-Mel chunk (B, T, M) -> frame features (B, ceil(T/8), 2 * widths[-1])."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = AudioTrunk(cfg.audio_widths, cfg.audio_blocks)
        self.pool = SegmentalStatPooling()

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.pool(self.trunk(mel.unsqueeze(1)))


class _Block3d(nn.Module):
    def __init__(self, cin: int, cout: int, spatial_stride: int):
        super().__init__()
        stride = (1, spatial_stride, spatial_stride)
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = FrameNorm(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = FrameNorm(cout)
        if spatial_stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False), FrameNorm(cout)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.norm1(self.conv1(x)).relu()
        out = self.norm2(self.conv2(out))
        return (out + self.skip(x)).relu()


class VideoFrontend(nn.Module):
    """Lip clip (B, T, H, W) -> frame features (B, T, widths[-1]).

    Stem: kernel 7, stride 2 in space only, no pooling.  Every residual
    stage strides (1, 2, 2); the temporal length is never downsampled.
    Spatial global average pooling closes the network.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv3d(1, cfg.video_stem_channels, 7, stride=(1, 2, 2), padding=3, bias=False),
            FrameNorm(cfg.video_stem_channels),
            nn.ReLU(),
        )
        stages = []
        cin = cfg.video_stem_channels
        for i, (width, reps) in enumerate(zip(cfg.video_widths, cfg.video_blocks)):
            for j in range(reps):
                stages.append(_Block3d(cin, width, 2 if j == 0 else 1))
                cin = width
        self.stages = nn.Sequential(*stages)
        self._blocks_total = sum(cfg.video_blocks)

    def temporal_receptive_radius(self) -> int:
        # stem k=7 contributes 3; each residual block has two k=3 convs
        return 3 + 2 * self._blocks_total

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        fmap = self.stages(self.stem(clip.unsqueeze(1)))
        return fmap.mean(dim=(3, 4)).transpose(1, 2)


class SpeakerEmbedder(nn.Module):
    """Audio trunk + utterance-level mean/std pooling + linear projection."""

    def __init__(self, cfg: ModelConfig, n_mels: int):
        super().__init__()
        self.trunk = AudioTrunk(cfg.audio_widths, cfg.audio_blocks)
        freq_out = -(-n_mels // 8)  # ceil division, three stride-2 stages
        self.fc = nn.Linear(2 * cfg.audio_widths[-1] * freq_out, cfg.embedding_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        fmap = self.trunk(mel.unsqueeze(1))  # (B, C, T', F')
        flat = fmap.transpose(2, 3).flatten(1, 2)  # (B, C*F', T')
        mean = flat.mean(dim=2)
        std = torch.sqrt(flat.var(dim=2, unbiased=False) + EPS)
        return self.fc(torch.cat([mean, std], dim=1))


class ArcFaceHead(nn.Module):
    """Additive-angular-margin softmax for speaker classification."""

    def __init__(self, embedding_dim: int, n_classes: int, scale: float = 32.0, margin: float = 0.2):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, embedding_dim) * 0.05)
        self.scale = scale
        self.margin = margin

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if labels.min() < 0 or labels.max() >= self.weight.shape[0]:
            raise DataError("class label out of range")
        cos = F.normalize(embeddings, dim=1) @ F.normalize(self.weight, dim=1).t()
        cos = cos.clamp(-1.0 + 1e-7, 1.0 - 1e-7)
        rows = torch.arange(len(labels), device=cos.device)
        margin_cos = torch.cos(torch.acos(cos[rows, labels]) + self.margin)
        logits = cos.clone()
        logits[rows, labels] = margin_cos
        return F.cross_entropy(self.scale * logits, labels)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def embed_utterance(
    embedder: SpeakerEmbedder, audio: AudioSignal, cfg: AudioConfig, min_duration: float = 0.5
) -> np.ndarray:
    """Unit-normalized embedding of one utterance (eval mode, no grad)."""
    if audio.duration < min_duration:
        raise DataError(f"utterance of {audio.duration:.2f} s is shorter than {min_duration} s")
    mel = normalize_features(extract_logmel(audio, cfg))
    was_training = embedder.training
    embedder.eval()
    with torch.no_grad():
        param = next(embedder.parameters())
        vec = embedder(torch.as_tensor(mel, dtype=param.dtype).unsqueeze(0))[0].cpu().numpy()
    if was_training:
        embedder.train()
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def audio_features(frontend: AudioFrontend, mel: np.ndarray, hop_s: float) -> FeatureSequence:
    """Single-chunk convenience wrapper returning a tagged FeatureSequence."""
    frontend.eval()
    with torch.no_grad():
        out = frontend(torch.as_tensor(mel, dtype=torch.float32).unsqueeze(0))[0].numpy()
    return FeatureSequence(out, "audio", hop_s * 8)


def video_features(frontend: VideoFrontend, frames: np.ndarray, fps: float) -> FeatureSequence:
    frontend.eval()
    with torch.no_grad():
        out = frontend(torch.as_tensor(frames, dtype=torch.float32).unsqueeze(0))[0].numpy()
    return FeatureSequence(out, "video", 1.0 / fps)
