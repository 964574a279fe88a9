"""Experiment configuration: data parameters, model dimensions, stage schedules.

Two preset modes exist.  ``toy`` is sized so the whole pipeline (simulation,
four training stages, staged inference, scoring) runs on a desktop CPU in
well under an hour.  ``paper`` keeps the full-scale dimensions so they remain
expressible; nothing in this artifact requires actually training at that
scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from avdiar.errors import UsageError


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))


@dataclass
class VideoConfig:
    fps: float = 12.5
    resolution: int = 16  # lip crops are resolution x resolution, grayscale


@dataclass
class ModelConfig:
    # audio trunk (shared by the speaker embedder and the audio front-end)
    audio_widths: tuple[int, ...] = (8, 16, 32, 64)
    audio_blocks: tuple[int, ...] = (1, 1, 1, 1)
    embedding_dim: int = 64
    # video front-end
    video_stem_channels: int = 8
    video_widths: tuple[int, ...] = (8, 16, 32, 64)
    video_blocks: tuple[int, ...] = (1, 1, 1, 1)
    # encoder / decoder
    encoder_dim: int = 64
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    attention_heads: int = 4
    ffn_dim: int = 128
    conv_kernel: int = 15
    dropout: float = 0.1
    lip_profile_mlp: bool = False  # optional MLP on lip identity profiles
    # task geometry
    capacity: int = 4
    chunk_length: float = 4.0
    va_resolution: float = 0.08

    @property
    def audio_feat_dim(self) -> int:
        return 2 * self.audio_widths[-1]

    @property
    def video_feat_dim(self) -> int:
        return self.video_widths[-1]

    @property
    def num_out_frames(self) -> int:
        """Output frames per chunk; chunk_length must be a multiple of va_resolution."""
        t = self.chunk_length / self.va_resolution
        if abs(t - round(t)) > 1e-9:
            raise UsageError(
                f"va_resolution {self.va_resolution} does not divide "
                f"chunk_length {self.chunk_length}"
            )
        return int(round(t))


@dataclass
class SimConfig:
    num_speakers_train: int = 64
    num_speakers_adapt: int = 16
    num_speakers_test: int = 16
    min_speakers: int = 1
    max_speakers: int = 4
    max_segment: float = 4.0
    sample_duration: float = 8.0
    noise_snr_db: float | None = None  # additive noise for the adaptation/test domain
    lip_motion_threshold: float = 2e-3


@dataclass
class TrainConfig:
    batch_size: int = 8
    pretrain_iters: int = 900
    stage_iters: tuple[int, int, int, int] = (600, 250, 300, 300)
    peak_lr: float = 1e-3
    final_lr: float = 1e-4
    warmup_iters: int = 150
    pretrain_lr: float = 1e-3
    adaptation_ratio: float = 0.2
    mask_prob: float = 0.5
    adapt_snr_db: float = 20.0
    video_augment: bool = False
    log_every: int = 25


@dataclass
class InferConfig:
    chunk_shift: float = 2.0
    num_test_samples: int = 50
    sa_threshold: float | None = None  # None: use the value tuned at pretraining
    ahc_threshold: float | None = None
    binarize_threshold: float = 0.5
    min_profile_sec: float = 2.0
    vad_window: float = 1.5
    vad_shift: float = 0.75
    collar: float = 0.25


@dataclass
class ExperimentConfig:
    mode: str = "toy"
    seed: int = 17
    audio: AudioConfig = field(default_factory=AudioConfig)
    video: VideoConfig = field(default_factory=VideoConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def validate(self) -> "ExperimentConfig":
        if self.mode not in ("toy", "paper"):
            raise UsageError(f"mode must be 'toy' or 'paper', got {self.mode!r}")
        if self.mode == "toy" and self.seed is None:
            raise UsageError("toy mode requires an explicit seed")
        _ = self.model.num_out_frames  # raises if resolution does not divide
        frames = self.model.chunk_length * self.video.fps
        if abs(frames - round(frames)) > 1e-9:
            raise UsageError("chunk_length must be a whole number of video frames")
        if self.model.encoder_dim % self.attention_heads_total != 0:
            raise UsageError("encoder_dim must be divisible by attention_heads")
        if not 0.0 < self.infer.binarize_threshold < 1.0:
            raise UsageError("binarize_threshold must lie strictly inside (0, 1)")
        if self.infer.chunk_shift > self.model.chunk_length:
            raise UsageError("chunk_shift must not exceed chunk_length")
        return self

    @property
    def attention_heads_total(self) -> int:
        return self.model.attention_heads

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def toy_config(seed: int = 17) -> ExperimentConfig:
    return ExperimentConfig(mode="toy", seed=seed).validate()


def paper_config(seed: int = 17) -> ExperimentConfig:
    """Full-scale dimensions as configuration defaults (not trainable here)."""
    return ExperimentConfig(
        mode="paper",
        seed=seed,
        audio=AudioConfig(n_mels=80),
        video=VideoConfig(fps=25.0, resolution=88),
        model=ModelConfig(
            audio_widths=(64, 128, 256, 512),
            audio_blocks=(3, 4, 6, 3),
            embedding_dim=256,
            video_stem_channels=32,
            video_widths=(32, 64, 128, 256),
            video_blocks=(2, 2, 2, 2),
            encoder_dim=512,
            encoder_blocks=6,
            decoder_blocks=6,
            attention_heads=8,
            ffn_dim=1024,
            capacity=6,
            chunk_length=8.0,
            va_resolution=0.01,
        ),
        train=TrainConfig(
            batch_size=32,
            pretrain_iters=100000,
            stage_iters=(50000, 50000, 50000, 50000),
            peak_lr=1e-4,
            final_lr=1e-5,
            warmup_iters=2000,
        ),
        infer=InferConfig(sa_threshold=0.3479),
    ).validate()


def _merge(dc: Any, data: dict) -> Any:
    """Overlay a plain dict (e.g. a TOML section) onto a dataclass."""
    updates = {}
    names = {f.name: f for f in fields(dc)}
    for key, value in data.items():
        if key not in names:
            raise UsageError(f"unknown config key {key!r} for {type(dc).__name__}")
        current = getattr(dc, key)
        if hasattr(current, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be a table")
            updates[key] = _merge(current, value)
        elif isinstance(current, tuple):
            updates[key] = tuple(value)
        else:
            updates[key] = value
    return replace(dc, **updates)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Rebuild a full config from its ``to_dict`` form (checkpoint payloads)."""
    base = ExperimentConfig(mode=data.get("mode", "toy"), seed=data.get("seed", 17))
    sections = {k: v for k, v in data.items() if k not in ("mode", "seed")}
    return _merge(base, sections).validate()


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from optional TOML file plus dotted-key overrides.

    Overrides use dotted paths (``model.capacity=6``) and take precedence over
    file values, which take precedence over the mode preset.
    """
    data: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    mode = data.get("mode", "toy")
    if overrides and "mode" in overrides:
        mode = overrides["mode"]
    cfg = paper_config() if mode == "paper" else toy_config()
    data.pop("mode", None)
    cfg = _merge(cfg, data)
    if overrides:
        for dotted, value in overrides.items():
            if dotted == "mode":
                continue
            parts = dotted.split(".")
            node: dict = {}
            leaf = node
            for part in parts[:-1]:
                leaf[part] = {}
                leaf = leaf[part]
            leaf[parts[-1]] = value
            cfg = _merge(cfg, node)
    return cfg.validate()
