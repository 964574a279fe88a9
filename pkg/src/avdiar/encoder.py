"""Multi-modal Conformer encoder with per-modality experts.

Feedforward and convolution modules have separate audio and video parameter
sets; the self-attention layers are shared and exchange information across
modalities under an explicit allow-mask.  Audio tokens carry a learnable
modality-type embedding; each lip track carries a learnable identity
embedding that marks which profile slot it belongs to.  Sinusoidal positions
restart at every lip track.

Convolution is applied per contiguous token segment (the audio stream as one
segment, every lip track separately), so features never smear across track
boundaries through the convolution path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from avdiar.config import ModelConfig
from avdiar.errors import DataError

MASK_CASES = ("bidirectional", "audio_to_video", "video_to_audio", "prohibited")


@dataclass
class EncoderAttentionMask:
    """Boolean allow-matrix over the concatenated token sequence.

    Row i may attend column j iff allow[i, j].  The first t1 tokens are
    audio; the remaining n * t2 tokens are the lip tracks in slot order.
    """

    allow: np.ndarray
    case: str

    @property
    def length(self) -> int:
        return self.allow.shape[0]


def build_attention_mask(case: str, t1: int, n_tracks: int, t2: int) -> EncoderAttentionMask:
    """Construct the cross-modal attention mask for one of the four regimes.

    ``auto`` resolves from modality presence: with both modalities present it
    is bidirectional, with one absent the cross blocks vanish anyway.
    """
    if t1 < 0 or n_tracks < 0 or t2 < 0:
        raise DataError("mask dimensions must be non-negative")
    video_len = n_tracks * t2
    total = t1 + video_len
    resolved = case
    if case == "auto":
        resolved = "bidirectional" if (t1 > 0 and video_len > 0) else "prohibited"
    if resolved not in MASK_CASES:
        raise DataError(f"unknown attention mask case {case!r}")
    allow = np.zeros((total, total), dtype=bool)
    allow[:t1, :t1] = True
    allow[t1:, t1:] = True
    if resolved == "bidirectional":
        allow[:, :] = True
    elif resolved == "audio_to_video":
        allow[t1:, :t1] = True  # video tokens read audio
    elif resolved == "video_to_audio":
        allow[:t1, t1:] = True  # audio tokens read video
    return EncoderAttentionMask(allow, case)


def sinusoid_table(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)
    return table.to(dtype)


class _FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, hidden),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class _ConvModule(nn.Module):
    """Conformer convolution: pointwise-GLU, depthwise, norm, pointwise.

    The post-depthwise norm is a per-position LayerNorm, keeping the module
    deterministic and local in time.
    """

    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.pre_norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.post_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):  # (B, T, D)
        y = self.pre_norm(x).transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        y = self.depthwise(y).transpose(1, 2)
        y = F.silu(self.post_norm(y)).transpose(1, 2)
        y = self.pointwise_out(y).transpose(1, 2)
        return self.dropout(y)


class _SharedAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        if dim % heads:
            raise DataError("encoder dim must be divisible by the head count")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tokens: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        b, length, dim = tokens.shape
        q, k, v = self.qkv(self.norm(tokens)).chunk(3, dim=-1)
        shape = (b, length, self.heads, dim // self.heads)
        q, k, v = (t.view(shape).transpose(1, 2) for t in (q, k, v))
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=allow)
        att = att.transpose(1, 2).reshape(b, length, dim)
        return self.dropout(self.out(att))


class ConformerBlock(nn.Module):
    """Macaron feedforwards and convolution per modality, shared attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h, k, p = cfg.encoder_dim, cfg.ffn_dim, cfg.conv_kernel, cfg.dropout
        experts = lambda factory: nn.ModuleDict({"audio": factory(), "video": factory()})
        self.ffn_pre = experts(lambda: _FeedForward(d, h, p))
        self.attention = _SharedAttention(d, cfg.attention_heads, p)
        self.conv = experts(lambda: _ConvModule(d, k, p))
        self.ffn_post = experts(lambda: _FeedForward(d, h, p))
        self.norm_out = experts(lambda: nn.LayerNorm(d))

    def forward(
        self,
        xa: torch.Tensor | None,
        xv: torch.Tensor | None,
        allow: torch.Tensor,
    ) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        if xa is not None:
            xa = xa + 0.5 * self.ffn_pre["audio"](xa)
        if xv is not None:
            xv = xv + 0.5 * self.ffn_pre["video"](xv)

        parts = []
        if xa is not None:
            parts.append(xa)
        if xv is not None:
            b, n, t2, d = xv.shape
            parts.append(xv.reshape(b, n * t2, d))
        tokens = torch.cat(parts, dim=1)
        att = self.attention(tokens, allow)
        t1 = xa.shape[1] if xa is not None else 0
        if xa is not None:
            xa = xa + att[:, :t1]
        if xv is not None:
            xv = xv + att[:, t1:].reshape(xv.shape)

        if xa is not None:
            xa = xa + self.conv["audio"](xa)
            xa = xa + 0.5 * self.ffn_post["audio"](xa)
            xa = self.norm_out["audio"](xa)
        if xv is not None:
            b, n, t2, d = xv.shape
            flat = xv.reshape(b * n, t2, d)
            flat = flat + self.conv["video"](flat)
            flat = flat + 0.5 * self.ffn_post["video"](flat)
            xv = self.norm_out["video"](flat).reshape(b, n, t2, d)
        return xa, xv


class MultiModalEncoder(nn.Module):
    """Maps front-end features to cross-modally contextualized tokens.

    Returns the encoded audio and video streams plus the positional matrices
    that were added at the input; the decoder reuses those as key auxiliaries.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.audio_proj = nn.Linear(cfg.audio_feat_dim, cfg.encoder_dim)
        self.video_proj = nn.Linear(cfg.video_feat_dim, cfg.encoder_dim)
        self.audio_type = nn.Parameter(torch.zeros(cfg.encoder_dim))
        self.lip_identity = nn.Parameter(torch.zeros(cfg.capacity, cfg.encoder_dim))
        nn.init.normal_(self.audio_type, std=0.02)
        nn.init.normal_(self.lip_identity, std=0.02)
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.encoder_blocks))

    def positional_audio(self, t1: int) -> torch.Tensor:
        table = sinusoid_table(t1, self.cfg.encoder_dim, self.audio_type.dtype)
        return table.to(self.audio_type.device) + self.audio_type

    def positional_video(
        self, n_tracks: int, t2: int, slot_indices: list[int] | None = None
    ) -> torch.Tensor:
        """(N, T2, D); the sinusoid restarts at frame 0 for every track.

        ``slot_indices`` selects which identity embedding each track carries;
        by default track n carries identity n.
        """
        if n_tracks > self.cfg.capacity:
            raise DataError(f"{n_tracks} lip tracks exceed capacity {self.cfg.capacity}")
        if slot_indices is None:
            slot_indices = list(range(n_tracks))
        if len(slot_indices) != n_tracks or any(
            not 0 <= s < self.cfg.capacity for s in slot_indices
        ):
            raise DataError("slot_indices must give one valid identity per track")
        table = sinusoid_table(t2, self.cfg.encoder_dim, self.lip_identity.dtype)
        table = table.to(self.lip_identity.device)
        return self.lip_identity[list(slot_indices)].unsqueeze(1) + table.unsqueeze(0)

    def forward(
        self,
        audio_feats: torch.Tensor | None,
        video_feats: torch.Tensor | None,
        mask: EncoderAttentionMask,
        slot_indices: list[int] | None = None,
    ):
        if audio_feats is None and video_feats is None:
            raise DataError("encoder needs at least one modality")
        xa = pa = xv = pv = None
        t1 = 0
        if audio_feats is not None:
            t1 = audio_feats.shape[1]
            pa = self.positional_audio(t1)
            xa = self.audio_proj(audio_feats) + pa
        n_tracks = 0
        if video_feats is not None:
            _, n_tracks, t2, _ = video_feats.shape
            pv = self.positional_video(n_tracks, t2, slot_indices)
            xv = self.video_proj(video_feats) + pv
        expected = t1 + (n_tracks * video_feats.shape[2] if video_feats is not None else 0)
        if mask.length != expected:
            raise DataError(f"mask length {mask.length} does not match {expected} tokens")
        device = self.audio_type.device
        allow = torch.as_tensor(mask.allow, device=device)
        for block in self.blocks:
            xa, xv = block(xa, xv, allow)
        return xa, xv, pa, pv

    def parameter_groups(self) -> dict[str, list[str]]:
        """Disjoint, exhaustive audio-expert / video-expert / shared split."""
        groups: dict[str, list[str]] = {"audio": [], "video": [], "shared": []}
        for name, _ in self.named_parameters():
            if ".audio." in name or name.startswith(("audio_proj.", "audio_type")):
                groups["audio"].append(name)
            elif ".video." in name or name.startswith(("video_proj.", "lip_identity")):
                groups["video"].append(name)
            else:
                groups["shared"].append(name)
        return groups
