"""Multi-task speaker-wise decoder with audio, video, and mixed branches.

Each branch keeps a per-slot state matrix (capacity x dim) that starts at
exact zeros and is refined over the blocks: slot self-attention exchanges
inter-speaker context, cross-attention reads the encoded features with
queries formed by concatenating the state with the slot's profile auxiliary
and keys formed by concatenating features with their positional matrices, and
a feedforward closes the block.  The mixed branch cross-attends over the
two-token modality axis built from the audio and video branch intermediates
of the same depth.  A final linear layer maps each slot state to the
per-frame activity logits for the whole chunk.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from avdiar.config import ModelConfig
from avdiar.errors import DataError

BRANCHES = ("audio", "video", "mixed")


class ProfileMlp(nn.Module):
    """Two linear layers with layer normalization and ReLU in between."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, out_dim), nn.LayerNorm(out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, x):
        return self.net(x)


class _SlotSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, state: torch.Tensor, isolate: bool = False) -> torch.Tensor:
        b, c, d = state.shape
        q, k, v = self.qkv(self.norm(state)).chunk(3, dim=-1)
        shape = (b, c, self.heads, d // self.heads)
        q, k, v = (t.view(shape).transpose(1, 2) for t in (q, k, v))
        mask = None
        if isolate:  # diagnostic: every slot attends only itself
            mask = torch.eye(c, dtype=torch.bool, device=state.device)
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.dropout(self.out(att.transpose(1, 2).reshape(b, c, d)))


class _CrossAttention(nn.Module):
    """Queries of width q_dim, keys of width k_dim, values of width dim."""

    def __init__(self, dim: int, q_dim: int, k_dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.dim = dim
        self.q_proj = nn.Linear(q_dim, dim)
        self.k_proj = nn.Linear(k_dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, queries, keys, values):
        b, c, _ = queries.shape
        q = self.q_proj(queries).view(b, c, self.heads, -1).transpose(1, 2)
        k = self.k_proj(keys).view(b, keys.shape[1], self.heads, -1).transpose(1, 2)
        v = self.v_proj(values).view(b, values.shape[1], self.heads, -1).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v)
        return self.dropout(self.out(att.transpose(1, 2).reshape(b, c, self.dim)))


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


class _BranchBlock(nn.Module):
    """One decoder block for the audio or video branch."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.encoder_dim
        self.self_attn = _SlotSelfAttention(d, cfg.attention_heads, cfg.dropout)
        self.norm_q = nn.LayerNorm(d)
        self.cross = _CrossAttention(d, 2 * d, 2 * d, cfg.attention_heads, cfg.dropout)
        self.ffn = _FeedForward(d, cfg.ffn_dim, cfg.dropout)

    def forward(self, state, aux, keys, values, isolate_slots=False):
        state = state + self.self_attn(state, isolate_slots)
        queries = torch.cat([self.norm_q(state), aux], dim=-1)
        state = state + self.cross(queries, keys, values)
        return state + self.ffn(state)


class _MixedBlock(nn.Module):
    """Mixed-branch block: cross-attention over the two modality tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.encoder_dim
        self.self_attn = _SlotSelfAttention(d, cfg.attention_heads, cfg.dropout)
        self.norm_q = nn.LayerNorm(d)
        self.cross = _CrossAttention(d, d, 2 * d, cfg.attention_heads, cfg.dropout)
        self.ffn = _FeedForward(d, cfg.ffn_dim, cfg.dropout)

    def forward(self, state, modality_tokens, slot_emb, isolate_slots=False):
        b, c, two, d = modality_tokens.shape
        state = state + self.self_attn(state, isolate_slots)
        keys = torch.cat([modality_tokens, slot_emb.expand(b, c, two, d)], dim=-1)
        q = self.norm_q(state).reshape(b * c, 1, d)
        att = self.cross(q, keys.reshape(b * c, two, 2 * d), modality_tokens.reshape(b * c, two, d))
        state = state + att.reshape(b, c, d)
        return state + self.ffn(state)


class MultiTaskDecoder(nn.Module):
    """Produces per-slot voice-activity posteriors for the requested branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.encoder_dim
        self.cfg = cfg
        self.profile_mlp = ProfileMlp(cfg.embedding_dim, d)
        self.lip_mlp = ProfileMlp(d, d) if cfg.lip_profile_mlp else None
        self.audio_blocks = nn.ModuleList(_BranchBlock(cfg) for _ in range(cfg.decoder_blocks))
        self.video_blocks = nn.ModuleList(_BranchBlock(cfg) for _ in range(cfg.decoder_blocks))
        self.mixed_blocks = nn.ModuleList(_MixedBlock(cfg) for _ in range(cfg.decoder_blocks))
        self.mixed_slot_emb = nn.Parameter(torch.randn(2, d) * 0.02)
        t_out = cfg.num_out_frames
        self.head = nn.ModuleDict(
            {b: nn.Sequential(nn.LayerNorm(d), nn.Linear(d, t_out)) for b in BRANCHES}
        )

    def forward(
        self,
        xa_hat: torch.Tensor | None,
        xv_hat: torch.Tensor | None,
        pa: torch.Tensor | None,
        pv: torch.Tensor | None,
        e_spk: torch.Tensor,
        e_lip: torch.Tensor | None,
        branches: tuple[str, ...] = ("audio",),
        return_logits: bool = False,
        mixed_zero: str | None = None,
        isolate_slots: bool = False,
    ) -> dict[str, torch.Tensor]:
        """Run the requested branches; outputs are (B, C, T') posteriors.

        Slot order is the profile order: output row n always belongs to
        profile slot n.  ``mixed_zero`` and ``isolate_slots`` are diagnostic
        hooks (zero one modality's intermediates in the mixed fusion; restrict
        slot self-attention to the diagonal).
        """
        unknown = set(branches) - set(BRANCHES)
        if unknown:
            raise DataError(f"unknown decoder branches {sorted(unknown)}")
        need_audio = "audio" in branches or "mixed" in branches
        need_video = "video" in branches or "mixed" in branches
        if need_audio and xa_hat is None:
            raise DataError("audio branch requested without encoded audio features")
        if need_video and xv_hat is None:
            raise DataError("video branch requested without encoded video features")

        b, c, _ = e_spk.shape
        d = self.cfg.encoder_dim
        dtype = e_spk.dtype
        device = e_spk.device

        keys_a = vals_a = keys_v = vals_v = aux_a = aux_v = None
        if need_audio:
            aux_a = self.profile_mlp(e_spk)
            keys_a = torch.cat([xa_hat, pa.unsqueeze(0).expand_as(xa_hat)], dim=-1)
            vals_a = xa_hat
        if need_video:
            if e_lip is None:
                raise DataError("video branch requested without lip identity profiles")
            aux_v = self.lip_mlp(e_lip) if self.lip_mlp is not None else e_lip
            flat_v = xv_hat.flatten(1, 2)
            keys_v = torch.cat([flat_v, pv.reshape(1, -1, d).expand_as(flat_v)], dim=-1)
            vals_v = flat_v

        state_a = torch.zeros(b, c, d, dtype=dtype, device=device)
        state_v = torch.zeros_like(state_a)
        state_m = torch.zeros_like(state_a)
        for i in range(self.cfg.decoder_blocks):
            if need_audio:
                state_a = self.audio_blocks[i](state_a, aux_a, keys_a, vals_a, isolate_slots)
            if need_video:
                state_v = self.video_blocks[i](state_v, aux_v, keys_v, vals_v, isolate_slots)
            if "mixed" in branches:
                fa = torch.zeros_like(state_a) if mixed_zero == "audio" else state_a
                fv = torch.zeros_like(state_v) if mixed_zero == "video" else state_v
                tokens = torch.stack([fa, fv], dim=2)
                state_m = self.mixed_blocks[i](state_m, tokens, self.mixed_slot_emb, isolate_slots)

        states = {"audio": state_a, "video": state_v, "mixed": state_m}
        out = {}
        for branch in branches:
            logits = self.head[branch](states[branch])
            out[branch] = logits if return_logits else torch.sigmoid(logits)
        return out
