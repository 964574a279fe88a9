"""Full diarization network and checkpoint container.

Ties the audio/video front-ends, the multi-modal encoder, and the multi-task
decoder together behind a single forward that routes whichever modalities are
present.  Checkpoints are a single torch file holding named parameter tensors
for the model and the speaker embedder, the full configuration as a plain
dict, and a metadata dict (training stage, tuned thresholds, config hash).
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from avdiar.config import ExperimentConfig, config_from_dict
from avdiar.decoder import MultiTaskDecoder
from avdiar.encoder import MultiModalEncoder, build_attention_mask
from avdiar.errors import DataError
from avdiar.frontend import AudioFrontend, SpeakerEmbedder, VideoFrontend


class DiarizationModel(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg
        self.audio_frontend = AudioFrontend(cfg.model)
        self.video_frontend = VideoFrontend(cfg.model)
        self.encoder = MultiModalEncoder(cfg.model)
        self.decoder = MultiTaskDecoder(cfg.model)

    def forward(
        self,
        mel: torch.Tensor | None = None,  # (B, T, n_mels)
        lips: torch.Tensor | None = None,  # (B, N, T2, H, W)
        e_spk: torch.Tensor | None = None,  # (B, C, S)
        mask_case: str = "auto",
        branches: tuple[str, ...] = ("audio",),
        slot_indices: list[int] | None = None,
        return_logits: bool = False,
        mixed_zero: str | None = None,
        isolate_slots: bool = False,
    ) -> dict[str, torch.Tensor]:
        if mel is None and lips is None:
            raise DataError("at least one input modality is required")
        xa = xv = None
        t1 = n_tracks = t2 = 0
        if mel is not None:
            xa = self.audio_frontend(mel)
            t1 = xa.shape[1]
        if lips is not None:
            b, n_tracks, t2, h, w = lips.shape
            xv = self.video_frontend(lips.reshape(b * n_tracks, t2, h, w))
            xv = xv.reshape(b, n_tracks, t2, -1)
        if e_spk is None:
            raise DataError("speaker profile matrix e_spk is required")
        if lips is not None and e_spk.shape[1] != n_tracks:
            raise DataError("profile slots must match lip track count when video is present")

        mask = build_attention_mask(mask_case, t1, n_tracks, t2)
        xa_hat, xv_hat, pa, pv = self.encoder(xa, xv, mask, slot_indices)

        e_lip = None
        if lips is not None:
            slots = slot_indices if slot_indices is not None else list(range(n_tracks))
            e_lip = self.encoder.lip_identity[list(slots)].unsqueeze(0).expand(
                e_spk.shape[0], -1, -1
            )
        return self.decoder(
            xa_hat,
            xv_hat,
            pa,
            pv,
            e_spk,
            e_lip,
            branches=branches,
            return_logits=return_logits,
            mixed_zero=mixed_zero,
            isolate_slots=isolate_slots,
        )

    def mixed_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if "mixed" in n]


def save_checkpoint(
    path,
    cfg: ExperimentConfig,
    embedder: SpeakerEmbedder,
    model: DiarizationModel | None,
    meta: dict,
) -> None:
    payload = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "embedder": embedder.state_dict(),
        "model": model.state_dict() if model is not None else None,
        "meta": dict(meta),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ExperimentConfig, SpeakerEmbedder, DiarizationModel | None, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = config_from_dict(payload["config"])
    embedder = SpeakerEmbedder(cfg.model, cfg.audio.n_mels)
    embedder.load_state_dict(payload["embedder"])
    embedder.eval()
    model = None
    if payload["model"] is not None:
        model = DiarizationModel(cfg)
        model.load_state_dict(payload["model"])
        model.eval()
    return cfg, embedder, model, payload["meta"]
