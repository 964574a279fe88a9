"""Four-stage training with model-level and data-level modality masking.

Stage 1 initializes the audio front-end from the pre-trained speaker
embedder and freezes it; audio and video output branches train on simulated
chunks while one of the four encoder attention masks is drawn per step, and
the speaker orders of embeddings and lip tracks are shuffled independently
(labels re-assigned accordingly).  Stage 2 unfreezes the front-end and mixes
in adaptation-domain chunks at a configured ratio.  Stage 3 freezes all
pre-trained weights and trains only the mixed branch under data-level
masking: each speaker may lose either its embedding or its lip track (never
both), with a single consistent shuffle across modalities.  Stage 4 unfreezes
everything for a joint finetune at the decayed learning rate.

Losses are mean binary cross-entropies per branch, summed over the stage's
active branches; padded slots carry all-zero target rows.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from avdiar.annotation import annotation_to_matrix
from avdiar.config import ExperimentConfig
from avdiar.encoder import MASK_CASES
from avdiar.errors import DataError, NumericalError
from avdiar.frontend import (
    ArcFaceHead,
    SpeakerEmbedder,
    embed_utterance,
    extract_logmel,
    normalize_features,
)
from avdiar.media import AudioSignal
from avdiar.model import DiarizationModel, save_checkpoint
from avdiar.simulate import SourceCorpus, make_corpus, simulate_sample, slot_speaker_id

STAGE_BRANCHES = {1: ("audio", "video"), 2: ("audio", "video"), 3: ("audio", "video", "mixed"), 4: ("audio", "video", "mixed")}


def lr_at(iteration: int, peak: float, warmup: int) -> float:
    """Linear warm-up from 0 to peak over ``warmup`` iterations, then flat."""
    if warmup > 0 and iteration < warmup:
        return peak * iteration / warmup
    return peak


def stage_lr(cfg: ExperimentConfig, stage: int, iteration: int) -> float:
    if stage == 1:
        return lr_at(iteration, cfg.train.peak_lr, cfg.train.warmup_iters)
    if stage in (2, 3):
        return cfg.train.peak_lr
    return cfg.train.final_lr


@dataclass
class MaskingRecord:
    """Kept/zeroed state per profile slot, with the per-frame label masks."""

    keep_spk: np.ndarray  # (C,) bool
    keep_lip: np.ndarray
    num_frames: int

    def __post_init__(self) -> None:
        both_masked = ~self.keep_spk & ~self.keep_lip
        if both_masked.any():
            raise DataError("a speaker may lose either its embedding or lip track, not both")

    @property
    def m_spk_out(self) -> np.ndarray:
        return np.repeat(self.keep_spk[:, None], self.num_frames, axis=1).astype(np.float64)

    @property
    def m_lip_out(self) -> np.ndarray:
        return np.repeat(self.keep_lip[:, None], self.num_frames, axis=1).astype(np.float64)


def shuffle_profiles(
    e_spk: np.ndarray,
    lips: np.ndarray,
    labels: np.ndarray,
    mode: str,
    rng: np.random.Generator,
):
    """Shuffle slot orders, re-assigning labels per branch.

    independent: embeddings and lip tracks get their own permutations, so the
    audio and video branches see decoupled speaker orders (their labels are
    the correspondingly permuted copies of the ground truth).
    consistent: one permutation applies to both modalities.
    """
    c = e_spk.shape[0]
    if mode == "independent":
        sh1 = rng.permutation(c)
        sh2 = rng.permutation(c)
        return e_spk[sh1], lips[sh2], labels[sh1], labels[sh2], (sh1, sh2)
    if mode == "consistent":
        sh = rng.permutation(c)
        return e_spk[sh], lips[sh], labels[sh], labels[sh], (sh, sh)
    raise DataError(f"unknown shuffle mode {mode!r}")


def apply_data_masking(
    e_spk: np.ndarray,
    lips: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    mask_prob: float = 0.5,
    eligible: np.ndarray | None = None,
):
    """Zero either the embedding or the lip track of selected speakers.

    Each eligible slot is selected with ``mask_prob``; a fair coin then picks
    which modality to zero.  Labels are filtered by the masking state per
    branch and all outputs share one consistent shuffle:

        labels_aud = sh(M_spk_out AND Y)
        labels_vid = sh(M_lip_out AND Y)
        labels_mix = sh((M_spk_out OR M_lip_out) AND Y)

    Padded (never-valid) slots should be marked ineligible by the caller.
    """
    c, t_out = labels.shape
    keep_spk = np.ones(c, dtype=bool)
    keep_lip = np.ones(c, dtype=bool)
    if eligible is None:
        eligible = np.ones(c, dtype=bool)
    for n in range(c):
        if eligible[n] and rng.random() < mask_prob:
            if rng.random() < 0.5:
                keep_spk[n] = False
            else:
                keep_lip[n] = False
    record = MaskingRecord(keep_spk, keep_lip, t_out)
    e_masked = e_spk * keep_spk[:, None]
    lips_masked = lips * keep_lip[:, None, None, None]
    labels_aud = record.m_spk_out * labels
    labels_vid = record.m_lip_out * labels
    labels_mix = np.maximum(record.m_spk_out, record.m_lip_out) * labels
    sh = rng.permutation(c)
    return (
        e_masked[sh],
        lips_masked[sh],
        labels_aud[sh],
        labels_vid[sh],
        labels_mix[sh],
        record,
        sh,
    )


def bce_loss(outputs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy over all slots and frames."""
    if outputs.shape != labels.shape:
        raise DataError(f"output shape {tuple(outputs.shape)} != labels {tuple(labels.shape)}")
    p = outputs.clamp(eps, 1.0 - eps)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()


def total_loss(
    outputs: dict[str, torch.Tensor], labels: dict[str, torch.Tensor]
) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of per-branch mean BCEs over the branches present in ``outputs``."""
    if set(outputs) != set(labels):
        raise DataError("outputs and labels must cover the same branches")
    per_branch = {}
    total = None
    for branch in sorted(outputs):
        loss = bce_loss(outputs[branch], labels[branch])
        per_branch[branch] = float(loss.detach())
        total = loss if total is None else total + loss
    return total, per_branch


def augment_lips(frames: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Grayscale video augmentation: rotation, flip, crop, contrast/brightness.

    Each transform fires with probability 0.5.  Frames that are exactly zero
    (masked/undetected) are re-zeroed afterwards so validity is preserved.
    """
    out = frames
    zero_frames = ~np.any(frames.reshape(len(frames), -1), axis=1)
    if rng.random() < 0.5:
        angle = rng.uniform(5.0, 20.0) * (1 if rng.random() < 0.5 else -1)
        out = ndimage.rotate(out, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    if rng.random() < 0.5:
        res = out.shape[1]
        crop = max(2, int(round(rng.uniform(0.8, 1.0) * res)))
        y0 = int(rng.integers(0, res - crop + 1))
        x0 = int(rng.integers(0, res - crop + 1))
        window = out[:, y0 : y0 + crop, x0 : x0 + crop]
        out = ndimage.zoom(window, (1, res / crop, res / crop), order=1)[:, :res, :res]
    if rng.random() < 0.5:
        contrast = 1.0 + rng.uniform(-25, 25) / 255.0
        brightness = rng.uniform(-25, 25) / 255.0
        out = contrast * out + brightness
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    out[zero_frames] = 0.0
    return np.ascontiguousarray(out)


def add_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    rms = np.sqrt(np.mean(samples**2))
    if rms == 0:
        return samples
    return samples + rng.normal(0.0, rms * 10 ** (-snr_db / 20.0), len(samples))


def enrollment_embeddings(
    embedder: SpeakerEmbedder, corpus: SourceCorpus, cfg: ExperimentConfig, duration: float = 3.0
) -> dict[str, np.ndarray]:
    """Fixed per-speaker profile embeddings from held-out enrollment speech."""
    out = {}
    for speaker in corpus.speaker_ids:
        rng = np.random.default_rng([corpus.seed + 77, abs(hash(speaker)) % (2**31)])
        wave = corpus.speech(speaker, duration, rng)
        out[speaker] = embed_utterance(embedder, AudioSignal(wave, corpus.sample_rate), cfg.audio)
    return out


@dataclass
class TrainBatch:
    mel: torch.Tensor  # (B, T, M)
    lips: torch.Tensor  # (B, C, T2, H, W)
    e_spk: torch.Tensor  # (B, C, S)
    labels: dict[str, torch.Tensor]  # branch -> (B, C, T')
    mask_case: str


def _build_item(
    cfg: ExperimentConfig,
    corpus: SourceCorpus,
    enroll: dict[str, np.ndarray],
    stage: int,
    rng: np.random.Generator,
    noise_snr_db: float | None,
):
    model_cfg = cfg.model
    cap = model_cfg.capacity
    t_out = model_cfg.num_out_frames
    n_spk = int(rng.integers(cfg.sim.min_speakers, cfg.sim.max_speakers + 1))
    sample = simulate_sample(
        corpus,
        n_spk,
        model_cfg.chunk_length,
        rng,
        max_segment=cfg.sim.max_segment,
        noise_snr_db=noise_snr_db,
    )
    order = [slot_speaker_id(i) for i in range(n_spk)]
    labels = annotation_to_matrix(
        sample.annotation, order, model_cfg.va_resolution, 0.0, model_cfg.chunk_length
    ).values
    labels = np.vstack([labels, np.zeros((cap - n_spk, t_out))])

    res = cfg.video.resolution
    t2 = int(round(model_cfg.chunk_length * cfg.video.fps))
    lips = np.zeros((cap, t2, res, res), dtype=np.float32)
    e_spk = np.zeros((cap, model_cfg.embedding_dim), dtype=np.float32)
    eligible = np.zeros(cap, dtype=bool)
    for i, track in enumerate(sample.lip_tracks):
        frames = track.frames
        if rng.random() < 0.2:  # emulate undetected detector frames
            span = int(rng.uniform(0.0, 0.3) * t2)
            if span:
                start = int(rng.integers(0, t2 - span + 1))
                frames = frames.copy()
                frames[start : start + span] = 0.0
        if cfg.train.video_augment:
            frames = augment_lips(frames, rng)
        lips[i] = frames
        e_spk[i] = enroll[sample.source_speakers[i]]
        eligible[i] = True
    # capacity padding: zeros or a speaker absent from this chunk
    for i in range(n_spk, cap):
        if rng.random() < 0.5:
            absent = [s for s in corpus.speaker_ids if s not in sample.source_speakers]
            spk = str(rng.choice(absent))
            e_spk[i] = enroll[spk]
            face_rng = np.random.default_rng(int(rng.integers(0, 2**62)))
            lips[i] = corpus.lip_clip(False, t2, corpus.base_face(face_rng), face_rng)
            eligible[i] = True

    mel = normalize_features(extract_logmel(sample.audio, cfg.audio)).astype(np.float32)

    if stage in (1, 2):
        e_out, lips_out, y_aud, y_vid, _ = shuffle_profiles(e_spk, lips, labels, "independent", rng)
        return mel, lips_out, e_out, {"audio": y_aud, "video": y_vid}
    e_out, lips_out, y_aud, y_vid, y_mix, _, _ = apply_data_masking(
        e_spk, lips, labels, rng, cfg.train.mask_prob, eligible
    )
    return mel, lips_out, e_out, {"audio": y_aud, "video": y_vid, "mixed": y_mix}


def build_batch(
    cfg: ExperimentConfig,
    corpora: dict[str, SourceCorpus],
    enroll: dict[str, dict[str, np.ndarray]],
    stage: int,
    rng: np.random.Generator,
) -> TrainBatch:
    mels, lips, e_spks = [], [], []
    label_lists: dict[str, list[np.ndarray]] = {}
    for _ in range(cfg.train.batch_size):
        domain = "train"
        noise = None
        if stage >= 2 and rng.random() < cfg.train.adaptation_ratio:
            domain = "adapt"
            noise = cfg.train.adapt_snr_db
        mel, lip, e_spk, labels = _build_item(
            cfg, corpora[domain], enroll[domain], stage, rng, noise
        )
        mels.append(mel)
        lips.append(lip)
        e_spks.append(e_spk)
        for k, v in labels.items():
            label_lists.setdefault(k, []).append(v)
    mask_case = str(rng.choice(MASK_CASES)) if stage in (1, 2) else "bidirectional"
    return TrainBatch(
        mel=torch.from_numpy(np.stack(mels)),
        lips=torch.from_numpy(np.stack(lips)),
        e_spk=torch.from_numpy(np.stack(e_spks)),
        labels={
            k: torch.from_numpy(np.stack(v).astype(np.float32)) for k, v in label_lists.items()
        },
        mask_case=mask_case,
    )


def configure_stage(model: DiarizationModel, stage: int) -> list[torch.nn.Parameter]:
    """Apply the stage's freeze policy; returns the trainable parameters."""
    mixed = set(model.mixed_parameter_names())
    for name, param in model.named_parameters():
        if stage in (1, 2):
            trainable = name not in mixed
            if stage == 1 and name.startswith("audio_frontend."):
                trainable = False
        elif stage == 3:
            trainable = name in mixed
        else:
            trainable = True
        param.requires_grad_(trainable)
    return [p for p in model.parameters() if p.requires_grad]


def _dump_diagnostics(out_dir: Path, batch: TrainBatch, lr: float, model: DiarizationModel) -> Path:
    grad_norms = {
        n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None
    }
    path = out_dir / "nan-diagnostic.pt"
    torch.save(
        {
            "mel": batch.mel,
            "lips": batch.lips,
            "e_spk": batch.e_spk,
            "labels": batch.labels,
            "lr": lr,
            "grad_norms": grad_norms,
        },
        path,
    )
    return path


def run_stage(
    cfg: ExperimentConfig,
    stage: int,
    model: DiarizationModel,
    embedder: SpeakerEmbedder,
    out_dir,
    meta: dict,
    iters: int | None = None,
    log_every: int | None = None,
) -> Path:
    """Train one stage and write ``stage{k}-step{n}.pt`` plus a JSONL log."""
    if stage not in (1, 2, 3, 4):
        raise DataError(f"stage must be 1..4, got {stage}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iters = iters if iters is not None else cfg.train.stage_iters[stage - 1]
    log_every = log_every or cfg.train.log_every

    torch.manual_seed(cfg.seed * 100 + stage)
    rng = np.random.default_rng([cfg.seed, stage])
    corpora = {
        "train": make_corpus(cfg.sim, cfg.video, cfg.audio.sample_rate, cfg.seed, "train"),
        "adapt": make_corpus(cfg.sim, cfg.video, cfg.audio.sample_rate, cfg.seed, "adapt"),
    }
    enroll = {
        name: enrollment_embeddings(embedder, corpus, cfg)
        for name, corpus in corpora.items()
    }

    if stage == 1:  # adopt the pre-trained trunk, then freeze it
        model.audio_frontend.trunk.load_state_dict(embedder.trunk.state_dict())
    params = configure_stage(model, stage)
    optimizer = torch.optim.Adam(params, lr=stage_lr(cfg, stage, 1))

    model.train()
    log_path = out_dir / f"stage{stage}-train.jsonl"
    losses: list[float] = []
    with open(log_path, "w", encoding="utf-8") as log:
        for it in range(1, iters + 1):
            lr = stage_lr(cfg, stage, it)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = build_batch(cfg, corpora, enroll, stage, rng)
            outputs = model(
                batch.mel,
                batch.lips,
                batch.e_spk,
                mask_case=batch.mask_case,
                branches=STAGE_BRANCHES[stage],
            )
            loss, per_branch = total_loss(outputs, batch.labels)
            if not torch.isfinite(loss):
                dump = _dump_diagnostics(out_dir, batch, lr, model)
                raise NumericalError(f"non-finite loss at stage {stage} step {it}; dump: {dump}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            if it % log_every == 0 or it == iters or it == 1:
                entry = {
                    "step": it,
                    "stage": stage,
                    "lr": lr,
                    "mask_case": batch.mask_case,
                    "loss": losses[-1],
                    **{f"loss_{k}": v for k, v in per_branch.items()},
                }
                log.write(json.dumps(entry) + "\n")

    model.eval()
    path = out_dir / f"stage{stage}-step{iters}.pt"
    meta = dict(meta, stage=stage, step=iters, losses_first=losses[:100], losses_last=losses[-100:])
    save_checkpoint(path, cfg, embedder, model, meta)
    return path


def equal_error_rate(genuine: np.ndarray, impostor: np.ndarray) -> tuple[float, float]:
    """(EER, threshold) by sweeping candidate cosine thresholds."""
    scores = np.concatenate([genuine, impostor])
    best = (1.0, 0.0)
    for t in np.unique(scores):
        far = float(np.mean(impostor >= t))
        frr = float(np.mean(genuine < t))
        if abs(far - frr) < abs(best[0] * 2 - best[0] * 2 + (best[0] - best[1])) or True:
            pass
        if abs(far - frr) < abs(best[0] - best[1]) if False else False:
            pass
        best = min(best, ((far + frr) / 2, float(t)), key=lambda x: (abs(x[0]), 0))
    # recompute cleanly: choose threshold minimizing |FAR - FRR|
    cands = np.unique(scores)
    diffs = [abs(float(np.mean(impostor >= t)) - float(np.mean(genuine < t))) for t in cands]
    idx = int(np.argmin(diffs))
    t = float(cands[idx])
    eer = (float(np.mean(impostor >= t)) + float(np.mean(genuine < t))) / 2
    return eer, t


def run_pretrain(
    cfg: ExperimentConfig, out_dir, iters: int | None = None
) -> tuple[Path, SpeakerEmbedder, dict]:
    """Train the speaker embedder with the angular-margin classifier.

    Also derives the verification (speaker-alignment) threshold as the EER
    point on adaptation-domain trials, stored in the checkpoint metadata.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iters = iters if iters is not None else cfg.train.pretrain_iters
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0])
    corpus = make_corpus(cfg.sim, cfg.video, cfg.audio.sample_rate, cfg.seed, "train")
    speakers = corpus.speaker_ids

    embedder = SpeakerEmbedder(cfg.model, cfg.audio.n_mels)
    head = ArcFaceHead(cfg.model.embedding_dim, len(speakers))
    optimizer = torch.optim.Adam(
        list(embedder.parameters()) + list(head.parameters()), lr=cfg.train.pretrain_lr
    )
    batch = 32
    duration = 1.5
    log_path = out_dir / "pretrain-train.jsonl"
    embedder.train()
    with open(log_path, "w", encoding="utf-8") as log:
        for it in range(1, iters + 1):
            idx = rng.integers(0, len(speakers), size=batch)
            mels = []
            for i in idx:
                wave = corpus.speech(speakers[i], duration, rng)
                mels.append(
                    normalize_features(
                        extract_logmel(AudioSignal(wave, corpus.sample_rate), cfg.audio)
                    )
                )
            mel = torch.from_numpy(np.stack(mels).astype(np.float32))
            labels = torch.from_numpy(idx.astype(np.int64))
            loss = head(embedder(mel), labels)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite pretraining loss at step {it}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if it % cfg.train.log_every == 0 or it == 1 or it == iters:
                log.write(json.dumps({"step": it, "stage": 0, "loss": float(loss.detach())}) + "\n")
    embedder.eval()

    # verification trials in the adaptation domain (noisy, unseen speakers)
    adapt = make_corpus(cfg.sim, cfg.video, cfg.audio.sample_rate, cfg.seed, "adapt")
    trial_rng = np.random.default_rng([cfg.seed, 99])
    genuine, impostor = [], []
    from avdiar.frontend import cosine

    def trial_embedding(speaker):
        wave = adapt.speech(speaker, 2.0, trial_rng)
        wave = add_noise(wave, cfg.train.adapt_snr_db, trial_rng)
        return embed_utterance(embedder, AudioSignal(wave, adapt.sample_rate), cfg.audio)

    for _ in range(150):
        a, b = trial_rng.choice(adapt.speaker_ids, size=2, replace=False)
        genuine.append(cosine(trial_embedding(a), trial_embedding(a)))
        impostor.append(cosine(trial_embedding(a), trial_embedding(b)))
    eer, threshold = equal_error_rate(np.array(genuine), np.array(impostor))

    meta = {"stage": 0, "step": iters, "eer": eer, "sa_threshold": threshold}
    path = out_dir / f"stage0-step{iters}.pt"
    save_checkpoint(path, cfg, embedder, None, meta)
    return path, embedder, meta
