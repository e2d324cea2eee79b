"""The end-to-end singer: encoders -> fusion -> predictors -> diffusion decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .config import RunConfig
from .decoder import MelDecoder
from .encoders import PhonemeEncoder, PitchEncoder, SpeakerEncoder, VisualEncoder, combine_content, pitch_ids
from .frontend.audio import F0Contour, midi_to_hz
from .frontend.corpus import Utterance, sync_frame_budget
from .frontend.inventory import INVENTORY, REST
from .frontend.textgrid import largest_remainder
from .vcfm import VCFM
from .predictors import (
    DurationPredictor,
    PitchPredictor,
    StyleExtractor,
    durations_from_log,
    f0_stats,
    f0_to_target,
    length_regulate,
    target_to_f0,
)

MODULE_GROUPS = (
    "phoneme_encoder",
    "pitch_encoder",
    "speaker_encoder",
    "visual_encoder",
    "vcfm",
    "duration",
    "pitch",
    "style",
    "f0_embed",
    "decoder",
)


class MissingInputError(ValueError):
    pass


@dataclass
class Item:
    """Model-ready tensors for one utterance (batch dimension 1)."""

    id: str
    phoneme_ids: torch.Tensor
    pitch_ids: torch.Tensor
    pitches: list
    lips: torch.Tensor
    ref_mel: torch.Tensor
    durations: torch.Tensor | None = None
    mel: torch.Tensor | None = None
    f0: F0Contour | None = None


def make_item(utt: Utterance, with_targets: bool = True) -> Item:
    item = Item(
        id=utt.id,
        phoneme_ids=torch.tensor([INVENTORY.encode(utt.phonemes)], dtype=torch.long),
        pitch_ids=pitch_ids(utt.pitches)[None],
        pitches=list(utt.pitches),
        lips=torch.as_tensor(utt.lips, dtype=nx.DTYPE)[None],
        ref_mel=torch.as_tensor(utt.ref_mel, dtype=nx.DTYPE)[None],
    )
    if with_targets:
        item.durations = torch.as_tensor(np.asarray(utt.durations), dtype=torch.long)
        item.mel = torch.as_tensor(utt.mel, dtype=nx.DTYPE)[None]
        item.f0 = utt.f0
    return item


def note_track(pitches, durations) -> np.ndarray:
    """Frame-level log note frequency (NaN on REST)."""
    per_phone = np.array([np.nan if p == REST else np.log(midi_to_hz(p)) for p in pitches])
    return np.repeat(per_phone, np.asarray(durations, dtype=np.int64))


class PerformSinger(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.model.hidden
        self.phoneme_encoder = PhonemeEncoder(cfg)
        self.pitch_encoder = PitchEncoder(cfg)
        self.speaker_encoder = SpeakerEncoder(cfg)
        self.visual_encoder = VisualEncoder(cfg)
        self.vcfm = VCFM(h, cfg.vcfm.blocks, cfg.vcfm.heads, cfg.vcfm.zero_init)
        self.duration = DurationPredictor(h, cfg.dur.kernel, cfg.dur.dropout)
        self.pitch = PitchPredictor(cfg)
        self.style = StyleExtractor(cfg)
        self.f0_embed = nn.Linear(2, h)
        self.decoder = MelDecoder(cfg)
        self.vcfm_active = False
        self.visual_frozen = False
        self.to(nx.DTYPE)

    # ---------------------------------------------------------------- blocks

    def visual_features(self, item: Item, cache: dict | None = None) -> torch.Tensor:
        if self.visual_frozen:
            if cache is not None and item.id in cache:
                return cache[item.id]
            was = self.visual_encoder.training
            self.visual_encoder.eval()
            with torch.no_grad():
                vf = self.visual_encoder(item.lips)
            self.visual_encoder.train(was)
            if cache is not None:
                cache[item.id] = vf
            return vf
        return self.visual_encoder(item.lips)

    def content(self, item: Item, cache: dict | None = None) -> torch.Tensor:
        tf = self.phoneme_encoder(item.phoneme_ids)
        pf = self.pitch_encoder(item.pitch_ids)
        cf = combine_content(tf, pf)
        if self.vcfm_active:
            if item.lips is None:
                raise MissingInputError("lip frames are required when fusion is active")
            cf = self.vcfm(cf, self.visual_features(item, cache))
        return cf

    def frames(self, cf: torch.Tensor, durations, sf: torch.Tensor) -> torch.Tensor:
        x = length_regulate(cf, durations)
        return x + sf[:, None, :] + nx.sinusoid_table(x.shape[1], x.shape[2])[None]

    def f0_condition(self, f0_std: torch.Tensor, voiced: torch.Tensor) -> torch.Tensor:
        feats = torch.stack([f0_std, voiced.to(nx.DTYPE)], dim=-1)
        out = self.f0_embed(feats)
        return out if self.cfg.decoder.f0_condition else out * 0.0

    # -------------------------------------------------------------- training

    def speaker_batch(self, items: list[Item], crop: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Speaker vectors for several items from equal-length reference crops, in one RNN call."""
        lengths = [it.ref_mel.shape[1] for it in items]
        crop = min(lengths) if crop <= 0 else min(crop, *lengths)
        clips = []
        for it, n in zip(items, lengths):
            start = int(torch.randint(0, n - crop + 1, (1,), generator=generator)) if n > crop else 0
            clips.append(it.ref_mel[:, start : start + crop])
        return self.speaker_encoder(torch.cat(clips))

    def losses(self, item: Item, t_pitch: int, noise_pitch, t_mel: int, noise_mel, cache=None, sf=None) -> dict:
        """Teacher-forced loss parts L_R, L_D, L_P, L_C for one utterance."""
        cf = self.content(item, cache)
        log_dur = self.duration(cf)[0, :, 0]
        loss_d = nx.mse(log_dur, torch.log(item.durations.to(nx.DTYPE)))

        if sf is None:
            sf = self.speaker_encoder(item.ref_mel)
        frames = self.frames(cf, item.durations, sf)

        mu, sigma = f0_stats(note_track(item.pitches, item.durations.numpy()), self.cfg.pitch.std_floor)
        target = torch.as_tensor(f0_to_target(item.f0.f0_hz, item.f0.uv, mu, sigma), dtype=nx.DTYPE)[None]
        uv = torch.as_tensor(item.f0.uv, dtype=nx.DTYPE)[None]
        noise_loss, uv_loss = self.pitch.train_loss(frames, target, uv, t_pitch, noise_pitch)

        cond = frames + self.f0_condition(target, uv)
        loss_c = torch.zeros((), dtype=nx.DTYPE)
        if self.cfg.style.enabled:
            style, _, loss_c = self.style(item.ref_mel, frames)
            cond = cond + style
        loss_r = self.decoder.train_loss(item.mel, cond, sf, t_mel, noise_mel)
        return {"L_R": loss_r, "L_D": loss_d, "L_P": noise_loss + uv_loss, "L_C": loss_c}

    # ------------------------------------------------------------- inference

    @torch.no_grad()
    def infer(self, item: Item, seed: int = 0, sync_scale: bool = False, fps: float | None = None) -> dict:
        """Duration-free synthesis. Returns durations, log-mel (F, 80) and F0."""
        for name in ("phoneme_ids", "pitch_ids", "lips", "ref_mel"):
            if getattr(item, name) is None:
                raise MissingInputError(f"missing required input: {name}")
        cf = self.content(item)
        durations = durations_from_log(self.duration(cf)[0, :, 0])
        if sync_scale:
            budget = sync_frame_budget(item.lips.shape[1], self.cfg.audio, fps or self.cfg.video.fps)
            durations = torch.tensor(largest_remainder(durations.tolist(), budget), dtype=torch.long)
        sf = self.speaker_encoder(item.ref_mel)
        frames = self.frames(cf, durations, sf)

        mu, sigma = f0_stats(note_track(item.pitches, durations.numpy()), self.cfg.pitch.std_floor)
        f0_std, voiced = self.pitch.sample(frames, seed)
        cond = frames + self.f0_condition(f0_std, voiced)
        if self.cfg.style.enabled:
            style, _, _ = self.style(item.ref_mel, frames)
            cond = cond + style
        mel = self.decoder.decode(cond, sf, seed + 1)[0]

        v = voiced[0].numpy()
        f0 = np.where(v, target_to_f0(f0_std[0].numpy(), mu, sigma), 0.0)
        return {"durations": durations, "mel": mel, "f0": F0Contour(f0, v), "speaker": sf[0]}

    def group_parameters(self, group: str):
        return getattr(self, group).parameters()
