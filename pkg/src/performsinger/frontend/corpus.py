"""Utterance records, JSON-lines manifests and the deterministic synthetic corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import numerics
from ..config import AudioConfig, VideoConfig
from .audio import F0Contour, midi_to_hz
from .inventory import FINALS, INITIALS, INVENTORY, REST, check_pitch, lyrics_to_phonemes, pinyin_table


class CorpusError(ValueError):
    def __init__(self, message: str, utterance_id: str | None = None):
        self.utterance_id = utterance_id
        super().__init__(f"[{utterance_id}] {message}" if utterance_id else message)


@dataclass
class UtteranceRecord:
    id: str
    phonemes: list[str]
    pitches: list
    gt_durations: list[int]
    mel_path: str
    f0_path: str
    lip_path: str
    ref_mel_path: str
    speaker_id: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)


@dataclass
class Utterance:
    """An utterance with all of its features in memory."""

    id: str
    phonemes: list[str]
    pitches: list
    durations: np.ndarray
    mel: np.ndarray
    f0: F0Contour
    lips: np.ndarray
    ref_mel: np.ndarray
    speaker_id: str

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    def validate(self) -> "Utterance":
        uid = self.id
        if not self.phonemes:
            raise CorpusError("empty phoneme sequence", uid)
        for p in self.phonemes:
            if p not in INVENTORY.symbols:
                raise CorpusError(f"unknown phoneme {p!r}", uid)
        if len(self.pitches) != len(self.phonemes):
            raise CorpusError("pitch and phoneme sequences differ in length", uid)
        for p in self.pitches:
            try:
                check_pitch(p)
            except ValueError as exc:
                raise CorpusError(str(exc), uid) from None
        if len(self.durations) != len(self.phonemes) or np.any(np.asarray(self.durations) < 0):
            raise CorpusError("durations must be one non-negative count per phoneme", uid)
        if self.mel.ndim != 2 or self.mel.shape[1] != 80 or self.mel.shape[0] < 1:
            raise CorpusError(f"mel must be frames x 80, got {self.mel.shape}", uid)
        if not np.isfinite(self.mel).all():
            raise CorpusError("mel contains non-finite values", uid)
        if int(np.sum(self.durations)) != self.mel.shape[0]:
            raise CorpusError(f"sum(gt_durations)={int(np.sum(self.durations))} != mel frames {self.mel.shape[0]}", uid)
        if len(self.f0) != self.mel.shape[0]:
            raise CorpusError("F0 contour length differs from mel frame count", uid)
        if self.lips.ndim != 3 or self.lips.shape[0] < 1:
            raise CorpusError(f"lip frames must be m x h x w, got {self.lips.shape}", uid)
        if self.lips.min() < 0 or self.lips.max() > 1:
            raise CorpusError("lip frames must lie in [0, 1]", uid)
        if self.ref_mel.ndim != 2 or self.ref_mel.shape[1] != 80:
            raise CorpusError("reference mel must be frames x 80", uid)
        return self


# ------------------------------------------------------------- manifest I/O


def write_corpus(utterances: list[Utterance], out_dir: str | Path) -> list[UtteranceRecord]:
    """Write TNSR features plus ``manifest.jsonl``; returns the records."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    records = []
    for utt in utterances:
        utt.validate()
        rec = UtteranceRecord(
            id=utt.id,
            phonemes=list(utt.phonemes),
            pitches=list(utt.pitches),
            gt_durations=[int(d) for d in utt.durations],
            mel_path=f"feats/{utt.id}.mel.tnsr",
            f0_path=f"feats/{utt.id}.f0.tnsr",
            lip_path=f"feats/{utt.id}.lip.tnsr",
            ref_mel_path=f"feats/{utt.id}.ref.tnsr",
            speaker_id=str(utt.speaker_id),
        )
        numerics.save_tensor(out / rec.mel_path, utt.mel)
        numerics.save_tensor(out / rec.f0_path, utt.f0.to_array())
        numerics.save_tensor(out / rec.lip_path, utt.lips)
        numerics.save_tensor(out / rec.ref_mel_path, utt.ref_mel)
        records.append(rec)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return records


def read_manifest(path: str | Path) -> list[UtteranceRecord]:
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(UtteranceRecord(**json.loads(line)))
        except (TypeError, json.JSONDecodeError) as exc:
            raise CorpusError(f"{path}:{n}: bad manifest line ({exc})") from None
    return records


def load_utterance(record: UtteranceRecord, root: str | Path) -> Utterance:
    root = Path(root)
    try:
        mel = numerics.load_tensor(root / record.mel_path).numpy()
        f0 = F0Contour.from_array(numerics.load_tensor(root / record.f0_path).numpy())
        lips = numerics.load_tensor(root / record.lip_path).numpy()
        ref = numerics.load_tensor(root / record.ref_mel_path).numpy()
    except (OSError, ValueError) as exc:
        raise CorpusError(f"cannot read features: {exc}", record.id) from None
    utt = Utterance(
        id=record.id,
        phonemes=list(record.phonemes),
        pitches=list(record.pitches),
        durations=np.asarray(record.gt_durations, dtype=np.int64),
        mel=mel,
        f0=f0,
        lips=lips,
        ref_mel=ref,
        speaker_id=record.speaker_id,
    )
    return utt.validate()


def load_corpus(manifest: str | Path) -> list[Utterance]:
    manifest = Path(manifest)
    return [load_utterance(r, manifest.parent) for r in read_manifest(manifest)]


def inventory_stats(utterances) -> dict:
    initials, finals, pitches = {}, {}, []
    frames = 0
    for utt in utterances:
        frames += int(np.sum(utt.durations))
        for p, m in zip(utt.phonemes, utt.pitches):
            if p in INITIALS:
                initials[p] = initials.get(p, 0) + 1
            elif p in FINALS:
                finals[p] = finals.get(p, 0) + 1
            if m != REST:
                pitches.append(int(m))
    return {
        "utterances": len(utterances),
        "frames": frames,
        "initials_covered": len(initials),
        "initials_total": len(INITIALS),
        "finals_covered": len(finals),
        "finals_total": len(FINALS),
        "most_frequent_initial": max(initials, key=initials.get) if initials else None,
        "most_frequent_final": max(finals, key=finals.get) if finals else None,
        "pitch_min": min(pitches) if pitches else None,
        "pitch_max": max(pitches) if pitches else None,
    }


# --------------------------------------------------------- synthetic corpus

_OPEN = {"a", "ai", "an", "ang", "ao", "ia", "ian", "iang", "iao", "ua", "uai", "uan", "uang"}
_MID = {"e", "ei", "en", "eng", "er", "ie", "ve", "o", "ou", "uo"}
_ROUNDED = {"u", "o", "ou", "uo", "ong", "iong", "v", "vn", "ve", "van", "iu", "ui", "un"}


def lip_shape(symbol: str) -> tuple[float, float]:
    """(aperture, width) in [0, 1] for a phoneme class."""
    if symbol in ("SIL", "BR", "SEP"):
        return 0.05, 0.7
    if symbol in ("b", "p", "m"):
        return 0.05, 0.75
    if symbol == "f":
        return 0.2, 0.8
    if symbol in INITIALS:
        return 0.35, 0.85
    width = 0.5 if symbol in _ROUNDED else 0.9
    if symbol in _OPEN:
        return 0.9, width
    if symbol in _MID:
        return 0.6, width
    return 0.35, width


def render_lip(aperture: float, width: float, size: int = 48) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size * 0.55, size * 0.5
    b = size * (0.04 + 0.25 * aperture)
    a = size * (0.17 + 0.2 * width)
    r = np.sqrt(((x - cx) / a) ** 2 + ((y - cy) / b) ** 2)
    inside = 1.0 / (1.0 + np.exp(-8.0 * (1.0 - r)))
    return 0.8 - 0.7 * inside


def _phoneme_spectrum(symbol: str) -> np.ndarray:
    """Fixed log-energy envelope over 80 bands for one phoneme."""
    bands = np.arange(80, dtype=np.float64)
    rng = np.random.default_rng(1000 + INVENTORY.id(symbol))
    env = np.full(80, -7.0)
    if symbol in ("SIL", "BR", "SEP"):
        return env - 2.0 + (0.8 * np.exp(-((bands - 60) ** 2) / 200.0) if symbol == "BR" else 0.0)
    if not INVENTORY.is_voiced(symbol):
        center = rng.uniform(45, 70)
        return env + 2.5 * np.exp(-((bands - center) ** 2) / (2 * rng.uniform(6, 12) ** 2))
    centers = (rng.uniform(6, 20), rng.uniform(20, 42), rng.uniform(42, 62))
    for c, amp, w in zip(centers, (3.0, 2.2, 1.4), (3.0, 4.0, 5.0)):
        env = env + amp * np.exp(-((bands - c) ** 2) / (2 * (w * rng.uniform(0.8, 1.2)) ** 2))
    return env


def _mel_band_of(hz: float, cfg: AudioConfig) -> float:
    top = 2595.0 * np.log10(1.0 + cfg.fmax / 700.0)
    return 2595.0 * np.log10(1.0 + hz / 700.0) / top * (cfg.n_mels + 1) - 1.0


def speaker_tilt(speaker: int, n_speakers: int) -> np.ndarray:
    slope = -1.2 + 2.4 * speaker / max(n_speakers - 1, 1)
    return slope * (np.arange(80) / 79.0 - 0.5) * 2.0


def render_mel(phonemes, pitches, durations, speaker: int, n_speakers: int, rng, cfg: AudioConfig) -> np.ndarray:
    """Formant model: band energies from (phoneme, note pitch) plus speaker tilt and noise."""
    bands = np.arange(80, dtype=np.float64)
    rows = []
    for sym, pitch, dur in zip(phonemes, pitches, durations):
        env = _phoneme_spectrum(sym)
        if INVENTORY.is_voiced(sym) and pitch != REST:
            hz = float(midi_to_hz(pitch))
            for k in range(1, 5):
                env = env + (1.2 / k) * np.exp(-((bands - _mel_band_of(k * hz, cfg)) ** 2) / 4.5)
        rows.append(np.repeat(env[None, :], int(dur), axis=0))
    mel = np.concatenate(rows, axis=0)
    if len(mel) > 2:
        mel = np.concatenate([mel[:1], 0.25 * mel[:-2] + 0.5 * mel[1:-1] + 0.25 * mel[2:], mel[-1:]])
    mel = mel + speaker_tilt(speaker, n_speakers)[None, :]
    return mel + 0.05 * rng.standard_normal(mel.shape)


def _sample_phonemes(rng, count: int):
    syllables = sorted(pinyin_table())
    phonemes, pitches = [], []
    while len(phonemes) < count:
        syl = syllables[rng.integers(len(syllables))]
        symbols, _ = lyrics_to_phonemes([syl])
        note = int(rng.integers(50, 63))
        phonemes += symbols
        pitches += [note] * len(symbols)
    return phonemes[:count], pitches[:count]


def gen_synthetic_corpus(
    seed: int,
    n_utterances: int,
    n_speakers: int = 2,
    audio: AudioConfig | None = None,
    video: VideoConfig | None = None,
) -> list[Utterance]:
    """Deterministic toy corpus; utterance ``i`` draws from the stream (seed, i)."""
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    if n_speakers < 1:
        raise ValueError("n_speakers must be >= 1")
    audio = audio or AudioConfig()
    video = video or VideoConfig()
    frame_sec = audio.hop / audio.sample_rate
    out = []
    for i in range(n_utterances):
        rng = np.random.default_rng([seed, i])
        speaker = i % n_speakers
        phonemes, pitches = _sample_phonemes(rng, int(rng.integers(4, 13)))
        durations = rng.integers(4, 25, size=len(phonemes))
        mel = render_mel(phonemes, pitches, durations, speaker, n_speakers, rng, audio)
        n_frames = mel.shape[0]

        t = np.arange(n_frames) * frame_sec
        notes = np.repeat(midi_to_hz(pitches), durations)
        voiced = np.repeat([INVENTORY.is_voiced(p) for p in phonemes], durations)
        f0 = np.where(voiced, notes + 5.0 * np.sin(2 * np.pi * 6.0 * t), 0.0)

        owner = np.repeat(np.arange(len(phonemes)), durations)
        m = max(1, int(round(n_frames * frame_sec * video.fps)))
        lips = np.empty((m, video.size, video.size))
        shapes = [lip_shape(p) for p in phonemes]
        for j in range(m):
            frame = min(n_frames - 1, int((j + 0.5) / video.fps / frame_sec))
            lips[j] = render_lip(*shapes[owner[frame]], size=video.size)
        lips = np.clip(lips + 0.01 * rng.standard_normal(lips.shape), 0.0, 1.0)

        ref_rng = np.random.default_rng([seed, i, 1])
        ref_ph, ref_pitch = _sample_phonemes(ref_rng, int(ref_rng.integers(6, 11)))
        ref_dur = ref_rng.integers(6, 20, size=len(ref_ph))
        ref_mel = render_mel(ref_ph, ref_pitch, ref_dur, speaker, n_speakers, ref_rng, audio)

        out.append(
            Utterance(
                id=f"syn{seed:04d}_{i:05d}",
                phonemes=phonemes,
                pitches=pitches,
                durations=durations.astype(np.int64),
                mel=mel,
                f0=F0Contour(f0, voiced),
                lips=lips,
                ref_mel=ref_mel,
                speaker_id=f"spk{speaker}",
            ).validate()
        )
    return out


def sync_frame_budget(n_video_frames: int, audio: AudioConfig | None = None, fps: float = 25.0) -> int:
    """Mel frames spanned by a video of ``n_video_frames`` at ``fps``."""
    audio = audio or AudioConfig()
    return int(round(n_video_frames / fps * audio.sample_rate / audio.hop))
