"""Real-data ingestion: wav + TextGrid + lip frames -> validated utterances."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..config import AudioConfig
from .audio import F0Contour, extract_f0, extract_mel, hz_to_midi, read_wav
from .corpus import CorpusError, Utterance
from .inventory import MIDI_MAX, MIDI_MIN, REST, SPECIALS, PinyinError, lyrics_to_phonemes
from .textgrid import TextGridError, nesting_violations, parse_textgrid, tier_to_frames

# labels aligners commonly emit for non-lyric spans
SILENCE_LABELS = {"", "sil", "sp", "SP", "<SP>", "SIL", "pau"}
BREATH_LABELS = {"AP", "<AP>", "br", "BR", "breath"}


def normalize_label(label: str) -> str:
    label = label.strip()
    if label in SILENCE_LABELS:
        return "SIL"
    if label in BREATH_LABELS:
        return "BR"
    return label.lower()


def phone_notes(f0: F0Contour, durations) -> list:
    """Per-phone MIDI note from the mean voiced F0 inside each phone (REST if unvoiced)."""
    notes, start = [], 0
    for d in durations:
        seg = slice(start, start + int(d))
        start += int(d)
        voiced = f0.f0_hz[seg][f0.uv[seg]]
        if voiced.size == 0:
            notes.append(REST)
            continue
        midi = int(np.clip(round(float(hz_to_midi(voiced.mean()))), MIDI_MIN, MIDI_MAX))
        notes.append(midi)
    return notes


def prepare_utterance(
    uid: str,
    wav_path: Path,
    textgrid_path: Path,
    lip_path: Path,
    ref_wav_path: Path | None = None,
    speaker_id: str = "0",
    audio: AudioConfig | None = None,
) -> Utterance:
    audio = audio or AudioConfig()
    try:
        samples = read_wav(wav_path, audio.sample_rate)
        grid = parse_textgrid(Path(textgrid_path).read_bytes())
    except (OSError, ValueError) as exc:
        raise CorpusError(str(exc), uid) from None
    try:
        words, phones = grid.tier("words"), grid.tier("phones")
    except KeyError as exc:
        raise CorpusError(f"TextGrid lacks tier {exc}", uid) from None
    if bad := nesting_violations(words, phones):
        raise CorpusError(f"phone intervals {bad} cross word boundaries", uid)

    lyric = [normalize_label(iv.label) for iv in words.intervals]
    try:
        expected, _ = lyrics_to_phonemes(lyric)
    except PinyinError as exc:
        raise CorpusError(str(exc), uid) from None
    observed = [normalize_label(iv.label) for iv in phones.intervals]
    if observed != expected:
        raise CorpusError(f"phone tier {observed} does not match lyric phonemes {expected}", uid)

    mel = extract_mel(samples, audio)
    f0 = extract_f0(samples, audio)
    durations = np.asarray(tier_to_frames(phones, mel.shape[0]), dtype=np.int64)
    try:
        lips = np.load(lip_path).astype(np.float64)
    except (OSError, ValueError) as exc:
        raise CorpusError(f"cannot read lip frames: {exc}", uid) from None
    ref_mel = extract_mel(read_wav(ref_wav_path, audio.sample_rate), audio) if ref_wav_path else mel.copy()
    pitches = [REST if p in SPECIALS else n for p, n in zip(expected, phone_notes(f0, durations))]
    return Utterance(uid, expected, pitches, durations, mel, f0, lips, ref_mel, speaker_id).validate()


def prepare_directory(
    wav_dir: str | Path,
    textgrid_dir: str | Path,
    lip_dir: str | Path,
    ref_dir: str | Path | None = None,
    audio: AudioConfig | None = None,
) -> tuple[list[Utterance], list[CorpusError]]:
    """Pair ``<id>.wav``, ``<id>.TextGrid`` and ``<id>.npy``; speaker id is the prefix before ``_``."""
    wav_dir, textgrid_dir, lip_dir = Path(wav_dir), Path(textgrid_dir), Path(lip_dir)
    utts, errors = [], []
    for wav in sorted(wav_dir.glob("*.wav")):
        uid = wav.stem
        tg, lip = textgrid_dir / f"{uid}.TextGrid", lip_dir / f"{uid}.npy"
        missing = [str(p) for p in (tg, lip) if not p.exists()]
        if missing:
            errors.append(CorpusError(f"missing {', '.join(missing)}", uid))
            continue
        ref = Path(ref_dir) / f"{uid}.wav" if ref_dir else None
        try:
            utts.append(prepare_utterance(uid, wav, tg, lip, ref if ref and ref.exists() else None, uid.split("_")[0], audio))
        except (CorpusError, TextGridError) as exc:
            errors.append(exc if isinstance(exc, CorpusError) else CorpusError(str(exc), uid))
    return utts, errors
