import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from performsinger.config import AudioConfig
from performsinger.frontend import audio
from performsinger.frontend.audio import F0Contour, extract_f0, extract_mel, hz_to_midi, midi_to_hz
from performsinger.frontend.corpus import (
    CorpusError,
    gen_synthetic_corpus,
    inventory_stats,
    load_corpus,
    sync_frame_budget,
    write_corpus,
)
from performsinger.frontend.inventory import (
    FINALS,
    INITIALS,
    INVENTORY,
    PinyinError,
    lyrics_to_phonemes,
    pinyin_table,
    pinyin_to_phonemes,
)
from performsinger.frontend.textgrid import (
    Interval,
    IntervalTier,
    TextGrid,
    TextGridError,
    largest_remainder,
    nesting_violations,
    parse_textgrid,
    serialize_textgrid,
    tier_to_frames,
)

# Hand-compiled from the standard Mandarin initial/final chart (zero-initial
# syllables spelled with y/w map onto i/u/ü-row finals).
PINYIN_FIXTURE = {
    "zhong": ("zh", "ong"),
    "a": (None, "a"),
    "ba": ("b", "a"),
    "pian": ("p", "ian"),
    "ming": ("m", "ing"),
    "feng": ("f", "eng"),
    "dui": ("d", "ui"),
    "tuo": ("t", "uo"),
    "nv": ("n", "v"),
    "lve": ("l", "ve"),
    "gua": ("g", "ua"),
    "kuai": ("k", "uai"),
    "huang": ("h", "uang"),
    "jiong": ("j", "iong"),
    "qu": ("q", "v"),
    "xue": ("x", "ve"),
    "juan": ("j", "van"),
    "qun": ("q", "vn"),
    "chi": ("ch", "i"),
    "shou": ("sh", "ou"),
    "ren": ("r", "en"),
    "zai": ("z", "ai"),
    "cao": ("c", "ao"),
    "si": ("s", "i"),
    "er": (None, "er"),
    "yi": (None, "i"),
    "ya": (None, "ia"),
    "you": (None, "iu"),
    "yuan": (None, "van"),
    "wo": (None, "uo"),
    "wei": (None, "ui"),
    "wen": (None, "un"),
    "ou": (None, "ou"),
    "liu": ("l", "iu"),
    "niang": ("n", "iang"),
}


# ----------------------------------------------------------------- inventory


def test_inventory_sizes_and_ids():
    assert len(INITIALS) == 21 and len(set(INITIALS)) == 21
    assert len(FINALS) == 35 and len(set(FINALS)) == 35
    assert "ueng" not in FINALS
    ids = [INVENTORY.id(s) for s in INVENTORY.symbols[1:]]
    assert 0 not in ids and len(set(ids)) == len(ids)
    assert INVENTORY.decode(INVENTORY.encode(["zh", "ong", "SIL"])) == ["zh", "ong", "SIL"]


@pytest.mark.parametrize("syllable,expected", sorted(PINYIN_FIXTURE.items()))
def test_pinyin_matches_fixture(syllable, expected):
    assert pinyin_to_phonemes(syllable) == expected


def test_pinyin_table_image_is_full_inventory():
    table = pinyin_table()
    initials = {i for i, _ in table.values() if i is not None}
    finals = {f for _, f in table.values()}
    assert initials == set(INITIALS)
    assert finals == set(FINALS)
    for ini, fin in table.values():
        assert fin in INVENTORY.symbols and (ini is None or ini in INVENTORY.symbols)


def test_pinyin_error_lists_neighbours():
    with pytest.raises(PinyinError, match="zhong"):
        pinyin_to_phonemes("zhongg")


def test_lyrics_to_phonemes_owner_index():
    symbols, owner = lyrics_to_phonemes(["wo", "ai", "SIL", "ni"])
    assert symbols == ["uo", "ai", "SIL", "n", "i"]
    assert owner == [0, 1, 2, 3, 3]


# ------------------------------------------------------------------ textgrid

LONG = '''File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 1.5
tiers? <exists>
size = 2
item []:
    item [1]:
        class = "IntervalTier"
        name = "words"
        xmin = 0
        xmax = 1.5
        intervals: size = 2
        intervals [1]:
            xmin = 0
            xmax = 0.6
            text = "zhong"
        intervals [2]:
            xmin = 0.6
            xmax = 1.5
            text = ""
    item [2]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 1.5
        intervals: size = 3
        intervals [1]:
            xmin = 0
            xmax = 0.2
            text = "zh"
        intervals [2]:
            xmin = 0.2
            xmax = 0.6
            text = "ong"
        intervals [3]:
            xmin = 0.6
            xmax = 1.5
            text = ""
'''


def test_parse_long_format_and_nesting():
    grid = parse_textgrid(LONG)
    assert [t.name for t in grid.tiers] == ["words", "phones"]
    assert grid.tier("phones").intervals[1] == Interval(0.2, 0.6, "ong")
    assert grid.tier("words").intervals[1].label == ""
    assert nesting_violations(grid.tier("words"), grid.tier("phones"), 1e-6) == []


def independent_overlap_scan(parent, child, tol):
    """Second opinion on nesting: a child straddles if any parent boundary lies strictly inside it."""
    bounds = sorted({iv.xmin for iv in parent.intervals} | {iv.xmax for iv in parent.intervals})
    return [k for k, iv in enumerate(child.intervals, 1) if any(iv.xmin + tol < b < iv.xmax - tol for b in bounds)]


def test_nesting_detects_straddling_phone():
    words = IntervalTier("words", 0, 1, [Interval(0, 0.5, "a"), Interval(0.5, 1, "ba")])
    phones = IntervalTier("phones", 0, 1, [Interval(0, 0.4, "a"), Interval(0.4, 0.7, "b"), Interval(0.7, 1, "a")])
    assert nesting_violations(words, phones) == [2] == independent_overlap_scan(words, phones, 1e-6)


def test_single_interval_roundtrip():
    grid = TextGrid(0.0, 1.5, [IntervalTier("t", 0.0, 1.5, [Interval(0.0, 1.5, "a")])])
    for short in (False, True):
        again = parse_textgrid(serialize_textgrid(grid, short=short))
        assert again == grid
        assert parse_textgrid(serialize_textgrid(again, short=short)) == grid


def test_utf16_input():
    grid = parse_textgrid(LONG.encode("utf-16"))
    assert grid.tier("words").intervals[0].label == "zhong"


def test_inverted_interval_names_index():
    bad = LONG.replace("            xmin = 0.2\n            xmax = 0.6", "            xmin = 0.2\n            xmax = 0.1")
    with pytest.raises(TextGridError, match="interval 2"):
        parse_textgrid(bad)


def test_truncated_file_reports_line():
    with pytest.raises(TextGridError, match="line"):
        parse_textgrid(LONG[: len(LONG) // 2])


labels = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=6)


@st.composite
def grids(draw):
    n_tiers = draw(st.integers(1, 3))
    end = draw(st.floats(0.5, 100, allow_nan=False))
    tiers = []
    for k in range(n_tiers):
        cuts = sorted(set(draw(st.lists(st.floats(0.001, end - 0.001), max_size=6))))
        bounds = [0.0] + cuts + [end]
        ivs = [Interval(a, b, draw(labels)) for a, b in zip(bounds, bounds[1:]) if b > a]
        tiers.append(IntervalTier(f"tier{k}", 0.0, end, ivs))
    return TextGrid(0.0, end, tiers)


@settings(max_examples=60, deadline=None)
@given(grids(), st.booleans())
def test_textgrid_roundtrip_property(grid, short):
    assert parse_textgrid(serialize_textgrid(grid, short=short)) == grid


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=20), st.integers(0, 500))
def test_largest_remainder_sums_exactly(weights, total):
    counts = largest_remainder(weights, total)
    assert sum(counts) == total and all(c >= 0 for c in counts)
    exact = np.array(weights) * total / sum(weights)
    assert np.all(np.abs(np.array(counts) - exact) < 1.0 + 1e-9)


def test_tier_to_frames():
    tier = IntervalTier("p", 0, 1, [Interval(0, 0.25, "a"), Interval(0.25, 1.0, "b")])
    assert tier_to_frames(tier, 10) == [3, 7]  # tie on remainders goes to the earlier interval
    assert sum(tier_to_frames(tier, 187)) == 187


# --------------------------------------------------------------------- audio


def test_silence_floor():
    mel = extract_mel(np.zeros(4096))
    assert np.all(mel == np.log(1e-5))


def test_frame_count_formula():
    assert extract_mel(np.zeros(1024 + 256 * 9)).shape == (10, 80)


@settings(max_examples=20, deadline=None)
@given(st.integers(1024, 20000))
def test_frame_count_is_pure_function_of_length(n):
    assert extract_mel(np.zeros(n)).shape[0] == 1 + (n - 1024) // 256


def test_too_short_raises():
    with pytest.raises(audio.AudioError):
        extract_mel(np.zeros(100))


def test_440_band():
    sr = 48000
    t = np.arange(sr // 2) / sr
    mel = extract_mel(np.sin(2 * np.pi * 440.0 * t))
    # independent band edges: HTK mel formula, 82 equally spaced points 0..24 kHz
    mel_pts = np.linspace(0, 2595 * np.log10(1 + 24000 / 700), 82)
    hz_pts = 700 * (10 ** (mel_pts / 2595) - 1)
    centers = hz_pts[1:-1]
    expected = int(np.argmin(np.abs(centers - 440.0)))
    assert np.bincount(mel.argmax(axis=1)).argmax() == expected


def test_f0_on_220_sine():
    sr = 48000
    t = np.arange(sr) / sr
    f0 = extract_f0(np.sin(2 * np.pi * 220.0 * t))
    assert f0.uv.all()
    assert abs(np.median(f0.f0_hz) - 220.0) <= 2.0


def test_f0_noise_mostly_unvoiced_and_silence():
    noise = 0.01 * np.random.default_rng(0).standard_normal(48000)
    assert np.mean(~extract_f0(noise).uv) >= 0.9
    silent = extract_f0(np.zeros(48000))
    assert not silent.uv.any() and np.all(silent.f0_hz == 0)


@given(st.floats(36, 79))
def test_midi_hz_roundtrip(x):
    assert abs(float(hz_to_midi(midi_to_hz(x))) - x) < 1e-9


def test_f0contour_invariant():
    with pytest.raises(audio.AudioError):
        F0Contour([100.0, 0.0], [True, True])


def test_wav_roundtrip(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 100, 4800))
    audio.write_wav(tmp_path / "a.wav", x, pcm16=False)
    assert np.allclose(audio.read_wav(tmp_path / "a.wav"), x, atol=1e-6)
    audio.write_wav(tmp_path / "b.wav", x)
    assert np.allclose(audio.read_wav(tmp_path / "b.wav"), x, atol=1e-4)


# -------------------------------------------------------------------- corpus


def test_synthetic_corpus_properties():
    utts = gen_synthetic_corpus(3, 6, 2)
    for u in utts:
        assert 4 <= len(u.phonemes) <= 12
        assert all(4 <= d <= 24 for d in u.durations)
        assert all(50 <= p <= 62 for p in u.pitches)
        assert int(np.sum(u.durations)) == u.mel.shape[0] == len(u.f0)
        assert u.lips.shape[1:] == (48, 48) and 0 <= u.lips.min() and u.lips.max() <= 1
    assert {u.speaker_id for u in utts} == {"spk0", "spk1"}


def test_synthetic_corpus_byte_identical(tmp_path):
    for d in ("a", "b"):
        write_corpus(gen_synthetic_corpus(7, 3), tmp_path / d)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_manifest_roundtrip(tmp_path):
    utts = gen_synthetic_corpus(1, 2)
    write_corpus(utts, tmp_path)
    back = load_corpus(tmp_path / "manifest.jsonl")
    line = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert set(line) == {
        "id", "phonemes", "pitches", "gt_durations", "mel_path", "f0_path", "lip_path", "ref_mel_path", "speaker_id",
    }
    for a, b in zip(utts, back):
        assert a.id == b.id and np.array_equal(a.mel, b.mel) and np.array_equal(a.lips, b.lips)
        assert np.array_equal(a.f0.f0_hz, b.f0.f0_hz)


def test_validation_reports_utterance_id():
    utt = gen_synthetic_corpus(1, 1)[0]
    utt.durations = utt.durations.copy()
    utt.durations[0] += 1
    with pytest.raises(CorpusError) as exc:
        utt.validate()
    assert exc.value.utterance_id == utt.id


def test_inventory_stats_counts():
    stats = inventory_stats(gen_synthetic_corpus(7, 16))
    assert stats["initials_total"] == 21 and stats["finals_total"] == 35
    assert 0 < stats["initials_covered"] <= 21 and 0 < stats["finals_covered"] <= 35


def test_sync_budget():
    assert sync_frame_budget(25, AudioConfig(), 25.0) == round(48000 / 256)
