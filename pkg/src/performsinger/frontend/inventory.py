"""Mandarin phoneme inventory and pinyin decomposition."""

from __future__ import annotations

import difflib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

INITIALS = (
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h",
    "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s",
)
FINALS = (
    "a", "ai", "an", "ang", "ao", "e", "ei", "en", "eng", "er", "i", "ia",
    "ian", "iang", "iao", "ie", "in", "ing", "iong", "iu", "o", "ong", "ou",
    "u", "ua", "uai", "uan", "uang", "ui", "un", "uo", "v", "van", "ve", "vn",
)
SPECIALS = ("SIL", "BR", "SEP")
PAD = "<pad>"

MIDI_MIN, MIDI_MAX = 36, 79
REST = "REST"

# Voiced initials; every final and no special is voiced.
VOICED_INITIALS = frozenset({"b", "d", "g", "m", "n", "l", "r"})


class PinyinError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeInventory:
    initials: tuple[str, ...] = INITIALS
    finals: tuple[str, ...] = FINALS
    specials: tuple[str, ...] = SPECIALS

    def __post_init__(self):
        symbols = self.symbols
        if len(set(symbols)) != len(symbols):
            raise ValueError("inventory symbols must be unique")

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.initials + self.finals + self.specials

    @property
    def size(self) -> int:
        """Embedding rows, including padding id 0."""
        return len(self.symbols) + 1

    def id(self, symbol: str) -> int:
        try:
            return self._ids()[symbol]
        except KeyError:
            raise KeyError(f"unknown phoneme {symbol!r}") from None

    def symbol(self, idx: int) -> str:
        if idx == 0:
            return PAD
        if not 0 < idx < self.size:
            raise KeyError(f"unknown phoneme id {idx}")
        return self.symbols[idx - 1]

    def encode(self, symbols) -> list[int]:
        return [self.id(s) for s in symbols]

    def decode(self, ids) -> list[str]:
        return [self.symbol(int(i)) for i in ids]

    def is_voiced(self, symbol: str) -> bool:
        if symbol in self.specials:
            return False
        if symbol in self.initials:
            return symbol in VOICED_INITIALS
        return True

    def _ids(self) -> dict[str, int]:
        return _id_table(self.symbols)


@lru_cache(maxsize=None)
def _id_table(symbols: tuple[str, ...]) -> dict[str, int]:
    return {s: i + 1 for i, s in enumerate(symbols)}


INVENTORY = PhonemeInventory()


@lru_cache(maxsize=1)
def pinyin_table() -> dict[str, tuple[str | None, str]]:
    """Syllable -> (initial or None, final), loaded from the bundled TSV."""
    text = resources.files("performsinger.frontend").joinpath("data/pinyin.tsv").read_text("utf-8")
    table: dict[str, tuple[str | None, str]] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        syllable, initial, final = line.split("\t")
        table[syllable] = (None if initial == "-" else initial, final)
    return table


def pinyin_to_phonemes(syllable: str) -> tuple[str | None, str]:
    """Split a toneless lowercase pinyin syllable into (initial, final).

    >>> pinyin_to_phonemes("zhong")
    ('zh', 'ong')
    >>> pinyin_to_phonemes("a")
    (None, 'a')
    """
    table = pinyin_table()
    key = syllable.strip().replace("ü", "v").replace("u:", "v")
    if key in table:
        return table[key]
    near = difflib.get_close_matches(key, table.keys(), n=5, cutoff=0.5)
    raise PinyinError(f"cannot decompose pinyin syllable {syllable!r}; nearest: {', '.join(near) or 'none'}")


def lyrics_to_phonemes(syllables) -> tuple[list[str], list[int]]:
    """Phoneme symbols for a syllable list plus the owning syllable index of each."""
    symbols, owner = [], []
    for k, syl in enumerate(syllables):
        if syl in SPECIALS:
            symbols.append(syl)
            owner.append(k)
            continue
        initial, final = pinyin_to_phonemes(syl)
        if initial is not None:
            symbols.append(initial)
            owner.append(k)
        symbols.append(final)
        owner.append(k)
    return symbols, owner


def check_pitch(value) -> int | str:
    if value == REST:
        return REST
    if isinstance(value, bool) or not isinstance(value, int) or not MIDI_MIN <= value <= MIDI_MAX:
        raise ValueError(f"pitch {value!r} outside [{MIDI_MIN}, {MIDI_MAX}] and not REST")
    return value
