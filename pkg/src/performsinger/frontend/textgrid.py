"""Praat TextGrid reader/writer (long and short text formats, interval tiers)."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

TOLERANCE = 1e-9

_TOKEN = re.compile(
    r'"(?P<str>(?:[^"]|"")*)"'
    r"|(?P<flag><exists>|<absent>)"
    r"|\[\d*\]"
    r"|(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<word>[A-Za-z_?][\w?]*)"
)


class TextGridError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Interval:
    xmin: float
    xmax: float
    label: str


@dataclass
class IntervalTier:
    name: str
    xmin: float
    xmax: float
    intervals: list[Interval] = field(default_factory=list)


@dataclass
class TextGrid:
    xmin: float
    xmax: float
    tiers: list[IntervalTier] = field(default_factory=list)

    def tier(self, name: str) -> IntervalTier:
        for t in self.tiers:
            if t.name == name:
                return t
        raise KeyError(f"no tier named {name!r}")


def _decode(data: str | bytes) -> str:
    if isinstance(data, str):
        return data.lstrip("﻿")
    if data.startswith((b"\xff\xfe", b"\xfe\xff")):
        return data.decode("utf-16")
    return data.decode("utf-8-sig")


def _tokens(text: str):
    line_starts = [0] + [m.end() for m in re.finditer("\n", text)]
    line = 0
    for m in _TOKEN.finditer(text):
        while line + 1 < len(line_starts) and line_starts[line + 1] <= m.start():
            line += 1
        if m.group("str") is not None:
            yield "str", m.group("str").replace('""', '"'), line + 1
        elif m.group("flag") is not None:
            yield "flag", m.group("flag"), line + 1
        elif m.group("num") is not None:
            yield "num", float(m.group("num")), line + 1
        # bare words (keys such as "xmin", "class") and [n] indices are layout only


class _Stream:
    def __init__(self, text: str):
        self.items = list(_tokens(text))
        self.pos = 0
        self.last_line = text.count("\n") + 1

    def take(self, kind: str, what: str):
        if self.pos >= len(self.items):
            raise TextGridError(f"truncated file: expected {what}", self.last_line)
        k, value, line = self.items[self.pos]
        if k != kind:
            raise TextGridError(f"expected {what}, found {value!r}", line)
        self.pos += 1
        return value, line


def parse_textgrid(data: str | bytes) -> TextGrid:
    """Parse a TextGrid in Praat long or short text format."""
    s = _Stream(_decode(data))
    ftype, line = s.take("str", "file type")
    if ftype != "ooTextFile":
        raise TextGridError(f"unsupported file type {ftype!r}", line)
    oclass, line = s.take("str", "object class")
    if oclass != "TextGrid":
        raise TextGridError(f"object class {oclass!r} is not TextGrid", line)
    xmin, _ = s.take("num", "xmin")
    xmax, line = s.take("num", "xmax")
    if xmax < xmin:
        raise TextGridError("file xmax < xmin", line)
    flag, line = s.take("flag", "tiers flag")
    grid = TextGrid(xmin, xmax)
    if flag == "<absent>":
        return grid
    n_tiers, _ = s.take("num", "tier count")
    for _ in range(int(n_tiers)):
        cls, line = s.take("str", "tier class")
        if cls != "IntervalTier":
            raise TextGridError(f"unsupported tier class {cls!r}", line)
        name, _ = s.take("str", "tier name")
        tmin, _ = s.take("num", "tier xmin")
        tmax, line = s.take("num", "tier xmax")
        if tmin < xmin - TOLERANCE or tmax > xmax + TOLERANCE or tmax < tmin:
            raise TextGridError(f"tier {name!r} range [{tmin}, {tmax}] outside file range", line)
        count, _ = s.take("num", "interval count")
        tier = IntervalTier(name, tmin, tmax)
        prev_end = tmin
        for k in range(1, int(count) + 1):
            a, line = s.take("num", f"interval {k} xmin")
            b, _ = s.take("num", f"interval {k} xmax")
            label, _ = s.take("str", f"interval {k} text")
            if b < a:
                raise TextGridError(f"tier {name!r} interval {k}: xmax {b} < xmin {a}", line)
            if a < prev_end - TOLERANCE:
                raise TextGridError(f"tier {name!r} interval {k} overlaps interval {k - 1}", line)
            if a > prev_end + TOLERANCE:
                raise TextGridError(f"tier {name!r} interval {k} leaves a gap after {prev_end}", line)
            tier.intervals.append(Interval(a, b, label))
            prev_end = b
        if tier.intervals and abs(prev_end - tmax) > TOLERANCE:
            raise TextGridError(f"tier {name!r} intervals end at {prev_end}, tier ends at {tmax}", line)
        grid.tiers.append(tier)
    if s.pos != len(s.items):
        _, value, line = s.items[s.pos]
        raise TextGridError(f"unexpected trailing token {value!r}", line)
    return grid


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _str(label: str) -> str:
    return '"' + label.replace('"', '""') + '"'


def serialize_textgrid(grid: TextGrid, short: bool = False) -> str:
    if short:
        out = ['File type = "ooTextFile"', 'Object class = "TextGrid"', "", _num(grid.xmin), _num(grid.xmax)]
        out.append("<exists>" if grid.tiers else "<absent>")
        if grid.tiers:
            out.append(str(len(grid.tiers)))
        for tier in grid.tiers:
            out += ['"IntervalTier"', _str(tier.name), _num(tier.xmin), _num(tier.xmax), str(len(tier.intervals))]
            for iv in tier.intervals:
                out += [_num(iv.xmin), _num(iv.xmax), _str(iv.label)]
        return "\n".join(out) + "\n"

    out = [
        'File type = "ooTextFile"',
        'Object class = "TextGrid"',
        "",
        f"xmin = {_num(grid.xmin)} ",
        f"xmax = {_num(grid.xmax)} ",
    ]
    if not grid.tiers:
        out.append("tiers? <absent> ")
        return "\n".join(out) + "\n"
    out += ["tiers? <exists> ", f"size = {len(grid.tiers)} ", "item []: "]
    for i, tier in enumerate(grid.tiers, 1):
        out += [
            f"    item [{i}]:",
            '        class = "IntervalTier" ',
            f"        name = {_str(tier.name)} ",
            f"        xmin = {_num(tier.xmin)} ",
            f"        xmax = {_num(tier.xmax)} ",
            f"        intervals: size = {len(tier.intervals)} ",
        ]
        for k, iv in enumerate(tier.intervals, 1):
            out += [
                f"        intervals [{k}]:",
                f"            xmin = {_num(iv.xmin)} ",
                f"            xmax = {_num(iv.xmax)} ",
                f"            text = {_str(iv.label)} ",
            ]
    return "\n".join(out) + "\n"


def nesting_violations(parent: IntervalTier, child: IntervalTier, tol: float = 1e-6) -> list[int]:
    """1-based indices of child intervals that straddle a parent boundary."""
    bad = []
    for k, iv in enumerate(child.intervals, 1):
        inside = any(p.xmin - tol <= iv.xmin and iv.xmax <= p.xmax + tol for p in parent.intervals)
        if not inside:
            bad.append(k)
    return bad


def largest_remainder(weights, total: int) -> list[int]:
    """Integers proportional to ``weights`` that sum to ``total`` exactly."""
    weights = [max(float(w), 0.0) for w in weights]
    mass = sum(weights)
    if total < 0:
        raise ValueError("total must be non-negative")
    if mass <= 0:
        raise ValueError("weights must have positive sum")
    exact = [w * total / mass for w in weights]
    counts = [int(e) for e in exact]
    short = total - sum(counts)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def tier_to_frames(tier: IntervalTier, n_frames: int) -> list[int]:
    """Per-interval frame counts summing exactly to ``n_frames``."""
    return largest_remainder([iv.xmax - iv.xmin for iv in tier.intervals], n_frames)
