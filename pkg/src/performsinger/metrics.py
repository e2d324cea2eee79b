"""Objective evaluation: MCD with DTW alignment, F0 frame error, speaker cosine."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import dct

from .frontend.audio import F0Contour

N_CEPSTRA = 13
FFE_GATE_CENTS = 50.0
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)
COLUMNS = ("MCD", "FFE", "COS", "LSE-C", "LSE-D")


class MetricError(ValueError):
    pass


def mel_cepstrum(log_mel: np.ndarray, n: int = N_CEPSTRA) -> np.ndarray:
    """DCT-II (orthonormal) of each log-mel frame, keeping c1..cn."""
    log_mel = np.asarray(log_mel, dtype=np.float64)
    if log_mel.ndim != 2 or log_mel.shape[0] == 0:
        raise MetricError(f"expected a non-empty (frames, bins) array, got shape {log_mel.shape}")
    return dct(log_mel, type=2, norm="ortho", axis=1)[:, 1 : n + 1]


def dtw(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Minimum-sum monotone alignment with unit steps (1,0), (0,1), (1,1).

    Ties prefer the diagonal, then the vertical step.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        raise MetricError("DTW needs two non-empty sequences")
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev, c = acc[i], acc[i - 1], cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(options, key=lambda o: o[0])  # min keeps the first on ties
        path.append((i - 1, j - 1))
    return float(acc[n, m]), path[::-1]


def mcd(mel_a: np.ndarray, mel_b: np.ndarray) -> float:
    """Mel cepstral distortion in dB after DTW alignment."""
    ca, cb = mel_cepstrum(mel_a), mel_cepstrum(mel_b)
    dist = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1))
    _, path = dtw(dist)
    rows, cols = zip(*path)
    return float(MCD_SCALE * dist[list(rows), list(cols)].mean())


def mcd_aligned(mel_a: np.ndarray, mel_b: np.ndarray) -> float:
    """Frame-by-frame MCD for equal-length inputs (no warping)."""
    ca, cb = mel_cepstrum(mel_a), mel_cepstrum(mel_b)
    if ca.shape != cb.shape:
        raise MetricError(f"frame counts differ: {ca.shape[0]} vs {cb.shape[0]}")
    return float(MCD_SCALE * np.sqrt(((ca - cb) ** 2).sum(-1)).mean())


def _pair(pred: F0Contour, gt: F0Contour):
    if len(pred) != len(gt):
        raise MetricError(f"F0 contours differ in length: {len(pred)} vs {len(gt)}")
    if len(gt) == 0:
        raise MetricError("empty F0 contour")
    return pred, gt


def cents(f_pred, f_ref) -> np.ndarray:
    return 1200.0 * np.log2(np.asarray(f_pred, dtype=np.float64) / np.asarray(f_ref, dtype=np.float64))


def ffe(pred: F0Contour, gt: F0Contour, gate_cents: float = FFE_GATE_CENTS) -> float:
    """Fraction of frames with a voicing error or a pitch error beyond the gate."""
    pred, gt = _pair(pred, gt)
    voicing_err = pred.uv != gt.uv
    both = pred.uv & gt.uv
    pitch_err = np.zeros(len(gt), dtype=bool)
    pitch_err[both] = np.abs(cents(pred.f0_hz[both], gt.f0_hz[both])) > gate_cents
    return float(np.mean(voicing_err | pitch_err))


def f0_rmse_cents(pred: F0Contour, gt: F0Contour) -> float:
    """RMS pitch error in cents over frames voiced in both contours (NaN if none)."""
    pred, gt = _pair(pred, gt)
    both = pred.uv & gt.uv
    if not both.any():
        return float("nan")
    return float(np.sqrt(np.mean(cents(pred.f0_hz[both], gt.f0_hz[both]) ** 2)))


def cos_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"embedding sizes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def duration_accuracy(pred, gt) -> float:
    """Fraction of phonemes whose predicted frame count equals the reference exactly."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError("duration sequences differ in length")
    return float(np.mean(pred == gt))


def align_by_durations(values: np.ndarray, pred_dur, gt_dur) -> np.ndarray:
    """Resample frames laid out by ``pred_dur`` onto the ``gt_dur`` layout, phoneme by phoneme."""
    values = np.asarray(values)
    pred_dur, gt_dur = np.asarray(pred_dur, dtype=int), np.asarray(gt_dur, dtype=int)
    if len(pred_dur) != len(gt_dur) or values.shape[0] != pred_dur.sum():
        raise MetricError("durations do not match the frame sequence")
    starts = np.concatenate([[0], np.cumsum(pred_dur)[:-1]])
    idx = []
    for s, p, g in zip(starts, pred_dur, gt_dur):
        if g == 0:
            continue
        if p == 0:
            idx.extend([max(s - 1, 0)] * g)
        else:
            idx.extend((s + np.floor(np.arange(g) * p / g)).astype(int).tolist())
    return values[np.asarray(idx, dtype=int)]


# ------------------------------------------------------------------ report


@dataclass
class EvalRow:
    id: str
    mcd_db: float
    ffe: float
    cos: float
    lse_c: float | None = None
    lse_d: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    config: dict = field(default_factory=dict)
    note: str = "COS uses the model's own speaker encoder; LSE-C/LSE-D need a pretrained lip-sync expert and are not computed."

    @property
    def count(self) -> int:
        return len(self.rows)

    def means(self) -> dict:
        if not self.rows:
            return {"mcd_db": float("nan"), "ffe": float("nan"), "cos": float("nan"), "lse_c": None, "lse_d": None}
        return {
            "mcd_db": float(np.mean([r.mcd_db for r in self.rows])),
            "ffe": float(np.mean([r.ffe for r in self.rows])),
            "cos": float(np.mean([r.cos for r in self.rows])),
            "lse_c": None,
            "lse_d": None,
        }

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.means(),
            "rows": [asdict(r) for r in self.rows],
            "config": self.config,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([EvalRow(**r) for r in d["rows"]], d.get("config", {}), d.get("note", cls.note))

    def table(self, label: str = "") -> str:
        def fmt(v, digits):
            return "n/a" if v is None else f"{v:.{digits}f}"

        head = f"{'System':<24}" + "".join(f"{c:>10}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.id:<24}{fmt(r.mcd_db, 4):>10}{fmt(r.ffe, 4):>10}{fmt(r.cos, 4):>10}{'n/a':>10}{'n/a':>10}")
        m = self.means()
        lines.append("-" * len(head))
        lines.append(f"{(label or 'mean'):<24}{fmt(m['mcd_db'], 4):>10}{fmt(m['ffe'], 4):>10}{fmt(m['cos'], 4):>10}{'n/a':>10}{'n/a':>10}")
        return "\n".join(lines)


def evaluate_pair(uid: str, gen_mel, ref_mel, gen_f0: F0Contour, ref_f0: F0Contour, gen_spk, ref_spk) -> EvalRow:
    return EvalRow(uid, mcd(gen_mel, ref_mel), ffe(gen_f0, ref_f0), cos_sim(gen_spk, ref_spk))
