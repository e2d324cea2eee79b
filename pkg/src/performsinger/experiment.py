"""Synthesis + scoring helpers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .config import RunConfig
from .frontend.audio import F0Contour
from .frontend.corpus import Utterance
from .model import PerformSinger, make_item
from .training import TrainResult, probe_losses, train

log = logging.getLogger(__name__)


@dataclass
class UtteranceScore:
    id: str
    duration_accuracy: float
    mcd_db: float
    ffe: float
    f0_rmse_cents: float
    cos: float


@torch.no_grad()
def speaker_vector(model: PerformSinger, mel) -> np.ndarray:
    return model.speaker_encoder(torch.as_tensor(np.asarray(mel), dtype=torch.float64)[None])[0].numpy()


@torch.no_grad()
def score_model(model: PerformSinger, utterances: list[Utterance], seed: int = 0) -> tuple[metrics.EvalReport, list[UtteranceScore]]:
    """Duration-free synthesis of each utterance, scored against its ground truth."""
    model.eval()
    rows, scores = [], []
    for utt in utterances:
        out = model.infer(make_item(utt, with_targets=False), seed=seed)
        pred_dur = out["durations"].numpy()
        mel = out["mel"].numpy()
        gt_dur = np.asarray(utt.durations)
        f0_arr = metrics.align_by_durations(out["f0"].to_array(), pred_dur, gt_dur)
        f0 = F0Contour.from_array(f0_arr)
        cos = metrics.cos_sim(speaker_vector(model, mel), speaker_vector(model, utt.mel))
        row = metrics.EvalRow(utt.id, metrics.mcd(mel, utt.mel), metrics.ffe(f0, utt.f0), cos)
        rows.append(row)
        scores.append(
            UtteranceScore(
                utt.id,
                metrics.duration_accuracy(pred_dur, gt_dur),
                row.mcd_db,
                row.ffe,
                metrics.f0_rmse_cents(f0, utt.f0),
                cos,
            )
        )
    return metrics.EvalReport(rows, {"config_hash": model.cfg.hash()}), scores


def mean_reconstruction_loss(model: PerformSinger, utterances: list[Utterance], draws: int = 8, seed: int = 0) -> float:
    """L_R averaged over several fixed (t, noise) draws per utterance."""
    items = [make_item(u) for u in utterances]
    return float(np.mean([probe_losses(model, items, seed + k)["L_R"] for k in range(draws)]))


def run_strategy(utterances: list[Utterance], cfg: RunConfig, out_dir: str | Path | None = None, seed: int | None = None) -> list[TrainResult]:
    """Train one ablation arm according to ``cfg.train.strategy``."""
    strategy = cfg.train.strategy
    sub = (lambda name: Path(out_dir) / name) if out_dir else (lambda name: None)
    if strategy == "baseline":
        return [train(utterances, cfg, "1", seed=seed, out_dir=sub("stage1"))]
    if strategy == "single":
        return [train(utterances, cfg, "single", seed=seed, out_dir=sub("single"))]
    if strategy == "two_stage":
        first = train(utterances, cfg, "1", seed=seed, out_dir=sub("stage1"))
        second = train(utterances, cfg, "2", seed=seed, init=first.model, out_dir=sub("stage2"))
        return [first, second]
    raise ValueError(f"unknown training strategy {strategy!r}")


def write_scores(path: str | Path, report: metrics.EvalReport, scores: list[UtteranceScore], extra: dict | None = None) -> None:
    payload = report.to_dict()
    payload["scores"] = [s.__dict__ for s in scores]
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
