"""Composite loss, Adam, and the staged training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import numerics as nx
from .config import LossConfig, RunConfig, from_dict
from .frontend.corpus import Utterance
from .model import MODULE_GROUPS, Item, PerformSinger, make_item

log = logging.getLogger(__name__)

PARTS = ("L_R", "L_D", "L_P", "L_C")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- composite


def composite_loss(parts: dict, weights: LossConfig):
    """Weighted sum of the four loss terms; returns (total, parts as floats)."""
    lam = {"L_R": weights.lambda_r, "L_D": weights.lambda_d, "L_P": weights.lambda_p, "L_C": weights.lambda_c}
    total = None
    for name in PARTS:
        value = parts[name]
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise TrainingError(f"loss term {name} is not finite ({v})")
        term = lam[name] * value
        total = term if total is None else total + term
    return total, {k: float(parts[k].detach()) if torch.is_tensor(parts[k]) else float(parts[k]) for k in PARTS}


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list, grads: list, state: AdamState, lr, betas=(0.9, 0.98), eps: float = 1e-9) -> AdamState:
    """In-place bias-corrected Adam update. ``lr`` may be a float or one per param."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise nx.ShapeError("adam_step", (len(params),), (len(grads),))
    b1, b2 = betas
    state.step += 1
    with torch.no_grad():
        torch._foreach_lerp_(state.m, grads, 1.0 - b1)
        torch._foreach_mul_(state.v, b2)
        torch._foreach_addcmul_(state.v, grads, grads, 1.0 - b2)
        c1 = 1.0 - b1**state.step
        c2 = 1.0 - b2**state.step
        denom = torch._foreach_sqrt(state.v)
        torch._foreach_div_(denom, math.sqrt(c2))
        torch._foreach_add_(denom, eps)
        rates = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
        updates = torch._foreach_div(state.m, denom)
        torch._foreach_mul_(updates, [-r / c1 for r in rates])
        torch._foreach_add_(params, updates)
    return state


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warm-up to ``base`` over ``warmup`` steps, then inverse-sqrt decay."""
    step = max(step, 1)
    if warmup <= 0:
        return base
    return base * min(step / warmup, math.sqrt(warmup / step))


# ------------------------------------------------------------------- stages


@dataclass
class StageConfig:
    stage: str  # "1" | "2" | "single"
    trainable: dict  # group -> lr scale
    vcfm_enabled: bool
    visual_frozen: bool
    steps: int
    batch_size: int
    lr: float
    warmup: int

    def __post_init__(self):
        if self.stage == "1" and self.vcfm_enabled:
            raise TrainingError("stage 1 runs without the fusion module")
        if self.stage == "2" and not self.visual_frozen:
            raise TrainingError("stage 2 keeps the visual encoder frozen")


def stage_config(cfg: RunConfig, stage: str) -> StageConfig:
    t = cfg.train
    acoustic = [g for g in MODULE_GROUPS if g not in ("visual_encoder", "vcfm")]
    if stage == "1":
        return StageConfig("1", {g: 1.0 for g in acoustic}, False, True, t.stage1_steps, t.batch_size, t.lr, t.warmup)
    if stage == "2":
        scale = 0.0 if t.stage2_full_freeze else t.stage2_finetune_scale
        trainable = {"vcfm": 1.0}
        if scale > 0:
            trainable.update({g: scale for g in acoustic})
        return StageConfig("2", trainable, True, True, t.stage2_steps, t.batch_size, t.lr, t.warmup)
    if stage == "single":
        return StageConfig("single", {g: 1.0 for g in MODULE_GROUPS}, True, False, t.single_steps, t.batch_size, t.lr, t.warmup)
    raise TrainingError(f"unknown stage {stage!r}")


# -------------------------------------------------------------- checkpoints


def save_checkpoint(model: PerformSinger, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, tensor in model.state_dict().items():
        nx.save_tensor(path / "params" / f"{name}.tnsr", tensor.to(nx.DTYPE))
        shapes[name] = list(tensor.shape)
    info = {
        "module": "performsinger",
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "vcfm_active": model.vcfm_active,
        "shapes": shapes,
    }
    info.update(meta or {})
    (path / "metadata.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> tuple[PerformSinger, dict]:
    path = Path(path)
    meta_file = path / "metadata.json"
    if not meta_file.exists():
        raise TrainingError(f"{path} is not a checkpoint directory")
    meta = json.loads(meta_file.read_text())
    model = PerformSinger(cfg or from_dict(meta["config"]))
    state = {}
    for name, shape in meta["shapes"].items():
        tensor = nx.load_tensor(path / "params" / f"{name}.tnsr")
        if list(tensor.shape) != shape:
            raise TrainingError(f"checkpoint tensor {name} has shape {list(tensor.shape)}, expected {shape}")
        state[name] = tensor
    model.load_state_dict(state)
    model.vcfm_active = bool(meta.get("vcfm_active", False))
    model.eval()
    return model, meta


def params_checksum(model: PerformSinger, groups: Iterable[str]) -> str:
    import hashlib

    h = hashlib.sha256()
    for g in groups:
        for p in getattr(model, g).parameters():
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ loop


def _step_seed(seed: int, stage: str, step: int) -> int:
    return int(np.random.SeedSequence([seed, {"1": 1, "2": 2, "single": 3}[stage], step]).generate_state(1)[0])


def _draw_step(gen: torch.Generator, steps: int, probs: torch.Tensor | None) -> int:
    if probs is None:
        return int(torch.randint(1, steps + 1, (1,), generator=gen))
    return int(torch.multinomial(probs, 1, generator=gen)) + 1


def draw_noise(item: Item, gen: torch.Generator, pitch_steps: int, mel_steps: int, probs=(None, None)):
    frames = item.mel.shape[1]
    t_p = _draw_step(gen, pitch_steps, probs[0])
    n_p = torch.randn((1, frames), generator=gen, dtype=nx.DTYPE)
    t_m = _draw_step(gen, mel_steps, probs[1])
    n_m = torch.randn((1, frames, item.mel.shape[2]), generator=gen, dtype=nx.DTYPE)
    return t_p, n_p, t_m, n_m


@torch.no_grad()
def probe_losses(model: PerformSinger, items: list[Item], seed: int = 0) -> dict:
    """Eval-mode loss parts on fixed draws; used to compare models on one batch."""
    was = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    totals = {k: 0.0 for k in PARTS}
    for item in items:
        parts = model.losses(item, *draw_noise(item, gen, model.cfg.pitch.steps, model.cfg.decoder.steps))
        for k in PARTS:
            totals[k] += float(parts[k])
    model.train(was)
    return {k: v / len(items) for k, v in totals.items()}


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size].tolist() for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    model: PerformSinger
    history: list
    meta: dict
    checkpoint: Path | None = None


def train(
    utterances: list[Utterance],
    cfg: RunConfig,
    stage: str,
    seed: int | None = None,
    init: PerformSinger | str | Path | None = None,
    out_dir: str | Path | None = None,
    steps: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run one training stage; deterministic given (data, config, seed)."""
    seed = cfg.seed if seed is None else seed
    sc = stage_config(cfg, stage)
    if steps is not None:
        sc.steps = steps
    if stage == "2" and init is None:
        raise TrainingError("stage 2 requires a stage-1 checkpoint (init)")
    if not utterances:
        raise TrainingError("no training utterances")

    torch.manual_seed(seed)
    if init is None:
        model = PerformSinger(cfg)
    elif isinstance(init, PerformSinger):
        model = init
    else:
        model, _ = load_checkpoint(init)
    if stage == "2":
        # fresh fusion parameters, drawn from a stream independent of the stage-1 run
        torch.manual_seed(seed + 1)
        from .vcfm import VCFM

        model.vcfm = VCFM(cfg.model.hidden, cfg.vcfm.blocks, cfg.vcfm.heads, cfg.vcfm.zero_init).to(nx.DTYPE)
    model.vcfm_active = sc.vcfm_enabled
    model.visual_frozen = sc.visual_frozen

    items = []
    for utt in utterances:
        try:
            items.append(make_item(utt))
        except (ValueError, KeyError) as exc:
            raise TrainingError(f"[{utt.id}] {exc}") from None

    probe_items = items[: sc.batch_size]
    meta: dict = {"stage": stage, "seed": seed}
    if stage == "2":
        meta["probe_step0"] = probe_losses(model, probe_items)

    groups = list(sc.trainable)
    frozen = [g for g in MODULE_GROUPS if g not in sc.trainable]
    for g in MODULE_GROUPS:
        for p in getattr(model, g).parameters():
            p.requires_grad_(g in sc.trainable)
    params, scales = [], []
    for g in groups:
        for p in getattr(model, g).parameters():
            params.append(p)
            scales.append(sc.trainable[g])
    frozen_sum = params_checksum(model, frozen)

    probs = (None, None)
    if cfg.train.t_sampling == "weighted":
        probs = (None, model.decoder.schedule.step_probs(cfg.decoder.target, cfg.decoder.x0_tolerance))

    state = AdamState()
    history = []
    cache: dict = {}
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    log_fh = open(Path(out_dir) / "train_log.jsonl", "w") if out_dir else None
    started = time.time()
    model.train()
    epoch, order = 0, []
    try:
        for step in range(1, sc.steps + 1):
            if not order:
                order = batch_order(len(items), sc.batch_size, seed, epoch)
                epoch += 1
            batch = [items[i] for i in order.pop(0)]
            step_seed = _step_seed(seed, stage, step)
            torch.manual_seed(step_seed)  # dropout masks
            gen = torch.Generator().manual_seed(step_seed)

            for p in params:
                p.grad = None
            sums = {k: 0.0 for k in PARTS}
            sf = model.speaker_batch(batch, cfg.model.speaker_crop, gen)
            step_total = 0.0
            for i, item in enumerate(batch):
                draws = draw_noise(item, gen, cfg.pitch.steps, cfg.decoder.steps, probs)
                parts = model.losses(item, *draws, cache=cache, sf=sf[i : i + 1])
                if probs[1] is not None:
                    # importance weight keeps L_R an unbiased estimate of its uniform-step mean
                    parts["L_R"] = parts["L_R"] / (cfg.decoder.steps * probs[1][draws[2] - 1])
                total, floats = composite_loss(parts, cfg.loss)
                for k, v in floats.items():
                    if v < 0:
                        raise TrainingError(f"[{item.id}] loss term {k} is negative ({v})")
                    sums[k] += v / len(batch)
                step_total = step_total + total / len(batch)
            step_total.backward()
            total_value = float(step_total.detach())
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            if cfg.train.grad_clip > 0:
                norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads]))
                if float(norm) > cfg.train.grad_clip:
                    torch._foreach_mul_(grads, cfg.train.grad_clip / (float(norm) + 1e-12))
            lr = lr_at(step, sc.lr, sc.warmup)
            adam_step(params, grads, state, [lr * s for s in scales], (cfg.train.adam_beta1, cfg.train.adam_beta2), cfg.train.adam_eps)

            row = {"step": step, "stage": stage, **sums, "total": total_value, "lr": lr}
            history.append(row)
            if log_fh and (step % max(cfg.train.log_every, 1) == 0 or step == sc.steps):
                log_fh.write(json.dumps(row) + "\n")
            if on_step:
                on_step(row)
            if out_dir and cfg.train.checkpoint_every and step % cfg.train.checkpoint_every == 0:
                save_checkpoint(model, Path(out_dir) / f"step_{step:06d}", {"stage": stage, "step": step})
    finally:
        if log_fh:
            log_fh.close()

    if params_checksum(model, frozen) != frozen_sum:
        raise TrainingError("a frozen module changed during training")
    model.eval()
    meta.update(
        {
            "steps": sc.steps,
            "probe_final": probe_losses(model, probe_items),
            "frozen_checksum": frozen_sum,
            "frozen_groups": frozen,
            "seconds": time.time() - started,
        }
    )
    ckpt = save_checkpoint(model, Path(out_dir) / "final", meta) if out_dir else None
    log.info("stage %s finished %d steps in %.1fs", stage, sc.steps, meta["seconds"])
    return TrainResult(model, history, meta, ckpt)
