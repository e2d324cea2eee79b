"""Duration prediction, length regulation, diffusion F0/UV and the RVQ style path."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import numerics as nx
from .config import RunConfig
from .decoder import Denoiser, DiffusionSchedule


class PredictorError(ValueError):
    pass


# ------------------------------------------------------------------ duration


class DurationPredictor(nn.Module):
    def __init__(self, dim: int, kernel: int = 3, dropout: float = 0.1):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(dim, dim, kernel) for _ in range(2))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(2))
        self.drop = nn.Dropout(dropout)
        self.out = nn.Linear(dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n, H) -> log-durations (B, n, 1)."""
        for conv, norm in zip(self.convs, self.norms):
            x = nx.gelu(nx.conv1d(x.transpose(1, 2), conv.weight, conv.bias)).transpose(1, 2)
            x = self.drop(norm(x))
        return self.out(x)


def durations_from_log(log_dur: torch.Tensor) -> torch.Tensor:
    """round(exp(x)) clamped to at least one frame."""
    return torch.clamp(torch.round(torch.exp(log_dur.detach())), min=1).long()


def length_regulate(x: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row ``i`` of ``x`` (…, n, H) ``durations[i]`` times."""
    d = torch.as_tensor(durations, dtype=torch.long)
    if d.dim() != 1 or d.shape[0] != x.shape[-2]:
        raise nx.ShapeError("length_regulate", x.shape, d.shape)
    if bool((d < 0).any()):
        raise PredictorError("durations must be non-negative")
    if int(d.sum()) == 0:
        raise PredictorError("all durations are zero: empty utterance")
    return torch.repeat_interleave(x, d, dim=-2)


# --------------------------------------------------------------------- pitch


def f0_stats(note_logf0: np.ndarray, std_floor: float) -> tuple[float, float]:
    """Per-utterance centre/scale taken from the frame-expanded note track."""
    valid = note_logf0[np.isfinite(note_logf0)]
    if valid.size == 0:
        return float(np.log(220.0)), std_floor
    return float(valid.mean()), max(float(valid.std()), std_floor)


def f0_to_target(f0_hz: np.ndarray, uv: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """Standardized log-F0 with unvoiced gaps linearly interpolated."""
    f0_hz = np.asarray(f0_hz, dtype=np.float64)
    uv = np.asarray(uv, dtype=bool)
    if not uv.any():
        return np.zeros(len(f0_hz))
    idx = np.flatnonzero(uv)
    logf0 = np.interp(np.arange(len(f0_hz)), idx, np.log(f0_hz[idx]))
    return (logf0 - mu) / sigma


def target_to_f0(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    return np.exp(np.asarray(x) * sigma + mu)


class PitchPredictor(nn.Module):
    """Diffusion F0 predictor with a separate voiced/unvoiced head."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        p, h = cfg.pitch, cfg.model.hidden
        self.schedule = DiffusionSchedule(p.steps, p.beta_min, p.beta_max)
        self.denoiser = Denoiser(1, h, p.channels, p.layers)
        self.uv_head = nn.Conv1d(h, 1, 3)
        self.threshold = p.uv_threshold
        self.target, self.tolerance = p.target, p.x0_tolerance

    def eps(self, x_t: torch.Tensor, t: int, frame_feat: torch.Tensor) -> torch.Tensor:
        def net(x, steps):
            return self.denoiser(x[..., None], steps, frame_feat)[..., 0]

        return self.schedule.noise_estimate(net, x_t, t, self.target, self.tolerance, 1.0)

    def uv_logits(self, frame_feat: torch.Tensor) -> torch.Tensor:
        return nx.conv1d(frame_feat.transpose(1, 2), self.uv_head.weight, self.uv_head.bias)[:, 0]

    def train_loss(self, frame_feat, f0_target, uv, t: int, noise):
        """frame_feat (B, F, H); f0_target, uv, noise: (B, F)."""
        if f0_target.shape != frame_feat.shape[:2] or uv.shape != f0_target.shape:
            raise nx.ShapeError("pitch_diffusion_train", frame_feat.shape, f0_target.shape)
        x_t = self.schedule.q_sample(f0_target, t, noise)
        noise_loss = nx.mse(self.eps(x_t, t, frame_feat), noise)
        uv_loss = nx.bce_with_logits(self.uv_logits(frame_feat), uv)
        return noise_loss, uv_loss

    @torch.no_grad()
    def sample(self, frame_feat: torch.Tensor, seed: int):
        """Returns (standardized log-F0 (B, F), voiced mask (B, F))."""
        b, frames = frame_feat.shape[:2]
        gen = torch.Generator().manual_seed(int(seed))
        x0 = self.schedule.sample(lambda x, t: self.eps(x, t, frame_feat), (b, frames), gen)
        voiced = torch.sigmoid(self.uv_logits(frame_feat)) >= self.threshold
        return x0, voiced


# ----------------------------------------------------------------------- RVQ


class RVQ(nn.Module):
    """Residual vector quantizer with gradient-trained codebooks.

    Entry 0 of every codebook is pinned to the zero vector, so a stage can
    always pass its residual through unchanged and residual energy never grows.
    """

    def __init__(self, books: int, entries: int, dim: int, beta: float = 0.25):
        super().__init__()
        if books < 1 or entries < 1:
            raise PredictorError("RVQ needs at least one non-empty codebook")
        self.beta = beta
        self.learned = nn.Parameter(torch.randn(books, entries - 1, dim, dtype=nx.DTYPE) * 0.1)

    @property
    def codebooks(self) -> torch.Tensor:
        """(books, entries, dim) including the pinned zero rows."""
        zero = torch.zeros(self.learned.shape[0], 1, self.learned.shape[2], dtype=self.learned.dtype)
        return torch.cat([zero, self.learned], dim=1)

    @staticmethod
    def nearest(residual: torch.Tensor, book: torch.Tensor) -> torch.Tensor:
        # exact squared distances; argmin keeps the lowest index on ties
        dist = ((residual[:, None, :] - book[None, :, :]) ** 2).sum(-1)
        return torch.argmin(dist, dim=1)

    def forward(self, z: torch.Tensor):
        """z: (N, d) -> (codes (N, C), z_q (N, d), commit_loss)."""
        if z.dim() != 2 or z.shape[-1] != self.learned.shape[-1]:
            raise nx.ShapeError("rvq_quantize", z.shape, self.learned.shape)
        residual = z.detach()
        quantized = torch.zeros_like(z)
        codes = []
        for book in self.codebooks:
            idx = self.nearest(residual, book.detach())
            chosen = book[idx]
            codes.append(idx)
            quantized = quantized + chosen
            residual = residual - chosen.detach()
        commit = self.beta * ((z - quantized.detach()) ** 2).mean() + ((z.detach() - quantized) ** 2).mean()
        z_q = z + (quantized - z).detach()
        return torch.stack(codes, dim=1), z_q, commit

    @torch.no_grad()
    def residual_energies(self, z: torch.Tensor) -> torch.Tensor:
        """(C+1, N) squared residual norms before each stage and after the last."""
        residual = z.clone()
        out = [(residual**2).sum(-1)]
        for book in self.codebooks:
            residual = residual - book[self.nearest(residual, book)]
            out.append((residual**2).sum(-1))
        return torch.stack(out)


class StyleExtractor(nn.Module):
    """Reference mel -> conv latents -> RVQ -> cross-attention onto content frames."""

    min_frames = 10

    def __init__(self, cfg: RunConfig):
        super().__init__()
        h = cfg.model.hidden
        self.lo, self.hi = cfg.decoder.mel_min, cfg.decoder.mel_max
        self.pool = cfg.style.pool
        self.conv1 = nn.Conv1d(cfg.audio.n_mels, h, 3)
        self.conv2 = nn.Conv1d(h, h, 3)
        self.norm = nn.LayerNorm(h)
        self.rvq = RVQ(cfg.rvq.books, cfg.rvq.entries, h, cfg.rvq.beta)
        self.attn = nx.MultiHeadAttention(h, cfg.style.heads)

    def latents(self, ref_mel: torch.Tensor) -> torch.Tensor:
        """(1, frames, 80) -> (L, H) with L = ceil(frames / pool)."""
        if ref_mel.shape[-2] < self.min_frames:
            raise PredictorError(f"reference mel needs >= {self.min_frames} frames")
        x = ((ref_mel - self.lo) / (self.hi - self.lo) * 2.0 - 1.0).transpose(1, 2)
        x = nx.gelu(nx.conv1d(x, self.conv1.weight, self.conv1.bias))
        x = nx.conv1d(x, self.conv2.weight, self.conv2.bias)
        x = F.avg_pool1d(x, self.pool, self.pool, ceil_mode=True)
        return self.norm(x.transpose(1, 2))[0]

    def forward(self, ref_mel: torch.Tensor, frame_feat: torch.Tensor):
        """Returns (style sequence (1, F, H), codes, commit_loss)."""
        codes, z_q, commit = self.rvq(self.latents(ref_mel))
        style = self.attn(frame_feat, z_q[None], z_q[None])
        return style, codes, commit
