"""DDPM machinery and the diffusion mel-spectrogram decoder."""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from . import numerics as nx
from .config import RunConfig


class DiffusionError(ValueError):
    pass


class DiffusionSchedule:
    """Linear-beta DDPM schedule; steps are indexed ``1..T``."""

    def __init__(self, steps: int = 100, beta_min: float = 1e-4, beta_max: float = 0.06):
        if steps < 1:
            raise DiffusionError("diffusion needs at least one step")
        self.T = steps
        self.betas = torch.linspace(beta_min, beta_max, steps, dtype=nx.DTYPE)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = torch.cumprod(self.alphas, dim=0)
        self.alpha_bar_prev = torch.cat([torch.ones(1, dtype=nx.DTYPE), self.alpha_bar[:-1]])
        self.posterior_var = self.betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    def _check(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise DiffusionError(f"step {t} outside [1, {self.T}]")
        return t - 1

    def ab(self, t: int) -> torch.Tensor:
        return self.alpha_bar[self._check(t)]

    def step_probs(self, target: str = "eps", tolerance: float = 0.03, floor: float = 0.2) -> torch.Tensor:
        """Training distribution over steps 1..T.

        For the clean-signal target the per-step loss weight on the clean error is
        ``shrink**2 * r``; steps are drawn proportionally to it, mixed with a uniform
        floor. Losses are reweighted by ``1 / (T p(t))`` so the objective is unchanged.
        """
        if target != "x0":
            return torch.full((self.T,), 1.0 / self.T, dtype=nx.DTYPE)
        r = self.alpha_bar / (1.0 - self.alpha_bar)
        w = r / (1.0 + r * tolerance**2) ** 2
        return floor / self.T + (1.0 - floor) * w / w.sum()

    def q_sample(self, x0: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        ab = self.ab(t)
        if noise.shape != x0.shape:
            raise nx.ShapeError("q_sample", x0.shape, noise.shape)
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise

    def predict_x0(self, x_t: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        ab = self.ab(t)
        return (x_t - torch.sqrt(1.0 - ab) * eps) / torch.sqrt(ab)

    def posterior(self, x0: torch.Tensor, x_t: torch.Tensor, t: int):
        i = self._check(t)
        ab, ab_prev = self.alpha_bar[i], self.alpha_bar_prev[i]
        c0 = self.betas[i] * torch.sqrt(ab_prev) / (1.0 - ab)
        ct = (1.0 - ab_prev) * torch.sqrt(self.alphas[i]) / (1.0 - ab)
        return c0 * x0 + ct * x_t, self.posterior_var[i]

    def noise_estimate(self, net, x_t: torch.Tensor, t: int, target: str = "eps", tolerance: float = 0.03, data_rms: float = 1.0):
        """Noise estimate from a network ``net(x_in, steps)`` under either output target.

        ``eps``: the network output is the noise estimate itself.
        ``x0``: inputs are scaled to unit variance, the network predicts clean data, and
        the implied noise is shrunk by ``1 / (1 + r * tolerance**2)`` with ``r = ab / (1 - ab)``,
        the least-squares factor when the clean estimate is off by ``tolerance`` rms.
        """
        steps = torch.full((x_t.shape[0],), float(t), dtype=nx.DTYPE)
        if target == "eps":
            return net(x_t, steps)
        if target != "x0":
            raise DiffusionError(f"unknown denoiser target {target!r}")
        ab = self.ab(t)
        x0_hat = net(x_t / torch.sqrt(ab * data_rms**2 + 1.0 - ab), steps)
        shrink = 1.0 / (1.0 + ab / (1.0 - ab) * tolerance**2)
        return shrink * (x_t - torch.sqrt(ab) * x0_hat) / torch.sqrt(1.0 - ab)

    def sample(self, eps_fn, shape, generator: torch.Generator, clip: float | None = None) -> torch.Tensor:
        """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``."""
        x = torch.randn(shape, generator=generator, dtype=nx.DTYPE)
        for t in range(self.T, 0, -1):
            x0 = self.predict_x0(x, t, eps_fn(x, t))
            if clip is not None:
                x0 = x0.clamp(-clip, clip)
            mean, var = self.posterior(x0, x, t)
            if t > 1:
                x = mean + torch.sqrt(var) * torch.randn(shape, generator=generator, dtype=nx.DTYPE)
            else:
                x = mean
        return x


class MelNormalizer:
    """Fixed affine map from ``[mel_min, mel_max]`` log-mel to ``[-1, 1]``."""

    def __init__(self, lo: float, hi: float):
        self.lo, self.hi = lo, hi

    def norm(self, mel):
        return (mel - self.lo) / (self.hi - self.lo) * 2.0 - 1.0

    def denorm(self, x):
        return (x + 1.0) / 2.0 * (self.hi - self.lo) + self.lo


class ResidualLayer(nn.Module):
    """Dilated conv, gated tanh*sigmoid, conditioner and step injection, skip out."""

    def __init__(self, channels: int, cond_dim: int, dilation: int):
        super().__init__()
        self.dilation = dilation
        self.step = nn.Linear(channels, channels)
        self.conv = nn.Conv1d(channels, 2 * channels, 3)
        self.cond = nn.Conv1d(cond_dim, 2 * channels, 1)
        self.out = nn.Conv1d(channels, 2 * channels, 1)

    def forward(self, x, cond, step_emb):
        """x: (B, C, F); cond: (B, Dc, F); step_emb: (B, C)."""
        h = x + self.step(step_emb)[:, :, None]
        h = nx.conv1d(h, self.conv.weight, self.conv.bias, dilation=self.dilation)
        h = h + nx.conv1d(cond, self.cond.weight, self.cond.bias)
        gate, filt = h.chunk(2, dim=1)
        h = nx.sigmoid(gate) * torch.tanh(filt)
        h = nx.conv1d(h, self.out.weight, self.out.bias)
        residual, skip = h.chunk(2, dim=1)
        return (x + residual) / math.sqrt(2.0), skip


class Denoiser(nn.Module):
    """WaveNet-style noise predictor over a (B, F, in_dim) signal."""

    def __init__(self, in_dim: int, cond_dim: int, channels: int, layers: int, dilation_cycle: int = 4):
        super().__init__()
        self.channels = channels
        self.inp = nn.Conv1d(in_dim, channels, 1)
        self.step_mlp = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))
        self.layers = nn.ModuleList(
            ResidualLayer(channels, cond_dim, 2 ** (i % dilation_cycle)) for i in range(layers)
        )
        self.skip = nn.Conv1d(channels, channels, 1)
        self.proj = nn.Conv1d(channels, in_dim, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """x_t: (B, F, D); t: (B,) step numbers; cond: (B, F, Dc) -> eps (B, F, D)."""
        if cond.shape[:2] != x_t.shape[:2]:
            raise nx.ShapeError("denoiser", x_t.shape, cond.shape)
        h = F.relu(nx.conv1d(x_t.transpose(1, 2), self.inp.weight, self.inp.bias))
        c = cond.transpose(1, 2)
        emb = self.step_mlp(nx.sinusoid_embed(t, self.channels))
        skips = 0.0
        for layer in self.layers:
            h, s = layer(h, c, emb)
            skips = skips + s
        h = skips / math.sqrt(len(self.layers))
        h = F.relu(nx.conv1d(h, self.skip.weight, self.skip.bias))
        return nx.conv1d(h, self.proj.weight, self.proj.bias).transpose(1, 2)


class MelDecoder(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        d, h = cfg.decoder, cfg.model.hidden
        self.n_mels = cfg.audio.n_mels
        self.schedule = DiffusionSchedule(d.steps, d.beta_min, d.beta_max)
        self.normalizer = MelNormalizer(d.mel_min, d.mel_max)
        self.cond_proj = nn.Linear(2 * h, h)
        self.denoiser = Denoiser(self.n_mels, h, d.channels, d.layers, d.dilation_cycle)
        self.target, self.tolerance, self.data_rms = d.target, d.x0_tolerance, d.data_rms

    def eps(self, x_t: torch.Tensor, t: int, c: torch.Tensor) -> torch.Tensor:
        return self.schedule.noise_estimate(
            lambda x, steps: self.denoiser(x, steps, c), x_t, t, self.target, self.tolerance, self.data_rms
        )

    def condition(self, cond: torch.Tensor, sf: torch.Tensor) -> torch.Tensor:
        """Concatenate the speaker vector onto every frame and project to H."""
        sf = sf[:, None, :].expand(-1, cond.shape[1], -1)
        return self.cond_proj(nx.concat([cond, sf], dim=-1))

    def train_loss(self, mel: torch.Tensor, cond: torch.Tensor, sf: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        """Noise-prediction MSE for log-mel ``mel`` (B, F, 80) at step ``t``."""
        if cond.shape[1] != mel.shape[1]:
            raise nx.ShapeError("denoise_train_step", mel.shape, cond.shape)
        x_t = self.schedule.q_sample(self.normalizer.norm(mel), t, noise)
        return nx.mse(self.eps(x_t, t, self.condition(cond, sf)), noise)

    @torch.no_grad()
    def decode(self, cond: torch.Tensor, sf: torch.Tensor, seed: int) -> torch.Tensor:
        """Ancestral sampling -> log-mel (B, F, 80)."""
        c = self.condition(cond, sf)
        b, frames = cond.shape[:2]
        gen = torch.Generator().manual_seed(int(seed))
        x0 = self.schedule.sample(lambda x, t: self.eps(x, t, c), (b, frames, self.n_mels), gen, clip=1.0)
        return self.normalizer.denorm(x0)
