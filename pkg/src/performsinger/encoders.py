"""Phoneme, pitch, speaker and lip encoders."""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from . import numerics as nx
from .config import RunConfig
from .frontend.inventory import INVENTORY, MIDI_MAX, MIDI_MIN, REST


class EncoderInputError(ValueError):
    pass


class ConvFFN(nn.Module):
    """Two "same"-padded 1-D convolutions with GELU between."""

    def __init__(self, dim: int, filter_size: int, kernel: int):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, filter_size, kernel)
        self.conv2 = nn.Conv1d(filter_size, dim, kernel)

    def forward(self, x):  # x: (B, T, C)
        h = x.transpose(1, 2)
        h = nx.gelu(nx.conv1d(h, self.conv1.weight, self.conv1.bias))
        h = nx.conv1d(h, self.conv2.weight, self.conv2.bias)
        return h.transpose(1, 2)


class FFTBlock(nn.Module):
    """Self-attention + conv feed-forward, each wrapped in residual and LayerNorm."""

    def __init__(self, dim: int, heads: int, filter_size: int, kernel: int, dropout: float):
        super().__init__()
        self.attn = nx.MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = ConvFFN(dim, filter_size, kernel)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        x = self.norm1(x + self.drop(self.attn(x, x, x, mask)))
        return self.norm2(x + self.drop(self.ffn(x)))


class PhonemeEncoder(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        self.vocab = INVENTORY.size
        self.embed = nn.Embedding(self.vocab, m.hidden, padding_idx=0)
        nn.init.normal_(self.embed.weight, std=m.hidden**-0.5)
        with torch.no_grad():
            self.embed.weight[0].zero_()
        self.layers = nn.ModuleList(
            FFTBlock(m.hidden, m.encoder_heads, m.encoder_filter, m.encoder_kernel, m.dropout)
            for _ in range(m.encoder_layers)
        )

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """``ids``: (B, n) -> TF (B, n, H)."""
        if ids.numel() == 0 or ids.shape[-1] < 1:
            raise EncoderInputError("phoneme sequence must be non-empty")
        if int(ids.min()) < 0 or int(ids.max()) >= self.vocab:
            raise EncoderInputError(f"phoneme id outside [0, {self.vocab})")
        x = nx.embedding(ids, self.embed.weight) * self.embed.embedding_dim**0.5
        x = x + nx.sinusoid_table(ids.shape[-1], x.shape[-1])[None]
        mask = None
        if bool((ids == 0).any()):
            keep = ids != 0
            mask = keep[:, None, :].expand(-1, ids.shape[-1], -1)
        for layer in self.layers:
            x = layer(x, mask)
        return x


def pitch_ids(pitches) -> torch.Tensor:
    """Map MIDI numbers / REST to embedding rows: 0 pad, 1..44 = 36..79, 45 = REST."""
    out = []
    for p in pitches:
        if p == REST:
            out.append(MIDI_MAX - MIDI_MIN + 2)
        elif isinstance(p, (int,)) and not isinstance(p, bool) and MIDI_MIN <= p <= MIDI_MAX:
            out.append(p - MIDI_MIN + 1)
        else:
            raise EncoderInputError(f"pitch {p!r} outside [{MIDI_MIN}, {MIDI_MAX}] and not REST")
    return torch.tensor(out, dtype=torch.long)


class PitchEncoder(nn.Module):
    rows = (MIDI_MAX - MIDI_MIN + 1) + 2

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.embed = nn.Embedding(self.rows, cfg.model.hidden, padding_idx=0)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if int(ids.min()) < 0 or int(ids.max()) >= self.rows:
            raise EncoderInputError("pitch id out of range")
        return nx.embedding(ids, self.embed.weight)


def combine_content(tf: torch.Tensor, pf: torch.Tensor) -> torch.Tensor:
    if tf.shape != pf.shape:
        raise nx.ShapeError("combine_content", tf.shape, pf.shape)
    return nx.add(tf, pf)


class SpeakerEncoder(nn.Module):
    """Recurrent d-vector: LSTM over normalized mel, mean-pool, project, L2-normalize."""

    min_frames = 10

    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        self.lo, self.hi = cfg.decoder.mel_min, cfg.decoder.mel_max
        self.rnn = nn.LSTM(cfg.audio.n_mels, m.speaker_hidden, num_layers=m.speaker_layers, batch_first=True)
        self.proj = nn.Linear(m.speaker_hidden, m.hidden)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """``mel``: (B, frames, 80) log-mel -> (B, H) unit vectors."""
        if mel.shape[-2] < self.min_frames:
            raise EncoderInputError(f"reference mel needs >= {self.min_frames} frames, got {mel.shape[-2]}")
        x = (mel - self.lo) / (self.hi - self.lo) * 2.0 - 1.0
        h, _ = self.rnn(x)
        e = self.proj(h.mean(dim=1))
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class ResBlock2d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.stride = stride
        self.conv1 = nn.Conv2d(cin, cout, 3)
        self.conv2 = nn.Conv2d(cout, cout, 3)
        self.skip = nn.Conv2d(cin, cout, 1) if (cin != cout or stride != 1) else None

    def forward(self, x):
        h = nx.gelu(nx.conv2d(x, self.conv1.weight, self.conv1.bias, stride=self.stride))
        h = nx.conv2d(h, self.conv2.weight, self.conv2.bias)
        s = x if self.skip is None else nx.conv2d(x, self.skip.weight, self.skip.bias, stride=self.stride)
        return nx.gelu(h + s)


class VisualEncoder(nn.Module):
    """3-D conv front end followed by a per-frame 2-D residual stack.

    Temporal stride is 1, so ``m`` input frames give ``m`` output rows.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        c = cfg.video.channels
        self.size = cfg.video.size
        self.front = nn.Conv3d(1, c, (5, 7, 7))
        chans = [c, c, 2 * c, 4 * c, 8 * c]
        self.blocks = nn.ModuleList(
            ResBlock2d(chans[i], chans[i + 1], 1 if i == 0 else 2) for i in range(4)
        )
        self.out = nn.Linear(8 * c, cfg.model.hidden)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``frames``: (B, m, h, w) in [0, 1] -> VF (B, m, H)."""
        if frames.dim() != 4 or frames.shape[-2:] != (self.size, self.size):
            raise EncoderInputError(f"lip frames must be (B, m, {self.size}, {self.size}), got {tuple(frames.shape)}")
        b, m = frames.shape[:2]
        x = nx.conv3d(frames[:, None], self.front.weight, self.front.bias, stride=(1, 2, 2))
        x = nx.gelu(x).transpose(1, 2)  # (B, m, C, h/2, w/2)
        x = x.reshape(b * m, *x.shape[2:])
        for block in self.blocks:
            x = block(x)
        x = x.mean(dim=(-2, -1)).reshape(b, m, -1)
        return self.out(x)
