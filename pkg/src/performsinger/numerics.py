"""Dense float64 tensor substrate.

Thin, shape-checked wrappers over torch primitives, a masked attention kernel,
a finite-difference gradient checker and the ``TNSR`` binary tensor format.
Autograd is torch's; every op here is differentiable w.r.t. each input that
has ``requires_grad`` set.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

_debug = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes))


class NonFiniteError(FloatingPointError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle finite-value assertions on every primitive's output."""
    global _debug
    _debug = bool(enabled)


def _out(op: str, t: torch.Tensor) -> torch.Tensor:
    if _debug and not torch.isfinite(t).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    return t


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).requires_grad_(requires_grad)


# ---------------------------------------------------------------- primitives


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape)
    return _out("matmul", a @ b)


def _same_pad(kernel: int, dilation: int = 1) -> tuple[int, int]:
    total = dilation * (kernel - 1)
    return total // 2, total - total // 2


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, dilation: int = 1) -> torch.Tensor:
    """Stride-1 zero-padded "same" convolution over (batch, channels, time)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    left, right = _same_pad(weight.shape[-1], dilation)
    x = F.pad(x, (left, right))
    return _out("conv1d", F.conv1d(x, weight, bias, dilation=dilation))


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw = weight.shape[-2:]
    return _out("conv2d", F.conv2d(x, weight, bias, stride=stride, padding=(kh // 2, kw // 2)))


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride=(1, 1, 1)) -> torch.Tensor:
    if x.dim() != 5 or weight.dim() != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv3d", x.shape, weight.shape)
    kt, kh, kw = weight.shape[-3:]
    return _out("conv3d", F.conv3d(x, weight, bias, stride=stride, padding=(kt // 2, kh // 2, kw // 2)))


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError("embedding", ids.shape, table.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError("embedding", ids.shape, table.shape)
    return _out("embedding", F.embedding(ids, table))


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    return _out("layer_norm", F.layer_norm(x, x.shape[-1:], gamma, beta, eps))


def softmax(x: torch.Tensor) -> torch.Tensor:
    return _out("softmax", torch.softmax(x, dim=-1))


def gelu(x: torch.Tensor) -> torch.Tensor:
    return _out("gelu", F.gelu(x))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return _out("sigmoid", torch.sigmoid(x))


def dropout(x: torch.Tensor, rate: float, seed: int, training: bool = True) -> torch.Tensor:
    """Inverted dropout drawing its mask from a generator seeded per call."""
    if rate <= 0.0 or not training:
        return x
    if rate >= 1.0:
        return x * 0.0
    gen = torch.Generator().manual_seed(int(seed))
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate
    return _out("dropout", x * keep / (1.0 - rate))


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    return _out("mse", ((pred - target) ** 2).mean())


def bce(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if prob.shape != target.shape:
        raise ShapeError("bce", prob.shape, target.shape)
    return _out("bce", F.binary_cross_entropy(prob, target))


def bce_with_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.shape != target.shape:
        raise ShapeError("bce", logits.shape, target.shape)
    return _out("bce", F.binary_cross_entropy_with_logits(logits, target))


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _out("add", a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _out("mul", a * b)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim():
            raise ShapeError("concat", ref.shape, t.shape)
        d = dim % ref.dim()
        if any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != d):
            raise ShapeError("concat", ref.shape, t.shape)
    return torch.cat(list(tensors), dim=dim)


def transpose(x: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    return x.transpose(dim0, dim1)


def sinusoid_table(length: int, dim: int, offset: int = 0) -> torch.Tensor:
    """Standard sin/cos position (or step) encoding, ``length x dim``."""
    pos = torch.arange(offset, offset + length, dtype=DTYPE)[:, None]
    return sinusoid_embed(pos[:, 0], dim)


def sinusoid_embed(values: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1))
    angles = values.to(DTYPE)[:, None] * freqs[None, :]
    out = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


# ----------------------------------------------------------------- attention


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
    heads: int = 1,
    diagnostics: dict | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean ``n_q x n_k`` (True = attend). Rows with no admissible
    key produce zeros and increment ``diagnostics["masked_rows"]``.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    if heads < 1 or d % heads:
        raise ShapeError("attention", q.shape, (heads,))
    n_q, n_k = q.shape[-2], k.shape[-2]
    if mask is not None and tuple(mask.shape[-2:]) != (n_q, n_k):
        raise ShapeError("attention", q.shape, k.shape, mask.shape)

    lead = q.shape[:-2]
    dh = d // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(dh)
    dead = None
    if mask is not None:
        m = mask.unsqueeze(-3)
        scores = scores.masked_fill(~m, float("-inf"))
        dead = ~mask.any(dim=-1)
        if bool(dead.any()):
            if diagnostics is not None:
                diagnostics["masked_rows"] = diagnostics.get("masked_rows", 0) + int(dead.sum())
            scores = scores.masked_fill(dead[..., None, :, None], 0.0)
        else:
            dead = None
    weights = torch.softmax(scores, dim=-1)
    if dead is not None:
        weights = weights.masked_fill(dead[..., None, :, None], 0.0)
    out = (weights @ vh).transpose(-3, -2).reshape(*lead, n_q, d)
    return _out("attention", out)


class MultiHeadAttention(torch.nn.Module):
    """Projected multi-head attention built on :func:`attention`."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError("attention", (dim,), (heads,))
        self.heads = heads
        self.q = torch.nn.Linear(dim, dim)
        self.k = torch.nn.Linear(dim, dim)
        self.v = torch.nn.Linear(dim, dim)
        self.o = torch.nn.Linear(dim, dim)
        self.diagnostics: dict = {"masked_rows": 0}

    def forward(self, query, key, value, mask=None):
        out = attention(self.q(query), self.k(key), self.v(value), mask, self.heads, self.diagnostics)
        return self.o(out)


# ------------------------------------------------------------ gradient check


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-5,
    wrt: Sequence[torch.Tensor] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max of |analytic - central difference| / max(1, |central difference|).

    ``fn(*inputs)`` must return a scalar. ``wrt`` lists the tensors to perturb
    (default: ``inputs``); it may include module parameters that ``fn``
    closes over. ``max_entries`` samples that many entries per tensor.
    """
    if not 1e-7 < step < 1e-3:
        raise ValueError(f"grad_check step {step} outside (1e-7, 1e-3)")
    targets = list(inputs if wrt is None else wrt)
    for t in list(inputs) + targets:
        if not torch.isfinite(t).all():
            raise NonFiniteError("grad_check: non-finite input")

    saved = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad_(True)
        t.grad = None
    out = fn(*inputs)
    if out.numel() != 1:
        raise ShapeError("grad_check", out.shape, ())
    grads = torch.autograd.grad(out, targets, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(targets, grads)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(targets, grads):
            idx = np.arange(t.numel())
            if max_entries is not None and t.numel() > max_entries:
                idx = rng.choice(t.numel(), size=max_entries, replace=False)
            for i in idx:
                pos = np.unravel_index(int(i), tuple(t.shape)) if t.dim() else ()
                orig = t.data[pos].item()
                t.data[pos] = orig + step
                plus = fn(*inputs).item()
                t.data[pos] = orig - step
                minus = fn(*inputs).item()
                t.data[pos] = orig
                fd = (plus - minus) / (2 * step)
                err = abs(g[pos].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    for t, flag in zip(targets, saved):
        t.requires_grad_(flag)
    return worst


# --------------------------------------------------------------- TNSR format

_MAGIC = b"TNSR"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path: str | Path, value, dtype_code: int = 1) -> None:
    arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<B", dtype_code))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype_code]).tobytes())


def load_tensor(path: str | Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a TNSR file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    off = 8 + 4 * rank
    (code,) = struct.unpack_from("<B", raw, off)
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(raw, dtype=_DTYPES[code], count=count, offset=off + 1)
    if data.size * data.itemsize != len(raw) - off - 1:
        raise ValueError(f"{path}: payload size mismatch")
    return torch.from_numpy(data.astype(np.float64).reshape(dims))
