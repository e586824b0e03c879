"""Tensor building blocks shared by the encoder-decoder and autoregressive models.

Autodiff comes from torch; this module pins down the exact layer definitions
(attention masking, normalizations, gated MLPs, rotary positions, init) and
provides a central-difference gradient checker to validate them.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

INIT_STD = 0.02


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def masked_softmax(scores: torch.Tensor, allowed: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis giving exactly zero weight where ``allowed`` is False."""
    if allowed is not None:
        scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1)
    if allowed is not None:
        weights = weights * allowed
    return weights


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean token-level cross-entropy over positions where ``valid`` is set."""
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = targets.reshape(-1)
    losses = F.cross_entropy(flat, tgt.clamp_min(0), reduction="none")
    if valid is None:
        return losses.mean()
    v = valid.reshape(-1).to(losses.dtype)
    return (losses * v).sum() / v.sum().clamp_min(1)


def mse(pred: torch.Tensor, target: torch.Tensor, rows: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over every pixel of the selected rows (global mean)."""
    sq = (pred - target).pow(2)
    if rows is None:
        return sq.mean()
    r = rows.to(sq.dtype).unsqueeze(-1)
    denom = r.sum() * sq.shape[-1]
    return (sq * r).sum() / denom.clamp_min(1)


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float = 10000.0, dtype=torch.float32):
    inv = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    ang = positions.to(torch.float64)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` [..., L, head_dim] by position-dependent angles."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return rms_norm(x, self.weight, self.eps)


class Attention(nn.Module):
    """Multi-head attention; self- or cross-, with optional causal mask and rotary positions."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"hidden size {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim, bias=bias)
        self.k = nn.Linear(kv_dim, dim, bias=bias)
        self.v = nn.Linear(kv_dim, dim, bias=bias)
        self.o = nn.Linear(dim, dim, bias=bias)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, memory=None, key_mask=None, causal=False, rotary=None):
        memory = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        if rotary is not None:
            cos, sin = rotary
            q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        allowed = None
        if key_mask is not None:
            allowed = key_mask[:, None, None, :]
        if causal:
            lq, lk = scores.shape[-2:]
            tri = torch.ones(lq, lk, dtype=torch.bool, device=x.device).tril()
            allowed = tri if allowed is None else allowed & tri
        w = masked_softmax(scores, allowed)
        if self.keep_weights:
            self.last_weights = w.detach()
        out = (w @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.o(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class GatedMLP(nn.Module):
    """Gated linear unit feed-forward: down(act(gate(x)) * up(x))."""

    def __init__(self, dim: int, hidden: int, act: Callable = gelu, bias: bool = True):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=bias)
        self.up = nn.Linear(dim, hidden, bias=bias)
        self.down = nn.Linear(hidden, dim, bias=bias)
        self.act = act

    def forward(self, x):
        return self.down(self.act(self.gate(x)) * self.up(x))


class ViTBlock(nn.Module):
    """Pre-norm transformer block with bidirectional self-attention."""

    def __init__(self, dim: int, intermediate: int, heads: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, intermediate)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        return x + self.mlp(self.norm2(x))


class CrossDecoderBlock(nn.Module):
    """Causal self-attention, cross-attention onto image states, gated MLP; all pre-norm."""

    def __init__(self, dim: int, intermediate: int, heads: int, memory_dim: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, kv_dim=memory_dim)
        self.norm3 = LayerNorm(dim)
        self.mlp = GatedMLP(dim, intermediate)

    def forward(self, x, memory, memory_mask=None, self_mask=None):
        x = x + self.self_attn(self.norm1(x), key_mask=self_mask, causal=True)
        x = x + self.cross_attn(self.norm2(x), memory=memory, key_mask=memory_mask)
        return x + self.mlp(self.norm3(x))


class LlamaBlock(nn.Module):
    """RMSNorm pre-norm block with rotary causal attention and a SiLU-gated MLP."""

    def __init__(self, dim: int, intermediate: int, heads: int):
        super().__init__()
        if (dim // heads) % 2:
            raise ValueError("rotary attention needs an even head dimension")
        self.norm1 = RMSNorm(dim)
        self.attn = Attention(dim, heads, bias=False)
        self.norm2 = RMSNorm(dim)
        self.mlp = GatedMLP(dim, intermediate, act=F.silu, bias=False)

    def forward(self, x, rotary, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask=key_mask, causal=True, rotary=rotary)
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Truncated normal (std 0.02) weights, zero biases, unit norm gains.

    Parameters are visited in registration order so the result depends only on
    the generator state.
    """
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        with torch.no_grad():
            if isinstance(owner, (LayerNorm, RMSNorm)):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)


def positions_2d(n_rows: int, n_cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine embeddings, row-major over the grid.

    The first half of each vector encodes the row, the second half the column;
    each half is [sin(p * w_k), cos(p * w_k)] with w_k = 10000^(-k / (dim/4)).
    """
    if dim % 4:
        raise ValueError(f"dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def one_axis(pos):
        ang = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    rows, cols = np.meshgrid(np.arange(n_rows, dtype=np.float64), np.arange(n_cols, dtype=np.float64), indexing="ij")
    return np.concatenate([one_axis(rows.ravel()), one_axis(cols.ravel())], axis=1)


# -- gradient checking -------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[tuple[str, torch.Tensor]],
    h: float = 1e-4,
    entries_per_tensor: int = 4,
    seed: int = 0,
    floor: float = 1e-7,
) -> dict[str, float]:
    """Compare autograd gradients with central differences, per named tensor.

    For each tensor the check covers one random direction through the whole
    tensor plus its largest-gradient entry and ``entries_per_tensor - 1``
    random entries. Returns the max relative error for each name. Tensors
    should be float64. ``floor`` bounds the denominator of the relative
    error so gradients near zero are compared in absolute terms.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    rng = np.random.default_rng(seed)
    report = {}

    def central(p, direction):
        with torch.no_grad():
            p.add_(direction, alpha=h)
            up = loss_fn().item()
            p.add_(direction, alpha=-2 * h)
            down = loss_fn().item()
            p.add_(direction, alpha=h)
        return (up - down) / (2 * h)

    for (name, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        errs = []
        d = torch.from_numpy(rng.standard_normal(p.shape)).to(p.dtype)
        d /= d.norm().clamp_min(1e-12)
        errs.append(relative_error((g * d).sum().item(), central(p, d), floor))
        flat_g = g.reshape(-1)
        picks = {int(flat_g.abs().argmax())}
        picks.update(rng.integers(0, p.numel(), size=max(entries_per_tensor - 1, 0)).tolist())
        for idx in sorted(picks):
            e = torch.zeros(p.numel(), dtype=p.dtype)
            e[idx] = 1.0
            errs.append(relative_error(flat_g[idx].item(), central(p, e.view_as(p)), floor))
        report[name] = max(errs)
    return report
