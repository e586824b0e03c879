"""Patch grids, patch/text masking plans, target standardization and PTP example assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .render import GlyphAtlas, RenderConfig, Screenshot, render_line
from .textcodec import Vocab

STANDARDIZE_EPS = 1e-6
SPAN_CUM_WEIGHTS = (0.2, 0.4, 0.6, 0.8, 0.9, 1.0)
MAX_REJECTIONS = 100


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PatchGrid:
    patches: np.ndarray  # [n, p_h * p_w * c], flattened in (row, col, channel) order
    p_h: int
    p_w: int
    c: int = 3

    @property
    def n(self) -> int:
        return self.patches.shape[0]


def split_patches(s: Screenshot | np.ndarray, p_h: int, p_w: int, c: int = 3) -> PatchGrid:
    pixels = s.pixels if isinstance(s, Screenshot) else np.asarray(s)
    h, w = pixels.shape
    if h != p_h:
        raise ValueError(f"screenshot height {h} != patch height {p_h}")
    if w % p_w:
        raise ValueError(f"screenshot width {w} is not a multiple of patch width {p_w}")
    n = w // p_w
    cols = pixels.reshape(p_h, n, p_w).transpose(1, 0, 2)  # [n, p_h, p_w]
    if c > 1:
        cols = np.repeat(cols[..., None], c, axis=-1)
    return PatchGrid(np.ascontiguousarray(cols.reshape(n, -1)), p_h, p_w, c)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Inverse of split_patches; reads channel 0."""
    cube = grid.patches.reshape(grid.n, grid.p_h, grid.p_w, grid.c)[..., 0]
    return np.ascontiguousarray(cube.transpose(1, 0, 2).reshape(grid.p_h, grid.n * grid.p_w))


@dataclass
class PatchMaskPlan:
    masked: frozenset[int]
    spans: list[tuple[int, int]]
    target_rate: float
    seed: int | None = None
    # span lengths as drawn, before any budget truncation
    drawn_lengths: list[int] = field(default_factory=list)

    @property
    def indices(self) -> np.ndarray:
        return np.array(sorted(self.masked), dtype=np.int64)

    def dump(self) -> str:
        return "".join(f"span {s} {l}\n" for s, l in self.spans)

    @classmethod
    def parse(cls, text: str, target_rate: float = float("nan")) -> "PatchMaskPlan":
        spans = []
        for line in text.splitlines():
            if not line.strip():
                continue
            kind, start, length = line.split()
            if kind != "span":
                raise ValueError(f"unexpected record {line!r}")
            spans.append((int(start), int(length)))
        masked = frozenset(i for s, l in spans for i in range(s, s + l))
        return cls(masked, spans, target_rate)


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _leftmost_free_run(free: np.ndarray, length: int) -> tuple[int, int]:
    """Leftmost run of unmasked positions with at least ``length`` slots, else the longest run."""
    best = (0, 0)
    i, n = 0, len(free)
    while i < n:
        if not free[i]:
            i += 1
            continue
        j = i
        while j < n and free[j]:
            j += 1
        if j - i >= length:
            return i, length
        if j - i > best[1]:
            best = (i, j - i)
        i = j
    return best


def span_mask(
    n_maskable: int,
    rate: float,
    max_span: int = 6,
    cum_weights=SPAN_CUM_WEIGHTS,
    rng=None,
    seed: int | None = None,
) -> PatchMaskPlan:
    """Mask exactly round(rate * n_maskable) patches in non-overlapping spans.

    Span lengths are drawn by inverting ``cum_weights``; the last span is cut
    to the remaining budget. Starts are drawn uniformly by rejection; after
    ``MAX_REJECTIONS`` failures the leftmost free run is used instead.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    cum = np.asarray(cum_weights, dtype=np.float64)
    if len(cum) != max_span or np.any(np.diff(cum) <= 0) or not math.isclose(cum[-1], 1.0):
        raise ValueError("cum_weights must be strictly increasing, end at 1 and have max_span entries")
    rng = _as_rng(rng if rng is not None else seed)
    target = round_half_up(rate * n_maskable)
    free = np.ones(n_maskable, dtype=bool)
    spans: list[tuple[int, int]] = []
    drawn: list[int] = []
    remaining = target
    while remaining > 0:
        length = int(np.searchsorted(cum, rng.random(), side="right")) + 1
        drawn.append(length)
        length = min(length, remaining)
        start = None
        for _ in range(MAX_REJECTIONS):
            s = int(rng.integers(0, n_maskable - length + 1))
            if free[s : s + length].all():
                start = s
                break
        if start is None:
            start, length = _leftmost_free_run(free, length)
        free[start : start + length] = False
        spans.append((start, length))
        remaining -= length
    spans.sort()
    masked = frozenset(np.flatnonzero(~free).tolist())
    return PatchMaskPlan(masked, spans, rate, seed, drawn)


def uniform_mask(n_maskable: int, rate: float, rng=None, seed: int | None = None) -> PatchMaskPlan:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    rng = _as_rng(rng if rng is not None else seed)
    target = round_half_up(rate * n_maskable)
    idx = sorted(rng.choice(n_maskable, size=target, replace=False).tolist())
    return PatchMaskPlan(frozenset(idx), [(i, 1) for i in idx], rate, seed, [1] * target)


@dataclass
class TextMaskPlan:
    masked_positions: frozenset[int]
    corrupted: list[int]
    original: list[int]


def merge_masks(tokens, masked_positions, mask_id: int) -> list[int]:
    out = []
    for i, t in enumerate(tokens):
        if i in masked_positions:
            if not out or out[-1] != mask_id or (i - 1) not in masked_positions:
                out.append(mask_id)
        else:
            out.append(t)
    return out


def mask_text(tokens, rate: float, mask_id: int, rng=None) -> TextMaskPlan:
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot mask an empty token sequence")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    rng = _as_rng(rng)
    k = round_half_up(rate * len(tokens))
    positions = frozenset(rng.choice(len(tokens), size=k, replace=False).tolist())
    return TextMaskPlan(positions, merge_masks(tokens, positions, mask_id), tokens)


def standardize_patch(x: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Zero-mean, unit-variance rescaling of one patch (population variance).

    Works on the last axis, so a stack of patches can be passed at once.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    # a rounded mean can differ from a constant patch's value by an ulp; pin those to exact zeros
    flat = x.max(axis=-1, keepdims=True) == x.min(axis=-1, keepdims=True)
    return np.where(flat, 0.0, x - mean) / np.sqrt(var + eps)


def patch_moments(x: np.ndarray, eps: float = STANDARDIZE_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Mean and stabilized std used by standardize_patch, for undoing it."""
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=-1), np.sqrt(x.var(axis=-1) + eps)


@dataclass
class AttentionMask:
    attend: np.ndarray  # bool [n]

    def with_cls(self) -> np.ndarray:
        return np.concatenate([[True], self.attend])


def attention_mask(grid: PatchGrid | int, eos_patch_index: int | None) -> AttentionMask:
    n = grid if isinstance(grid, int) else grid.n
    attend = np.ones(n, dtype=bool)
    if eos_patch_index is not None:
        if not 0 <= eos_patch_index < n:
            raise ValueError(f"eos_patch_index {eos_patch_index} outside [0, {n})")
        attend[eos_patch_index + 1 :] = False
    return attend_from(attend)


def attend_from(attend) -> AttentionMask:
    return AttentionMask(np.asarray(attend, dtype=bool))


def maskable_count(screenshot: Screenshot) -> int:
    """Patches eligible for masking: everything before the EOS patch / trailing whites."""
    if screenshot.eos_patch_index is not None:
        return screenshot.eos_patch_index
    return screenshot.patches_used


@dataclass(frozen=True)
class MaskConfig:
    patch_rate: float = 0.10
    text_rate: float = 0.25
    span: bool = True
    max_span: int = 6
    cum_weights: tuple[float, ...] = SPAN_CUM_WEIGHTS
    channels: int = 3


@dataclass
class PTPExample:
    original_tokens: list[int]
    text_plan: TextMaskPlan
    screenshot: Screenshot
    grid: PatchGrid
    patch_plan: PatchMaskPlan
    attention: AttentionMask
    patch_targets: np.ndarray  # [len(patch_plan.masked), p_h * p_w * c], rows in sorted index order

    @property
    def masked_indices(self) -> np.ndarray:
        return self.patch_plan.indices


def plan_patches(n_maskable: int, mask_config: MaskConfig, rng) -> PatchMaskPlan:
    if mask_config.span:
        return span_mask(n_maskable, mask_config.patch_rate, mask_config.max_span, mask_config.cum_weights, rng)
    return uniform_mask(n_maskable, mask_config.patch_rate, rng)


def assemble_ptp_example(
    text: str,
    atlas: GlyphAtlas,
    render_config: RenderConfig,
    mask_config: MaskConfig,
    tokenizer: Vocab,
    rng,
) -> PTPExample:
    rng = _as_rng(rng)
    tokens = tokenizer.encode(text)
    if not tokens:
        raise ValueError("text produced no tokens")
    text_plan = mask_text(tokens, mask_config.text_rate, tokenizer.mask_id, rng)
    corrupted_text = tokenizer.decode(text_plan.corrupted)
    shot = render_line(corrupted_text, atlas, render_config)
    grid = split_patches(shot, render_config.line_height, render_config.patch_width, mask_config.channels)
    attn = attention_mask(grid, shot.eos_patch_index)
    patch_plan = plan_patches(maskable_count(shot), mask_config, rng)
    targets = standardize_patch(grid.patches[patch_plan.indices]) if patch_plan.masked else np.zeros(
        (0, grid.patches.shape[1])
    )
    return PTPExample(tokens, text_plan, shot, grid, patch_plan, attn, targets.astype(np.float32))


def overlay_masked(screenshot: Screenshot, plan: PatchMaskPlan, level: float = 0.5) -> np.ndarray:
    """Copy of the screenshot pixels with masked patches painted at ``level``."""
    pixels = screenshot.pixels.copy()
    pw = screenshot.patch_width
    for i in plan.masked:
        pixels[:, i * pw : (i + 1) * pw] = level
    return pixels
