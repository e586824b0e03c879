"""Decoder-only screenshot LM over interleaved patch and token elements."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .nnet.core import LlamaBlock, RMSNorm, cross_entropy, init_weights, mse, rotary_tables
from .patchwork import split_patches, standardize_patch
from .render import Screenshot, render_line
from .textcodec import N_BYTES, PAD_ID, SPECIAL_TOKENS, Vocab

PATCH, TOKEN = 0, 1


@dataclass(frozen=True)
class ARConfig:
    hidden: int = 1024
    intermediate: int = 2816
    heads: int = 16
    layers: int = 24
    patch_height: int = 16
    patch_width: int = 16
    channels: int = 3
    vocab_size: int = 32000
    max_seq: int = 1024
    rotary_base: float = 10000.0
    loss_weight_text: float = 1.0
    patch_prediction: bool = True  # False = the "w/o patch pred" ablation

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def patch_dim(self) -> int:
        return self.patch_height * self.patch_width * self.channels

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ARConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                raw = d[f.name]
                kw[f.name] = raw == "True" if f.type == "bool" else float(raw) if f.type == "float" else int(raw)
        return cls(**kw)


AR_CONFIGS = {
    "ar-380m": ARConfig(1024, 2816, 16, 24),
    "ar-1.3b": ARConfig(2048, 5504, 16, 24),
    # desk-scale analogs keeping intermediate/hidden ~= 2.75
    "ar-tiny": ARConfig(64, 160, 4, 4, vocab_size=512, max_seq=256),
    "ar-small": ARConfig(256, 704, 8, 8, vocab_size=4096, max_seq=512),
}


def ar_config_by_name(name: str, **overrides) -> ARConfig:
    try:
        base = AR_CONFIGS[name]
    except KeyError:
        raise ValueError(f"unknown AR config {name!r}; choose from {sorted(AR_CONFIGS)}") from None
    return replace(base, **overrides)


@dataclass
class MixedSequence:
    kinds: np.ndarray  # int8 [L], PATCH or TOKEN
    token_ids: np.ndarray  # int64 [L], -1 at patch elements
    patches: np.ndarray  # float32 [L, P], zeros at token elements
    attend: np.ndarray  # bool [L]; False for trailing blank patches
    m_s: int = 0
    row_width: int = 0
    n_patches: int = 0

    def __len__(self):
        return len(self.kinds)

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]

    def append_tokens(self, ids: Sequence[int]) -> "MixedSequence":
        k = len(ids)
        return MixedSequence(
            kinds=np.concatenate([self.kinds, np.full(k, TOKEN, dtype=np.int8)]),
            token_ids=np.concatenate([self.token_ids, np.asarray(ids, dtype=np.int64)]),
            patches=np.concatenate([self.patches, np.zeros((k, self.patch_dim), dtype=np.float32)]),
            attend=np.concatenate([self.attend, np.ones(k, dtype=bool)]),
            m_s=self.m_s,
            row_width=self.row_width,
            n_patches=self.n_patches,
        )

    def trace(self, vocab: Vocab | None = None) -> str:
        """One line per element: ``P``, ``T <id>`` or ``S <special>``."""
        lines = []
        for kind, tid in zip(self.kinds, self.token_ids):
            if kind == PATCH:
                lines.append("P")
            elif vocab is not None and vocab.is_special(int(tid)):
                lines.append(f"S {SPECIAL_TOKENS[int(tid) - N_BYTES]}")
            else:
                lines.append(f"T {int(tid)}")
        return "\n".join(lines) + "\n"


def tokens_only(ids: Sequence[int], patch_dim: int) -> MixedSequence:
    k = len(ids)
    return MixedSequence(
        kinds=np.full(k, TOKEN, dtype=np.int8),
        token_ids=np.asarray(ids, dtype=np.int64).reshape(k),
        patches=np.zeros((k, patch_dim), dtype=np.float32),
        attend=np.ones(k, dtype=bool),
    )


def build_mixed_input(
    screenshot: Screenshot | None,
    following_tokens: Sequence[int],
    vocab: Vocab,
    row_width: int,
    channels: int = 3,
    m_s: int = 0,
    patch_height: int = 16,
) -> MixedSequence:
    """Lay out <img>, patch rows each closed by an image-newline token, </img>, then text tokens."""
    grid = split_patches(screenshot, screenshot.height, screenshot.patch_width, channels)
    n, p = grid.patches.shape
    if row_width <= 0 or n % row_width:
        raise ValueError(f"{n} patches do not split into rows of {row_width}")
    kinds, ids, rows, attend = [TOKEN], [vocab.img_begin_id], [np.zeros(p, np.float32)], [True]
    # trailing blank patches are kept as elements but never attended to
    used = screenshot.patches_used if screenshot.eos_patch_index is None else screenshot.eos_patch_index + 1
    for r in range(n // row_width):
        for i in range(r * row_width, (r + 1) * row_width):
            kinds.append(PATCH)
            ids.append(-1)
            rows.append(grid.patches[i].astype(np.float32))
            attend.append(i < max(used, 1))
        kinds.append(TOKEN)
        ids.append(vocab.img_nl_id)
        rows.append(np.zeros(p, np.float32))
        attend.append(True)
    kinds.append(TOKEN)
    ids.append(vocab.img_end_id)
    rows.append(np.zeros(p, np.float32))
    attend.append(True)
    seq = MixedSequence(
        kinds=np.asarray(kinds, dtype=np.int8),
        token_ids=np.asarray(ids, dtype=np.int64),
        patches=np.stack(rows),
        attend=np.asarray(attend, dtype=bool),
        m_s=m_s,
        row_width=row_width,
        n_patches=n,
    )
    return seq.append_tokens(list(following_tokens))


@dataclass
class ARBatch:
    kinds: torch.Tensor  # [B, L] long
    token_ids: torch.Tensor  # [B, L] long, pad where not a token
    patches: torch.Tensor  # [B, L, P]
    attend: torch.Tensor  # [B, L] bool (False also for padding)
    targets: torch.Tensor  # [B, L, P] standardized pixels of element i+1 (row i)
    patch_next: torch.Tensor  # [B, L] bool: element i+1 exists and is a patch
    token_next: torch.Tensor  # [B, L] bool: element i+1 exists and is a token
    next_ids: torch.Tensor  # [B, L] long


def collate_mixed(seqs: Sequence[MixedSequence], pad_id: int, dtype=torch.float32, loss_from: Sequence[int] | None = None) -> ARBatch:
    """Pad sequences into a batch. ``loss_from[b]`` restricts CE/MSE to predictions of elements >= that index."""
    b = len(seqs)
    length = max(len(s) for s in seqs)
    p = seqs[0].patch_dim
    kinds = torch.full((b, length), TOKEN, dtype=torch.long)
    ids = torch.full((b, length), pad_id, dtype=torch.long)
    patches = torch.zeros(b, length, p, dtype=dtype)
    attend = torch.zeros(b, length, dtype=torch.bool)
    targets = torch.zeros(b, length, p, dtype=dtype)
    patch_next = torch.zeros(b, length, dtype=torch.bool)
    token_next = torch.zeros(b, length, dtype=torch.bool)
    next_ids = torch.full((b, length), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        n = len(s)
        k = torch.from_numpy(s.kinds.astype(np.int64))
        kinds[i, :n] = k
        tid = torch.from_numpy(s.token_ids)
        ids[i, :n] = torch.where(k == TOKEN, tid, torch.full_like(tid, pad_id))
        patches[i, :n] = torch.from_numpy(s.patches).to(dtype)
        attend[i, :n] = torch.from_numpy(s.attend)
        start = 1 if loss_from is None else max(int(loss_from[i]), 1)
        for j in range(start, n):
            if s.kinds[j] == PATCH:
                patch_next[i, j - 1] = True
            else:
                token_next[i, j - 1] = True
                next_ids[i, j - 1] = int(s.token_ids[j])
        pidx = np.flatnonzero(s.kinds[1:] == PATCH)
        if len(pidx):
            targets[i, pidx] = torch.from_numpy(standardize_patch(s.patches[pidx + 1])).to(dtype)
    return ARBatch(kinds, ids, patches, attend, targets, patch_next, token_next, next_ids)


@dataclass
class ARLosses:
    mse_patch: torch.Tensor
    ce_text: torch.Tensor
    total: torch.Tensor
    pixel_predictions: torch.Tensor  # [B, L, P]
    logits: torch.Tensor  # [B, L, V]


class ARModel(nn.Module):
    def __init__(self, config: ARConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, config.hidden)
        self.patch_proj = nn.Linear(config.patch_dim, config.hidden)
        self.blocks = nn.ModuleList(
            LlamaBlock(config.hidden, config.intermediate, config.heads) for _ in range(config.layers)
        )
        self.norm = RMSNorm(config.hidden)
        self.pixel_head = nn.Linear(config.hidden, config.patch_dim)
        self.lm_head = nn.Linear(config.hidden, config.vocab_size, bias=False)
        init_weights(self, torch.Generator().manual_seed(seed))

    @property
    def dtype(self):
        return self.patch_proj.weight.dtype

    def reinit_patch_layers(self, seed: int) -> None:
        """Fresh patch projection and pixel head, e.g. after loading a text-only model."""
        g = torch.Generator().manual_seed(seed)
        init_weights(self.patch_proj, g)
        init_weights(self.pixel_head, g)

    def hidden_states(self, kinds, token_ids, patches, attend):
        b, length = kinds.shape
        if length > self.config.max_seq:
            raise ValueError(f"sequence length {length} exceeds max_seq={self.config.max_seq}")
        tok = self.token_embed(token_ids.clamp_min(0))
        pat = self.patch_proj(patches)
        x = torch.where((kinds == PATCH)[..., None], pat, tok)
        rot = rotary_tables(torch.arange(length), self.config.hidden // self.config.heads, self.config.rotary_base, x.dtype)
        for blk in self.blocks:
            x = blk(x, rot, key_mask=attend)
        return self.norm(x)

    def forward(self, batch: ARBatch):
        h = self.hidden_states(batch.kinds, batch.token_ids, batch.patches, batch.attend)
        return self.pixel_head(h), self.lm_head(h)

    def losses(self, batch: ARBatch) -> ARLosses:
        pixels, logits = self(batch)
        return ar_losses_from(pixels, logits, batch, self.config)


def ar_losses_from(pixels, logits, batch: ARBatch, config: ARConfig) -> ARLosses:
    if config.patch_prediction and bool(batch.patch_next.any()):
        mse_patch = mse(pixels, batch.targets, batch.patch_next)
    else:
        mse_patch = pixels.sum() * 0.0
    if bool(batch.token_next.any()):
        ce = cross_entropy(logits, batch.next_ids, batch.token_next)
    else:
        ce = logits.sum() * 0.0
    total = mse_patch + config.loss_weight_text * ce
    return ARLosses(mse_patch, ce, total, pixels, logits)


def _batch(model: ARModel, seq: MixedSequence, pad_id: int, loss_from=None) -> ARBatch:
    return collate_mixed([seq], pad_id, model.dtype, None if loss_from is None else [loss_from])


def ar_forward(seq: MixedSequence, model: ARModel, pad_id: int = PAD_ID):
    """Per-position (pixel prediction, token logits) for one sequence."""
    pixels, logits = model(_batch(model, seq, pad_id))
    return pixels[0], logits[0]


def ar_loss(seq: MixedSequence, model: ARModel, pad_id: int = PAD_ID) -> ARLosses:
    return model.losses(_batch(model, seq, pad_id))


def patch_reconstruction_mse(model: ARModel, seqs: Sequence[MixedSequence], pad_id: int = PAD_ID) -> float:
    """Next-patch MSE regardless of whether the model was trained with patch prediction."""
    batch = collate_mixed(seqs, pad_id, model.dtype)
    with torch.no_grad():
        pixels, _ = model(batch)
        return float(mse(pixels, batch.targets, batch.patch_next))


def perplexity_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> float:
    """exp(mean CE) of ``targets`` [N] under ``logits`` [N, V]."""
    ce = torch.nn.functional.cross_entropy(logits.double(), targets, reduction="mean")
    return math.exp(float(ce))


def perplexity(model: ARModel, context: MixedSequence, eval_tokens: Sequence[int], pad_id: int = PAD_ID) -> float:
    """Perplexity of ``eval_tokens`` appended after ``context``; context positions carry no loss."""
    if len(eval_tokens) == 0:
        raise ValueError("eval_tokens must be non-empty")
    if len(context) == 0:
        raise ValueError("context needs at least one element to predict the first eval token from")
    seq = context.append_tokens(eval_tokens)
    with torch.no_grad():
        _, logits = ar_forward(seq, model, pad_id)
    start = len(context) - 1
    return perplexity_from_logits(logits[start : start + len(eval_tokens)], torch.as_tensor(list(eval_tokens)))


def batch_perplexity(model: ARModel, contexts: Sequence[MixedSequence], evals: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> float:
    """Corpus perplexity: exp of the token-weighted mean CE over all eval tokens."""
    total, count = 0.0, 0
    for ctx, ev in zip(contexts, evals):
        seq = ctx.append_tokens(ev)
        batch = collate_mixed([seq], pad_id, model.dtype, loss_from=[len(ctx)])
        with torch.no_grad():
            _, logits = model(batch)
            ce = cross_entropy(logits, batch.next_ids, batch.token_next)
        total += float(ce) * len(ev)
        count += len(ev)
    return math.exp(total / count)


def generate(
    model: ARModel,
    context: MixedSequence,
    max_new: int,
    temperature: float = 0.0,
    seed: int = 0,
    stop_id: int | None = None,
    pad_id: int = PAD_ID,
) -> list[int]:
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    g = torch.Generator().manual_seed(seed)
    out: list[int] = []
    seq = context
    with torch.no_grad():
        for _ in range(max_new):
            _, logits = ar_forward(seq, model, pad_id)
            last = logits[-1]
            if temperature == 0:
                nxt = int(torch.argmax(last))
            else:
                probs = torch.softmax(last.double() / temperature, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=g))
            out.append(nxt)
            if stop_id is not None and nxt == stop_id:
                break
            seq = seq.append_tokens([nxt])
    return out


@dataclass(frozen=True)
class ARDataConfig:
    m_s: int = 24  # tokens rendered into the screenshot
    m_t: int = 24  # tokens following it as text
    n_patches: int = 32
    row_width: int = 32


def make_ar_example(item, vocab: Vocab, atlas, render_config, data: ARDataConfig, channels: int = 3) -> MixedSequence:
    """Screenshot of the first ``m_s`` tokens followed by the next ``m_t`` tokens.

    ``item`` is either one string, split by token count, or an explicit
    ``(screenshot_text, following_text)`` pair.
    """
    if isinstance(item, tuple):
        screen_text, follow = item
        follow_ids = vocab.encode(follow)[: data.m_t]
        m_s = len(vocab.encode(screen_text))
    else:
        ids = vocab.encode(item)
        screen_text = vocab.decode(ids[: data.m_s])
        follow_ids = ids[data.m_s : data.m_s + data.m_t]
        m_s = min(len(ids), data.m_s)
    shot = render_line(screen_text, atlas, render_config)
    return build_mixed_input(shot, follow_ids, vocab, data.row_width, channels, m_s=m_s)


def blank_like(seq: MixedSequence) -> MixedSequence:
    """Same layout with every patch replaced by white, for the no-information control."""
    patches = seq.patches.copy()
    is_patch = seq.kinds == PATCH
    patches[is_patch] = 1.0
    attend = seq.attend.copy()
    return replace(seq, patches=patches, attend=attend)
