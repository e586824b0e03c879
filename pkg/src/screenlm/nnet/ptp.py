"""Encoder-decoder screenshot LM trained with patch-and-text prediction.

A ViT encoder reads the visible patches (plus CLS), an MAE-style decoder
reconstructs the masked patches, and an autoregressive text decoder recovers
the original text by cross-attending to the encoder states.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..patchwork import PTPExample
from .core import CrossDecoderBlock, LayerNorm, ViTBlock, cross_entropy, init_weights, mse, positions_2d


@dataclass(frozen=True)
class StackConfig:
    hidden: int
    intermediate: int
    heads: int
    layers: int

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class PTPConfig:
    encoder: StackConfig = StackConfig(768, 3072, 12, 12)
    image_decoder: StackConfig = StackConfig(512, 2048, 16, 8)
    text_decoder: StackConfig = StackConfig(768, 3072, 12, 12)
    patch_height: int = 16
    patch_width: int = 16
    channels: int = 3
    vocab_size: int = 50265
    max_patches: int = 512
    max_text_len: int = 320
    use_embedding_layernorm: bool = False
    loss_weight_text: float = 1.0

    @property
    def patch_dim(self) -> int:
        return self.patch_height * self.patch_width * self.channels

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, StackConfig):
                for k, x in asdict(v).items():
                    out[f"{f.name}.{k}"] = str(x)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "PTPConfig":
        kw = {}
        for f in fields(cls):
            if f.name in ("encoder", "image_decoder", "text_decoder"):
                kw[f.name] = StackConfig(
                    *(int(d[f"{f.name}.{k}"]) for k in ("hidden", "intermediate", "heads", "layers"))
                )
            elif f.name in d:
                raw = d[f.name]
                if f.type in ("bool", bool):
                    kw[f.name] = raw == "True"
                elif f.type in ("float", float):
                    kw[f.name] = float(raw)
                else:
                    kw[f.name] = int(raw)
        return cls(**kw)


PTP_CONFIGS = {
    # full-size reference architecture
    "ptp-base": PTPConfig(),
    # gradient-check size
    "ptp-tiny": PTPConfig(
        encoder=StackConfig(32, 64, 2, 2),
        image_decoder=StackConfig(32, 64, 2, 2),
        text_decoder=StackConfig(32, 64, 2, 2),
        vocab_size=300,
        max_patches=16,
        max_text_len=48,
    ),
    # trainable on one CPU core in minutes
    "ptp-desk": PTPConfig(
        encoder=StackConfig(128, 512, 4, 4),
        image_decoder=StackConfig(128, 512, 4, 2),
        text_decoder=StackConfig(128, 512, 4, 2),
        vocab_size=512,
        max_patches=48,
        max_text_len=64,
    ),
}


@dataclass
class PTPBatch:
    patches: torch.Tensor  # [B, n, P] pixels in [0, 1]
    attend: torch.Tensor  # [B, n] bool
    masked: torch.Tensor  # [B, n] bool
    targets: torch.Tensor  # [B, n, P] standardized targets (zero where not masked)
    text_in: torch.Tensor  # [B, T] BOS + tokens
    text_out: torch.Tensor  # [B, T] tokens + EOS
    text_valid: torch.Tensor  # [B, T] bool

    @property
    def size(self) -> int:
        return self.patches.shape[0]


def collate(examples: Sequence[PTPExample], bos_id: int, eos_id: int, pad_id: int, dtype=torch.float32) -> PTPBatch:
    n = examples[0].grid.n
    if any(e.grid.n != n for e in examples):
        raise ValueError("all examples in a batch need the same patch count")
    b, p = len(examples), examples[0].grid.patches.shape[1]
    patches = torch.from_numpy(np.stack([e.grid.patches for e in examples])).to(dtype)
    attend = torch.from_numpy(np.stack([e.attention.attend for e in examples]))
    masked = torch.zeros(b, n, dtype=torch.bool)
    targets = torch.zeros(b, n, p, dtype=dtype)
    for i, e in enumerate(examples):
        idx = e.masked_indices
        if len(idx):
            masked[i, idx] = True
            targets[i, idx] = torch.from_numpy(np.asarray(e.patch_targets)).to(dtype)
    t = max(len(e.original_tokens) for e in examples) + 1
    text_in = torch.full((b, t), pad_id, dtype=torch.long)
    text_out = torch.full((b, t), pad_id, dtype=torch.long)
    valid = torch.zeros(b, t, dtype=torch.bool)
    for i, e in enumerate(examples):
        toks = list(e.original_tokens)
        text_in[i, : len(toks) + 1] = torch.tensor([bos_id] + toks)
        text_out[i, : len(toks) + 1] = torch.tensor(toks + [eos_id])
        valid[i, : len(toks) + 1] = True
    return PTPBatch(patches, attend, masked, targets, text_in, text_out, valid)


@dataclass
class EncoderStates:
    states: torch.Tensor  # [B, 1 + K, D], CLS first
    valid: torch.Tensor  # [B, 1 + K] bool
    kept: torch.Tensor  # [B, K] patch index of each kept state (n for padding)


@dataclass
class PTPOutput:
    patch_predictions: torch.Tensor  # [M, P] predictions at masked patches, batch-major, index order
    full_predictions: torch.Tensor  # [B, n, P]
    text_logits: torch.Tensor  # [B, T, V]
    mse_patch: torch.Tensor
    ce_text: torch.Tensor
    total: torch.Tensor


class PTPModel(nn.Module):
    def __init__(self, config: PTPConfig, seed: int = 0):
        super().__init__()
        self.config = config
        enc, dec, txt = config.encoder, config.image_decoder, config.text_decoder
        self.patch_embed = nn.Linear(config.patch_dim, enc.hidden)
        self.embed_norm = LayerNorm(enc.hidden) if config.use_embedding_layernorm else None
        self.cls_token = nn.Parameter(torch.zeros(1, 1, enc.hidden))
        self.encoder_blocks = nn.ModuleList(ViTBlock(enc.hidden, enc.intermediate, enc.heads) for _ in range(enc.layers))
        self.encoder_norm = LayerNorm(enc.hidden)

        self.decoder_embed = nn.Linear(enc.hidden, dec.hidden)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dec.hidden))
        self.decoder_blocks = nn.ModuleList(ViTBlock(dec.hidden, dec.intermediate, dec.heads) for _ in range(dec.layers))
        self.decoder_norm = LayerNorm(dec.hidden)
        self.decoder_pred = nn.Linear(dec.hidden, config.patch_dim)

        self.token_embed = nn.Embedding(config.vocab_size, txt.hidden)
        self.text_pos = nn.Parameter(torch.zeros(1, config.max_text_len, txt.hidden))
        self.text_blocks = nn.ModuleList(
            CrossDecoderBlock(txt.hidden, txt.intermediate, txt.heads, enc.hidden) for _ in range(txt.layers)
        )
        self.text_norm = LayerNorm(txt.hidden)
        self.lm_head = nn.Linear(txt.hidden, config.vocab_size)

        # fixed positional tables, CLS slot first (all zeros)
        n = config.max_patches
        self.register_buffer("enc_pos", self._pos_table(n, enc.hidden), persistent=False)
        self.register_buffer("dec_pos", self._pos_table(n, dec.hidden), persistent=False)
        init_weights(self, torch.Generator().manual_seed(seed))

    @staticmethod
    def _pos_table(n: int, dim: int) -> torch.Tensor:
        table = np.concatenate([np.zeros((1, dim)), positions_2d(1, n, dim)])
        return torch.from_numpy(table).float()

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    # -- components --

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(patches)
        if self.embed_norm is not None:
            x = self.embed_norm(x)
        return x

    def encode(self, patches: torch.Tensor, keep: torch.Tensor) -> EncoderStates:
        """Run the encoder over CLS plus the patches flagged in ``keep`` [B, n]."""
        b, n, _ = patches.shape
        if n > self.config.max_patches:
            raise ValueError(f"{n} patches exceed max_patches={self.config.max_patches}")
        counts = keep.sum(1)
        if bool((counts == 0).any()):
            raise ValueError("every patch is masked or unattended; encoder input would be empty")
        k = int(counts.max())
        order = torch.argsort((~keep).to(torch.int8), dim=1, stable=True)[:, :k]
        slot_valid = torch.arange(k)[None, :] < counts[:, None]
        kept = torch.where(slot_valid, order, torch.full_like(order, n))
        # select before embedding so dropped patches never enter any matmul
        picked = torch.gather(patches, 1, order[..., None].expand(-1, -1, patches.shape[-1]))
        x = self.embed_patches(picked) + self.enc_pos[1:][order]
        cls = (self.cls_token + self.enc_pos[:1]).expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1)
        valid = torch.cat([torch.ones(b, 1, dtype=torch.bool), slot_valid], dim=1)
        for blk in self.encoder_blocks:
            x = blk(x, key_mask=valid)
        return EncoderStates(self.encoder_norm(x), valid, kept)

    def decode_image(self, enc: EncoderStates, attend: torch.Tensor) -> torch.Tensor:
        """Predict pixels for every patch position; callers gather the masked ones."""
        b, n = attend.shape
        y = self.decoder_embed(enc.states)
        dim = y.shape[-1]
        full = self.mask_token.expand(b, n + 1, dim).clone()
        full = full.scatter(1, enc.kept[..., None].expand(-1, -1, dim), y[:, 1:])
        seq = torch.cat([y[:, :1], full[:, :n]], dim=1) + self.dec_pos[: n + 1]
        key_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), attend], dim=1)
        for blk in self.decoder_blocks:
            seq = blk(seq, key_mask=key_mask)
        return self.decoder_pred(self.decoder_norm(seq))[:, 1:]

    def decode_text(self, enc: EncoderStates, text_in: torch.Tensor, text_valid: torch.Tensor | None = None):
        t = text_in.shape[1]
        if t > self.config.max_text_len:
            raise ValueError(f"text length {t} exceeds max_text_len={self.config.max_text_len}")
        x = self.token_embed(text_in) + self.text_pos[:, :t]
        memory, memory_mask = enc.states[:, 1:], enc.valid[:, 1:]
        for blk in self.text_blocks:
            x = blk(x, memory, memory_mask=memory_mask, self_mask=text_valid)
        return self.lm_head(self.text_norm(x))

    # -- objective --

    def forward(self, batch: PTPBatch) -> PTPOutput:
        keep = batch.attend & ~batch.masked
        enc = self.encode(batch.patches, keep)
        full = self.decode_image(enc, batch.attend)
        logits = self.decode_text(enc, batch.text_in, batch.text_valid)
        return self.loss_from(full, logits, batch)

    def loss_from(self, full: torch.Tensor, logits: torch.Tensor, batch: PTPBatch) -> PTPOutput:
        if bool(batch.masked.any()):
            mse_patch = mse(full, batch.targets, batch.masked)
        else:
            mse_patch = full.sum() * 0.0
        ce_text = cross_entropy(logits, batch.text_out, batch.text_valid)
        total = mse_patch + self.config.loss_weight_text * ce_text
        return PTPOutput(full[batch.masked], full, logits, mse_patch, ce_text, total)


def example_batch(model: PTPModel, example: PTPExample, vocab) -> PTPBatch:
    return collate([example], vocab.bos_id, vocab.eos_id, vocab.pad_id, dtype=model.dtype)


def ptp_loss(example: PTPExample, model: PTPModel, vocab) -> PTPOutput:
    return model(example_batch(model, example, vocab))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def config_by_name(name: str, **overrides) -> PTPConfig:
    try:
        base = PTP_CONFIGS[name]
    except KeyError:
        raise ValueError(f"unknown PTP config {name!r}; choose from {sorted(PTP_CONFIGS)}") from None
    return replace(base, **overrides)
