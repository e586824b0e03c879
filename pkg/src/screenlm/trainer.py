"""Optimization loop, learning-rate schedule and loss-curve instrumentation."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .arscreen import ARConfig, ARDataConfig, ARModel, MixedSequence, collate_mixed, make_ar_example
from .nnet.checkpoint import AR_MAGIC, PTP_MAGIC, save_checkpoint
from .nnet.ptp import PTPConfig, PTPModel, collate
from .patchwork import MaskConfig, assemble_ptp_example
from .render import GlyphAtlas, RenderConfig
from .textcodec import Vocab

METRIC_COLUMNS = ("step", "lr", "mse", "ce", "total", "spike", "plateau")


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimState, lr: float) -> OptimState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(name)
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            if state.weight_decay:
                p.mul_(1 - lr * state.weight_decay)
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 1.5e-4
    min_lr: float = 1e-5
    warmup_steps: int = 50_000
    total_steps: int = 1_000_000
    shape: str = "cosine"  # or "linear"

    def __post_init__(self):
        if self.shape not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup from 0, then cosine to ``min_lr`` or linear to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w, total, peak = schedule.warmup_steps, schedule.total_steps, schedule.peak_lr
    if step < w:
        return peak * step / w
    if total == w:
        return peak
    t = (step - w) / (total - w)
    if schedule.shape == "cosine":
        return schedule.min_lr + (peak - schedule.min_lr) * (1 + math.cos(math.pi * t)) / 2
    return peak * (1 - t)


def ls_slope(values: Sequence[float]) -> float:
    y = np.asarray(values, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    x -= x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


class StabilityMonitor:
    """Rolling loss statistics for spike and plateau flags.

    A spike is a loss above mean + k * std of the preceding ``window`` losses.
    A plateau is a least-squares slope of at least ``-tau`` over the last
    ``plateau_window`` losses.
    """

    def __init__(self, window: int = 100, k: float = 4.0, plateau_window: int = 200, tau: float = 1e-5):
        self.window = window
        self.k = k
        self.plateau_window = plateau_window
        self.tau = tau
        self.recent: deque[float] = deque(maxlen=window)
        self.history: deque[float] = deque(maxlen=plateau_window)
        self.spike = False
        self.plateau = False

    def update(self, loss: float) -> tuple[bool, bool]:
        if len(self.recent) == self.window:
            arr = np.asarray(self.recent)
            self.spike = bool(loss > arr.mean() + self.k * arr.std())
        else:
            self.spike = False
        self.recent.append(loss)
        self.history.append(loss)
        self.plateau = detect_plateau(self)
        return self.spike, self.plateau


def detect_plateau(monitor: StabilityMonitor) -> bool:
    if len(monitor.history) < monitor.plateau_window:
        return False
    return ls_slope(monitor.history) >= -monitor.tau


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int | None = None  # default 5% of steps
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    ckpt_every: int = 0
    nonfinite_patience: int = 3
    monitor_window: int = 100
    spike_k: float = 4.0
    plateau_window: int = 200
    plateau_tau: float = 1e-5

    def schedule_for(self) -> Schedule:
        warm = self.warmup_steps if self.warmup_steps is not None else int(0.05 * self.steps)
        return Schedule(self.peak_lr, self.min_lr, min(warm, self.steps), self.steps, self.schedule)


@dataclass
class MetricRow:
    step: int
    lr: float
    mse: float
    ce: float
    total: float
    spike: bool
    plateau: bool

    def line(self) -> str:
        return "\t".join(
            [str(self.step), repr(self.lr), repr(self.mse), repr(self.ce), repr(self.total), str(int(self.spike)), str(int(self.plateau))]
        )


@dataclass
class TrainResult:
    model: torch.nn.Module
    metrics: list[MetricRow]
    checkpoint: Path | None
    checkpoints: list[Path] = field(default_factory=list)

    def log_text(self) -> str:
        return "\t".join(METRIC_COLUMNS) + "\n" + "".join(m.line() + "\n" for m in self.metrics)


RENDER_KEYS = ("max_patches", "prefix", "eos_black_patch", "newline_symbol")


def render_settings(config: RenderConfig) -> dict[str, str]:
    """Render fields stored in checkpoint configs so inputs can be rebuilt identically."""
    return {f"render.{k}": str(getattr(config, k)) for k in RENDER_KEYS}


def render_config_from(cfg: dict[str, str], base: RenderConfig = RenderConfig()) -> RenderConfig:
    kw = {}
    for k in RENDER_KEYS:
        raw = cfg.get(f"render.{k}")
        if raw is None:
            continue
        kw[k] = int(raw) if k == "max_patches" else raw == "True" if k == "eos_black_patch" else raw
    return replace(base, **kw)


def epoch_order(n: int, seed: int):
    epoch = 0
    while True:
        yield from np.random.default_rng([seed, 7919, epoch]).permutation(n).tolist()
        epoch += 1


def optimize(
    model: torch.nn.Module,
    make_batch: Callable[[int], object],
    loss_fn: Callable[[object], tuple[torch.Tensor, float, float]],
    train: TrainConfig,
    checkpoint_fn: Callable[[int, str], Path] | None = None,
    log: Callable[[MetricRow], None] | None = None,
) -> tuple[list[MetricRow], list[Path]]:
    """Generic loop: batch -> loss -> AdamW, with monitoring, clipping and checkpoint cadence."""
    schedule = train.schedule_for()
    state = OptimState(train.beta1, train.beta2, train.eps, train.weight_decay)
    monitor = StabilityMonitor(train.monitor_window, train.spike_k, train.plateau_window, train.plateau_tau)
    params = dict(model.named_parameters())
    metrics: list[MetricRow] = []
    saved: list[Path] = []
    bad = 0
    for step in range(1, train.steps + 1):
        lr = lr_at(schedule, step)
        batch = make_batch(step)
        model.zero_grad(set_to_none=True)
        total, mse_v, ce_v = loss_fn(batch)
        tv = float(total.detach())
        if not math.isfinite(tv):
            bad += 1
            metrics.append(MetricRow(step, lr, mse_v, ce_v, tv, False, monitor.plateau))
            if log:
                log(metrics[-1])
            if bad >= train.nonfinite_patience:
                path = checkpoint_fn(step, "diagnostic") if checkpoint_fn else None
                raise TrainingAborted(f"non-finite loss for {bad} consecutive steps at step {step}", path)
            continue
        bad = 0
        total.backward()
        if train.clip_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train.clip_norm)
        adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr)
        spike, plateau = monitor.update(tv)
        metrics.append(MetricRow(step, lr, mse_v, ce_v, tv, spike, plateau))
        if log:
            log(metrics[-1])
        if checkpoint_fn and train.ckpt_every and step % train.ckpt_every == 0:
            saved.append(checkpoint_fn(step, "periodic"))
    return metrics, saved


def run_pretraining(
    kind: str,
    corpus: Sequence,
    model_config: PTPConfig | ARConfig,
    train: TrainConfig,
    vocab: Vocab,
    atlas: GlyphAtlas,
    render_config: RenderConfig,
    seed: int = 0,
    mask_config: MaskConfig = MaskConfig(),
    ar_data: ARDataConfig = ARDataConfig(),
    out_dir: str | Path | None = None,
    log: Callable[[MetricRow], None] | None = None,
    model: torch.nn.Module | None = None,
) -> TrainResult:
    """Pre-train a PTP (``kind="ptp"``) or autoregressive (``kind="ar"``) model.

    Deterministic given the seed and corpus order. When ``out_dir`` is set,
    checkpoints land there every ``train.ckpt_every`` steps plus a final one.
    """
    if not corpus:
        raise ValueError("empty corpus")
    torch.manual_seed(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    order = epoch_order(len(corpus), seed)

    if kind == "ptp":
        if render_config.max_patches != model_config.max_patches:
            raise ValueError("render max_patches must match the model's max_patches")
        model = model if model is not None else PTPModel(model_config, seed=seed)
        magic, ext = PTP_MAGIC, "ptpc"

        def make_batch(step):
            rng = np.random.default_rng([seed, step])
            texts = [corpus[next(order)] for _ in range(train.batch_size)]
            exs = [assemble_ptp_example(t, atlas, render_config, mask_config, vocab, rng) for t in texts]
            return collate(exs, vocab.bos_id, vocab.eos_id, vocab.pad_id)

        def loss_fn(batch):
            o = model(batch)
            return o.total, float(o.mse_patch.detach()), float(o.ce_text.detach())

    elif kind == "ar":
        model = model if model is not None else ARModel(model_config, seed=seed)
        magic, ext = AR_MAGIC, "ptpa"
        cache: dict[int, MixedSequence] = {}

        def example(i):
            if i not in cache:
                cache[i] = make_ar_example(corpus[i], vocab, atlas, render_config, ar_data, model_config.channels)
            return cache[i]

        def make_batch(step):
            return collate_mixed([example(next(order)) for _ in range(train.batch_size)], vocab.pad_id)

        def loss_fn(batch):
            o = model.losses(batch)
            return o.total, float(o.mse_patch.detach()), float(o.ce_text.detach())

    else:
        raise ValueError(f"unknown model kind {kind!r}")

    cfg = {"kind": kind, "seed": str(seed), **model_config.to_dict(), **render_settings(render_config)}
    if kind == "ar":
        cfg.update({f"data.{k}": str(v) for k, v in asdict(ar_data).items()})

    def checkpoint_fn(step, why):
        if out is None:
            return None
        name = f"diagnostic_{step:06d}.{ext}" if why == "diagnostic" else f"ckpt_{step:06d}.{ext}"
        path = out / name
        save_checkpoint(model, cfg, step, path, magic)
        return path

    model.train()
    metrics, saved = optimize(model, make_batch, loss_fn, train, checkpoint_fn if out else None, log)
    final = None
    if out is not None:
        final = out / f"final.{ext}"
        save_checkpoint(model, cfg, train.steps, final, magic)
        (out / "metrics.tsv").write_text(TrainResult(model, metrics, None).log_text())
    model.eval()
    return TrainResult(model, metrics, final, saved)
