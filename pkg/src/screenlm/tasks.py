"""Fine-tuning on rendered tasks: encoder-only heads, label-text generation, metrics and grid search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .nnet.checkpoint import Checkpoint, load_into, snapshot
from .nnet.core import cross_entropy
from .nnet.ptp import EncoderStates, PTPConfig, PTPModel
from .patchwork import attention_mask, split_patches
from .render import GlyphAtlas, RenderConfig, Screenshot, render_line
from .textcodec import Vocab
from .trainer import OptimState, Schedule, adamw_step, epoch_order, lr_at

KINDS = ("classification", "regression", "seq2seq")
METRICS = ("accuracy", "f1", "matthews", "spearman")
MODES = ("encoder_only", "s2s")

# label words per benchmark task for generation-style fine-tuning
LABEL_TEXTS = {
    "mnli": ("yes", "maybe", "no"),
    "qnli": ("yes", "no"),
    "qqp": ("yes", "no"),
    "mrpc": ("yes", "no"),
    "rte": ("yes", "no"),
    "cola": ("yes", "no"),
    "sst2": ("good", "bad"),
    "stsb": tuple(f"{i / 5:.1f}" for i in range(26)),
}

STSB_STEP = Decimal("0.2")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_classes: int = 2
    metric: str = "accuracy"
    label_texts: tuple[str, ...] = ()
    pair_task: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if bool(self.label_texts) != (self.kind == "seq2seq"):
            raise ValueError("label_texts must be given exactly for seq2seq tasks")
        if self.kind == "regression" and self.metric != "spearman":
            raise ValueError("regression tasks are scored with spearman")
        if self.kind == "classification" and self.metric == "spearman":
            raise ValueError("classification tasks need accuracy, f1 or matthews")
        if self.kind == "seq2seq" and not self.numeric and len(set(self.label_texts)) != len(self.label_texts):
            raise ValueError("label_texts must be distinct")

    @property
    def numeric(self) -> bool:
        """Seq2seq with number-valued labels (scored by rank correlation)."""
        return self.kind == "regression" or (self.kind == "seq2seq" and self.metric == "spearman")

    @property
    def n_outputs(self) -> int:
        return 1 if self.kind == "regression" else self.n_classes

    def as_seq2seq(self, label_texts: Sequence[str]) -> "TaskSpec":
        """Same task, predicted by generating one of ``label_texts``."""
        texts = tuple(label_texts)
        if self.kind == "classification" and len(texts) != self.n_classes:
            raise ValueError(f"need {self.n_classes} label texts, got {len(texts)}")
        return replace(self, kind="seq2seq", label_texts=texts, n_classes=len(texts))


@dataclass(frozen=True)
class GridSpec:
    learning_rates: tuple[float, ...] = (1e-3, 3e-3)
    batch_sizes: tuple[int, ...] = (16,)
    steps: tuple[int, ...] = (600,)
    seeds: tuple[int, ...] = (42,)
    eval_every: int = 50
    warmup_steps: int = 30
    weight_decay: float = 0.01
    clip_norm: float = 1.0

    def __post_init__(self):
        for name in ("learning_rates", "batch_sizes", "steps", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"grid field {name} is empty")
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")

    @classmethod
    def reference(cls) -> "GridSpec":
        """Full-scale grid (GLUE sweep values)."""
        return cls((1e-5, 3e-5, 5e-5), (32, 64, 256), (8000, 15000, 30000), (42, 43, 44), eval_every=500, warmup_steps=100)

    def cells(self):
        for lr in self.learning_rates:
            for b in self.batch_sizes:
                for s in self.steps:
                    yield lr, b, s


# -- data ----------------------------------------------------------------------


@dataclass(frozen=True)
class TaskExample:
    sent1: str
    sent2: str | None
    label: float  # class index for classification, value for regression


@dataclass
class TaskData:
    train: list[TaskExample]
    validation: list[TaskExample]


def _parse_label(raw: str, task: TaskSpec):
    if task.numeric:
        return float(raw)
    if task.label_texts and raw in task.label_texts:
        return task.label_texts.index(raw)
    return int(raw)


def load_task_tsv(path: str | Path, task: TaskSpec) -> list[TaskExample]:
    """Rows are ``sentence1<TAB>[sentence2<TAB>]label``; labels are class indices, label texts or numbers."""
    out = []
    width = 3 if task.pair_task else 2
    with open(path, encoding="utf-8", newline="") as fh:
        for n, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{path}:{n}: expected {width} columns, got {len(row)}")
            s2 = row[1] if task.pair_task else None
            out.append(TaskExample(row[0], s2, _parse_label(row[-1], task)))
    return out


def save_task_tsv(examples: Sequence[TaskExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for e in examples:
            cols = [e.sent1] + ([e.sent2] if e.sent2 is not None else []) + [_format_label(e.label)]
            fh.write("\t".join(cols) + "\n")


def _format_label(label) -> str:
    if isinstance(label, (int, np.integer)):
        return str(int(label))
    return repr(float(label))


# -- rendering -------------------------------------------------------------------


def render_task_input(sent1: str, sent2: str | None, atlas: GlyphAtlas, config: RenderConfig) -> Screenshot:
    """One-line render of a single sentence or a sentence pair joined by the newline symbol."""
    if not sent1:
        raise ValueError("sent1 must be nonempty")
    text = sent1 if sent2 is None else sent1 + config.newline_symbol + sent2
    return render_line(text, atlas, config)


def screenshot_inputs(shot: Screenshot, model_config: PTPConfig) -> tuple[np.ndarray, np.ndarray]:
    grid = split_patches(shot, model_config.patch_height, model_config.patch_width, model_config.channels)
    return grid.patches, attention_mask(grid, shot.eos_patch_index).attend


# -- encoder-only head -------------------------------------------------------------


class EncoderHead(nn.Module):
    def __init__(self, hidden: int, n_outputs: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(hidden, n_outputs)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.linear.weight.copy_(torch.randn(self.linear.weight.shape, generator=g) * 0.02)
            self.linear.bias.zero_()

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


def pool_states(enc: EncoderStates) -> torch.Tensor:
    """Mean of the final states at attended patches; CLS is left out."""
    states, valid = enc.states[:, 1:], enc.valid[:, 1:].to(enc.states.dtype)
    return (states * valid[..., None]).sum(1) / valid.sum(1, keepdim=True)


def encoder_head_forward(
    inputs: Screenshot | tuple[torch.Tensor, torch.Tensor], model: PTPModel, head: EncoderHead
) -> torch.Tensor:
    """Class scores [B, C] (or regression values [B, 1]) with no patch masking."""
    if isinstance(inputs, Screenshot):
        p, a = screenshot_inputs(inputs, model.config)
        patches, attend = torch.from_numpy(p)[None].to(model.dtype), torch.from_numpy(a)[None]
    else:
        patches, attend = inputs
    return head(pool_states(model.encode(patches, attend)))


# -- label texts ---------------------------------------------------------------------


def round_to_increment(value: float) -> str:
    """Nearest multiple of 0.2 with halfway cases going up, one decimal place."""
    q = (Decimal(repr(float(value))) / STSB_STEP).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    out = q * STSB_STEP
    return f"{out:.1f}"


def label_text(task: TaskSpec, label) -> str:
    if task.numeric:
        return round_to_increment(label)
    return task.label_texts[int(label)]


def parse_prediction(task: TaskSpec, text: str) -> tuple[float, bool]:
    """Map generated text back to a label. Returns (value, parsed); unparseable text is never a crash."""
    t = text.strip()
    if task.numeric:
        try:
            v = float(t)
        except ValueError:
            return 0.0, False
        return (v, True) if math.isfinite(v) else (0.0, False)
    if t in task.label_texts:
        return task.label_texts.index(t), True
    return -1, False


# -- metrics ---------------------------------------------------------------------------


def _check(preds, golds):
    p, g = np.asarray(preds), np.asarray(golds)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("empty predictions")
    return p, g


def _confusion(preds, golds):
    p, g = _check(preds, golds)
    p, g = p == 1, g == 1
    return int((p & g).sum()), int((p & ~g).sum()), int((~p & g).sum()), int((~p & ~g).sum())


def accuracy(preds, golds) -> float:
    p, g = _check(preds, golds)
    return float((p == g).mean())


def f1(preds, golds) -> float:
    """F1 on the positive class (label 1)."""
    tp, fp, fn, _ = _confusion(preds, golds)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def matthews(preds, golds) -> float:
    tp, fp, fn, tn = _confusion(preds, golds)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(preds, golds) -> float:
    """Pearson correlation of average ranks; 0.0 if either side is constant."""
    p, g = _check(preds, golds)
    rp, rg = average_ranks(p), average_ranks(g)
    rp -= rp.mean()
    rg -= rg.mean()
    denom = math.sqrt(float((rp * rp).sum()) * float((rg * rg).sum()))
    if denom == 0:
        return 0.0
    return float((rp * rg).sum()) / denom


_METRIC_FNS: dict[str, Callable] = {"accuracy": accuracy, "f1": f1, "matthews": matthews, "spearman": spearman}


def metric(kind: str, preds, golds) -> float:
    try:
        fn = _METRIC_FNS[kind]
    except KeyError:
        raise ValueError(f"unknown metric {kind!r}") from None
    return fn(preds, golds)


# -- fine-tuning -------------------------------------------------------------------------


@dataclass
class Encoded:
    """Pre-rendered split: patch tensors plus labels and (for s2s) label token ids."""

    patches: torch.Tensor  # [N, n, P]
    attend: torch.Tensor  # [N, n]
    labels: list
    label_tokens: list[list[int]] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def encode_split(
    examples: Sequence[TaskExample],
    task: TaskSpec,
    atlas: GlyphAtlas,
    render_config: RenderConfig,
    model_config: PTPConfig,
    vocab: Vocab | None = None,
) -> Encoded:
    if not examples:
        raise ValueError("empty split")
    ps, ats = [], []
    for e in examples:
        p, a = screenshot_inputs(render_task_input(e.sent1, e.sent2, atlas, render_config), model_config)
        ps.append(p)
        ats.append(a)
    enc = Encoded(torch.from_numpy(np.stack(ps)), torch.from_numpy(np.stack(ats)), [e.label for e in examples])
    if task.kind == "seq2seq":
        if vocab is None:
            raise ValueError("seq2seq tasks need a vocabulary")
        enc.label_tokens = [vocab.encode(label_text(task, e.label)) for e in examples]
    return enc


class FineTuned(nn.Module):
    """Backbone plus optional encoder head; the state dict is what fine-tune checkpoints store."""

    def __init__(self, model: PTPModel, head: EncoderHead | None):
        super().__init__()
        self.model = model
        self.head = head

    def trainable(self, mode: str) -> dict[str, nn.Parameter]:
        # the image decoder plays no part in fine-tuning
        prefixes = ["model.patch_embed", "model.embed_norm", "model.cls_token", "model.encoder_"]
        if mode == "s2s":
            prefixes += ["model.token_embed", "model.text_pos", "model.text_", "model.lm_head"]
        else:
            prefixes.append("head.")
        return {k: p for k, p in self.named_parameters() if k.startswith(tuple(prefixes))}


def build_finetune_model(
    base: Checkpoint | PTPConfig, task: TaskSpec, mode: str, seed: int
) -> FineTuned:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if (mode == "s2s") != (task.kind == "seq2seq"):
        raise ValueError(f"mode {mode} does not fit a {task.kind} task")
    if isinstance(base, Checkpoint):
        model = PTPModel(PTPConfig.from_dict(base.config), seed=seed)
        load_into(model, base)
    else:
        model = PTPModel(base, seed=seed)
    head = EncoderHead(model.config.encoder.hidden, task.n_outputs, seed) if mode == "encoder_only" else None
    return FineTuned(model, head)


def _s2s_batch(label_tokens: Sequence[list[int]], vocab: Vocab):
    t = max(len(x) for x in label_tokens) + 1
    b = len(label_tokens)
    text_in = torch.full((b, t), vocab.pad_id, dtype=torch.long)
    text_out = torch.full((b, t), vocab.pad_id, dtype=torch.long)
    valid = torch.zeros(b, t, dtype=torch.bool)
    for i, toks in enumerate(label_tokens):
        text_in[i, : len(toks) + 1] = torch.tensor([vocab.bos_id] + toks)
        text_out[i, : len(toks) + 1] = torch.tensor(toks + [vocab.eos_id])
        valid[i, : len(toks) + 1] = True
    return text_in, text_out, valid


def finetune_loss(ft: FineTuned, data: Encoded, idx: Sequence[int], task: TaskSpec, vocab: Vocab | None) -> torch.Tensor:
    patches = data.patches[idx].to(ft.model.dtype)
    attend = data.attend[idx]
    if ft.head is not None:
        out = encoder_head_forward((patches, attend), ft.model, ft.head)
        if task.kind == "regression":
            target = torch.tensor([float(data.labels[i]) for i in idx], dtype=out.dtype)
            return (out[:, 0] - target).pow(2).mean()
        target = torch.tensor([int(data.labels[i]) for i in idx])
        return cross_entropy(out, target)
    text_in, text_out, valid = _s2s_batch([data.label_tokens[i] for i in idx], vocab)
    enc = ft.model.encode(patches, attend)
    return cross_entropy(ft.model.decode_text(enc, text_in, valid), text_out, valid)


@torch.no_grad()
def greedy_labels(ft: FineTuned, patches: torch.Tensor, attend: torch.Tensor, vocab: Vocab, max_new: int = 8) -> list[str]:
    """Greedy generation from BOS until EOS (or ``max_new`` tokens) for each input."""
    enc = ft.model.encode(patches.to(ft.model.dtype), attend)
    b = patches.shape[0]
    seq = torch.full((b, 1), vocab.bos_id, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    outs: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_new):
        nxt = ft.model.decode_text(enc, seq)[:, -1].argmax(-1)
        for i in range(b):
            if not done[i]:
                if int(nxt[i]) == vocab.eos_id:
                    done[i] = True
                else:
                    outs[i].append(int(nxt[i]))
        if bool(done.all()):
            break
        seq = torch.cat([seq, nxt[:, None]], dim=1)
    return [vocab.decode(o) for o in outs]


@torch.no_grad()
def predict(ft: FineTuned, data: Encoded, task: TaskSpec, vocab: Vocab | None = None, batch_size: int = 64) -> tuple[list, int]:
    """Predictions for a split and the count of generated texts that failed to parse."""
    ft.eval()
    preds: list = []
    failed = 0
    for s in range(0, len(data), batch_size):
        patches, attend = data.patches[s : s + batch_size].to(ft.model.dtype), data.attend[s : s + batch_size]
        if ft.head is not None:
            out = encoder_head_forward((patches, attend), ft.model, ft.head)
            preds += out[:, 0].tolist() if task.kind == "regression" else out.argmax(-1).tolist()
        else:
            for text in greedy_labels(ft, patches, attend, vocab, max_new=_max_label_tokens(data) + 2):
                v, ok = parse_prediction(task, text)
                failed += not ok
                preds.append(v)
    return preds, failed


def _max_label_tokens(data: Encoded) -> int:
    return max((len(t) for t in data.label_tokens), default=1)


def evaluate(ft: FineTuned, data: Encoded, task: TaskSpec, vocab: Vocab | None = None) -> float:
    preds, _ = predict(ft, data, task, vocab)
    return metric(task.metric, preds, data.labels)


@dataclass
class RunResult:
    best_score: float
    best_step: int
    history: list[tuple[int, float]]
    model: FineTuned


def finetune(
    base: Checkpoint | PTPConfig,
    task: TaskSpec,
    train: Encoded,
    validation: Encoded,
    mode: str,
    lr: float,
    batch_size: int,
    steps: int,
    seed: int,
    grid: GridSpec = GridSpec(),
    vocab: Vocab | None = None,
    log: Callable[[int, float], None] | None = None,
) -> RunResult:
    """Step-count-controlled fine-tuning with linear decay, scored on validation every ``eval_every`` steps."""
    torch.manual_seed(seed)
    ft = build_finetune_model(base, task, mode, seed)
    params = ft.trainable(mode)
    state = OptimState(weight_decay=grid.weight_decay)
    schedule = Schedule(lr, 0.0, min(grid.warmup_steps, steps), max(steps, 1), "linear")
    order = epoch_order(len(train), seed)
    history = [(0, evaluate(ft, validation, task, vocab))]
    if log:
        log(*history[-1])
    for step in range(1, steps + 1):
        ft.train()
        idx = [next(order) for _ in range(batch_size)]
        ft.zero_grad(set_to_none=True)
        loss = finetune_loss(ft, train, idx, task, vocab)
        loss.backward()
        if grid.clip_norm:
            torch.nn.utils.clip_grad_norm_(list(params.values()), grid.clip_norm)
        adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr_at(schedule, step))
        if step % grid.eval_every == 0 or step == steps:
            history.append((step, evaluate(ft, validation, task, vocab)))
            if log:
                log(*history[-1])
    best_step, best = max(history, key=lambda h: (h[1], -h[0]))
    ft.eval()
    return RunResult(best, best_step, history, ft)


# -- grid ----------------------------------------------------------------------------------

RESULT_COLUMNS = ("lr", "batch", "steps", "seed", "best_score", "best_step")


@dataclass(frozen=True)
class GridRow:
    lr: float
    batch: int
    steps: int
    seed: int
    best_score: float
    best_step: int

    def line(self) -> str:
        return f"{self.lr!r}\t{self.batch}\t{self.steps}\t{self.seed}\t{self.best_score!r}\t{self.best_step}"


@dataclass
class GridResult:
    rows: list[GridRow]

    def cell_means(self) -> dict[tuple[float, int, int], float]:
        groups: dict[tuple[float, int, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.lr, r.batch, r.steps), []).append(r.best_score)
        return {k: float(np.mean(v)) for k, v in groups.items()}

    def best_cell(self) -> tuple[tuple[float, int, int], float]:
        # first cell wins ties, keeping the choice independent of dict quirks
        best = None
        for k, v in self.cell_means().items():
            if best is None or v > best[1]:
                best = (k, v)
        return best

    def to_tsv(self) -> str:
        return "\t".join(RESULT_COLUMNS) + "\n" + "".join(r.line() + "\n" for r in self.rows)


def run_grid(
    data: TaskData,
    task: TaskSpec,
    grid: GridSpec,
    base: Checkpoint | PTPConfig,
    mode: str,
    atlas: GlyphAtlas,
    render_config: RenderConfig,
    vocab: Vocab | None = None,
    log: Callable[[str], None] | None = None,
    keep_best_model: bool = False,
) -> tuple[GridResult, FineTuned | None]:
    """Fine-tune every (lr, batch, steps) cell for each seed and keep the best validation score per run."""
    model_config = PTPConfig.from_dict(base.config) if isinstance(base, Checkpoint) else base
    train = encode_split(data.train, task, atlas, render_config, model_config, vocab)
    val = encode_split(data.validation, task, atlas, render_config, model_config, vocab)
    rows: list[GridRow] = []
    best_model, best_score = None, -math.inf
    for lr, batch, steps in grid.cells():
        for seed in grid.seeds:
            res = finetune(base, task, train, val, mode, lr, batch, steps, seed, grid, vocab)
            rows.append(GridRow(lr, batch, steps, seed, res.best_score, res.best_step))
            if log:
                log(rows[-1].line())
            if keep_best_model and res.best_score > best_score:
                best_model, best_score = res.model, res.best_score
    return GridResult(rows), best_model


def finetune_checkpoint(ft: FineTuned, task: TaskSpec, mode: str, base_config: dict[str, str], step: int) -> Checkpoint:
    cfg = dict(base_config)
    cfg.update(
        {
            "mode": mode,
            "task.kind": task.kind,
            "task.n_classes": str(task.n_classes),
            "task.metric": task.metric,
            "task.label_texts": "\x1f".join(task.label_texts),
            "task.pair_task": str(task.pair_task),
        }
    )
    return Checkpoint(snapshot(ft), cfg, step)


def load_finetuned(ckpt: Checkpoint) -> tuple[FineTuned, TaskSpec, str]:
    c = ckpt.config
    texts = tuple(t for t in c.get("task.label_texts", "").split("\x1f") if t)
    task = TaskSpec(c["task.kind"], int(c["task.n_classes"]), c["task.metric"], texts, c["task.pair_task"] == "True")
    mode = c["mode"]
    model_cfg = {k: v for k, v in c.items() if not k.startswith("task.") and k not in ("mode",)}
    ft = build_finetune_model(PTPConfig.from_dict(model_cfg), task, mode, 0)
    load_into(ft, ckpt)
    ft.eval()
    return ft, task, mode


# -- synthetic tasks ------------------------------------------------------------------------

FILLER = (
    "the a small old new green blue quiet loud cold warm city road house garden window "
    "table river hill morning evening walks sits looks runs stays near under over with"
).split()
KEYWORD = "zebra"
NOUNS = "cup door lamp boat kite coat ball bell".split()
POSITIVE = "joy love hope calm sunny sweet brave proud".split()
NEGATIVE = "pain fear grief storm bitter gloomy weary harsh".split()
COLORS = "red blue green black white pink gray brown".split()


def _sentence(rng: np.random.Generator, n_words: int) -> list[str]:
    return [FILLER[i] for i in rng.integers(0, len(FILLER), n_words)]


def keyword_parity_task(
    n_train: int = 500, n_val: int = 200, seed: int = 0, max_keywords: int = 1, n_words: int = 6
) -> tuple[TaskData, TaskSpec]:
    """Label = parity of the keyword count; with ``max_keywords=1`` this is keyword presence (separable)."""
    rng = np.random.default_rng(seed)

    def one():
        count = int(rng.integers(0, max_keywords + 1))
        words = _sentence(rng, n_words - count)
        for _ in range(count):
            words.insert(int(rng.integers(0, len(words) + 1)), KEYWORD)
        return TaskExample(" ".join(words), None, count % 2)

    data = TaskData([one() for _ in range(n_train)], [one() for _ in range(n_val)])
    return data, TaskSpec("classification", 2, "accuracy")


def sentiment_task(n_train: int = 500, n_val: int = 200, seed: int = 0, n_words: int = 6) -> tuple[TaskData, TaskSpec]:
    """Every word comes from one lexicon: label 0 for ``POSITIVE``, 1 for ``NEGATIVE``,
    in the order of the ("good", "bad") label texts.

    The class shows in every word, so it survives mean pooling and the arbitrary
    pixel phase at which each word lands.
    """
    rng = np.random.default_rng(seed)

    def one():
        label = int(rng.integers(2))
        lexicon = NEGATIVE if label else POSITIVE
        return TaskExample(" ".join(lexicon[i] for i in rng.integers(0, len(lexicon), n_words)), None, label)

    data = TaskData([one() for _ in range(n_train)], [one() for _ in range(n_val)])
    return data, TaskSpec("classification", 2, "accuracy")


def number_regression_task(n_train: int = 500, n_val: int = 200, seed: int = 0) -> tuple[TaskData, TaskSpec]:
    """Sentences mentioning a value in [0, 5]; the target is that value."""
    rng = np.random.default_rng(seed)

    def one():
        v = round(float(rng.uniform(0, 5)), 1)
        words = _sentence(rng, 3)
        return TaskExample(f"{' '.join(words)} scored {v:.1f}", None, v)

    data = TaskData([one() for _ in range(n_train)], [one() for _ in range(n_val)])
    return data, TaskSpec("regression", 1, "spearman")


def entailment_task(n_train: int = 500, n_val: int = 200, seed: int = 0) -> tuple[TaskData, TaskSpec]:
    """Sentence pairs; label 0 when the second restates the first, 1 when it contradicts it."""
    rng = np.random.default_rng(seed)

    def one():
        noun = NOUNS[int(rng.integers(len(NOUNS)))]
        c1 = int(rng.integers(len(COLORS)))
        same = bool(rng.integers(2))
        c2 = c1 if same else (c1 + 1 + int(rng.integers(len(COLORS) - 1))) % len(COLORS)
        return TaskExample(f"the {noun} is {COLORS[c1]}", f"the {noun} is {COLORS[c2]}", 0 if same else 1)

    data = TaskData([one() for _ in range(n_train)], [one() for _ in range(n_val)])
    return data, TaskSpec("classification", 2, "accuracy", pair_task=True)


SYNTHETIC_TASKS = {
    "keyword": keyword_parity_task,
    "sentiment": sentiment_task,
    "number": number_regression_task,
    "entailment": entailment_task,
}
