"""Command-line entry point: ``screenlm <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (``#``
starts a comment). Keys are the long flag names with dashes replaced by
underscores; flags given on the command line win over the file.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .arscreen import (
    ARConfig,
    ARDataConfig,
    ARModel,
    ar_config_by_name,
    batch_perplexity,
    blank_like,
    make_ar_example,
    tokens_only,
)
from .nnet.checkpoint import AR_MAGIC, PTP_MAGIC, CheckpointError, load_checkpoint, load_into, to_bytes
from .nnet.ptp import PTPConfig, PTPModel, collate, config_by_name
from .patchwork import MaskConfig, PatchGrid, assemble_ptp_example, overlay_masked, patch_moments, reassemble
from .render import AtlasFormatError, RenderConfig, builtin_test_atlas, load_atlas, render_line, save_png
from .tasks import (
    SYNTHETIC_TASKS,
    GridSpec,
    TaskData,
    TaskSpec,
    encode_split,
    finetune_checkpoint,
    load_finetuned,
    load_task_tsv,
    metric,
    predict,
    run_grid,
)
from .textcodec import Vocab, train_bpe
from .trainer import TrainConfig, TrainingAborted, render_config_from, run_pretraining

VOCAB_FILE = "vocab.txt"


class UsageError(Exception):
    """Bad flags or config keys (exit code 2)."""


# -- parser ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="file of key = value defaults")
    p.add_argument("--seed", type=int, default=0)


def _atlas_flag(p):
    p.add_argument("--atlas", type=Path, help="glyph atlas file (default: built-in test font)")


def _train_flags(p, steps: int, lr: float):
    p.add_argument("--corpus", type=Path, help="UTF-8 text, one item per line")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--min-lr", type=float, default=1e-5)
    p.add_argument("--warmup-steps", type=int, help="default: 5%% of steps")
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--vocab", type=Path, help="existing vocab file (default: train BPE on the corpus)")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--out", type=Path, default=Path("run"))
    _atlas_flag(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="screenlm", description="Screenshot language model toolkit.")
    parser.add_argument("--version", action="version", version=f"screenlm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render text to a PNG strip")
    _common(p)
    p.add_argument("--text")
    p.add_argument("--infile", type=Path)
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("--patches", type=int, default=RenderConfig.max_patches)
    p.add_argument("--prefix", default=RenderConfig.prefix)
    p.add_argument("--no-prefix", action="store_true")
    p.add_argument("--no-eos", action="store_true")
    _atlas_flag(p)

    p = sub.add_parser("pretrain", help="patch-and-text prediction pre-training")
    _common(p)
    _train_flags(p, steps=2000, lr=1e-3)
    p.add_argument("--model", default="ptp-desk", help="named model size")
    p.add_argument("--patches", type=int, help="override the model's patch count")
    p.add_argument("--embedding-layernorm", action="store_true")
    p.add_argument("--patch-rate", type=float, default=MaskConfig.patch_rate)
    p.add_argument("--text-rate", type=float, default=MaskConfig.text_rate)
    p.add_argument("--uniform-mask", action="store_true", help="single-patch masking instead of spans")

    p = sub.add_parser("ar-pretrain", help="autoregressive screenshot LM pre-training")
    _common(p)
    _train_flags(p, steps=2000, lr=1e-3)
    p.add_argument("--model", default="ar-tiny")
    p.add_argument("--no-patch-pred", action="store_true", help="ablation: train without next-patch loss")
    _ar_data_flags(p)

    for name, help_text in (("finetune", "grid-search fine-tuning"), ("eval", "score a fine-tuned checkpoint")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--task", type=Path, help="training TSV (finetune) or evaluation TSV (eval)")
        p.add_argument("--ckpt", type=Path, help="base checkpoint (finetune) or fine-tuned checkpoint (eval)")
        p.add_argument("--vocab", type=Path)
        _atlas_flag(p)
        if name == "finetune":
            p.add_argument("--valid", type=Path, help="validation TSV")
            p.add_argument("--synthetic", choices=sorted(SYNTHETIC_TASKS), help="use a generated task instead of TSVs")
            p.add_argument("--mode", choices=("encoder_only", "s2s"), default="encoder_only")
            p.add_argument("--kind", choices=("classification", "regression"), default="classification")
            p.add_argument("--metric", default=None)
            p.add_argument("--n-classes", type=int, default=2)
            p.add_argument("--label-texts", help="comma-separated label words for s2s mode")
            p.add_argument("--pair", action="store_true")
            p.add_argument("--lrs", default=",".join(map(repr, GridSpec.learning_rates)))
            p.add_argument("--batch-sizes", default=",".join(map(str, GridSpec.batch_sizes)))
            p.add_argument("--steps-list", default=",".join(map(str, GridSpec.steps)))
            p.add_argument("--seeds", default=",".join(map(str, GridSpec.seeds)))
            p.add_argument("--eval-every", type=int, default=GridSpec.eval_every)
            p.add_argument("--out", type=Path, default=Path("finetune"))

    p = sub.add_parser("eval-ppl", help="perplexity under screenshot, text or no context")
    _common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--context", choices=("screenshot", "text", "none", "all"), default="all")
    p.add_argument("--vocab", type=Path)
    _atlas_flag(p)

    p = sub.add_parser("inspect", help="write input / masked / reconstruction PNGs")
    _common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--text")
    p.add_argument("--out", type=Path, default=Path("inspect"))
    p.add_argument("--vocab", type=Path)
    _atlas_flag(p)

    p = sub.add_parser("config", help="print configuration defaults")
    _common(p)
    p.add_argument("--dump", action="store_true", help="print every subcommand's defaults")
    return parser


def _ar_data_flags(p):
    d = ARDataConfig()
    p.add_argument("--m-s", type=int, default=d.m_s, help="tokens rendered into the screenshot")
    p.add_argument("--m-t", type=int, default=d.m_t, help="tokens following as text")
    p.add_argument("--n-patches", type=int, default=d.n_patches)
    p.add_argument("--row-width", type=int, default=d.row_width)
    p.add_argument("--prefix", default="")


def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def read_config_file(path: Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def apply_config_file(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install file values as parser defaults; unknown keys are an error."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in ("true", "false"):
                raise UsageError(f"config key {key!r} needs true or false, got {raw!r}")
            defaults[key] = raw.lower() == "true"
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (TypeError, ValueError) as e:
                raise UsageError(f"config key {key!r}: {e}") from None
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"config key {key!r}: {raw!r} not in {sorted(action.choices)}")
    sub.set_defaults(**defaults)


def dump_defaults(parser: argparse.ArgumentParser) -> str:
    lines = []
    for name, sub in _subparsers(parser).items():
        lines.append(f"# {name}")
        for a in sub._actions:
            if a.dest in ("help", "config", "dump"):
                continue
            lines.append(f"{a.dest} = {'' if a.default is None else a.default}")
        lines.append("")
    return "\n".join(lines)


# -- helpers -----------------------------------------------------------------------


def _atlas(args):
    return load_atlas(args.atlas) if args.atlas else builtin_test_atlas()


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _corpus_lines(path: Path) -> list[str]:
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    if not lines:
        raise RuntimeError(f"{path}: corpus is empty")
    return lines


def _vocab_near(ckpt: Path, explicit: Path | None) -> Vocab:
    path = explicit or ckpt.parent / VOCAB_FILE
    if not path.exists():
        raise RuntimeError(f"no vocabulary at {path}; pass --vocab")
    return Vocab.load(path)


def _split_item(line: str):
    if "\t" in line:
        a, b = line.split("\t", 1)
        return (a, b)
    return line


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        peak_lr=args.lr,
        min_lr=args.min_lr,
        warmup_steps=args.warmup_steps,
        ckpt_every=args.ckpt_every,
    )


def _training_vocab(args, texts: list[str]) -> Vocab:
    vocab = Vocab.load(args.vocab) if args.vocab else train_bpe(texts, args.vocab_size)
    args.out.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out / VOCAB_FILE)
    return vocab


# -- commands ------------------------------------------------------------------------


def cmd_render(args) -> int:
    if (args.text is None) == (args.infile is None):
        raise UsageError("give exactly one of --text or --infile")
    text = args.text if args.text is not None else args.infile.read_text(encoding="utf-8").rstrip("\n")
    cfg = RenderConfig(
        max_patches=args.patches,
        prefix="" if args.no_prefix else args.prefix,
        eos_black_patch=not args.no_eos,
    )
    shot = render_line(text, _atlas(args), cfg)
    if args.out:
        save_png(shot, args.out)
    print(f"patches_used={shot.patches_used}")
    print(f"truncated={'true' if shot.truncated else 'false'}")
    print(f"eos_patch={'none' if shot.eos_patch_index is None else shot.eos_patch_index}")
    return 0


def _run_training(args, kind, corpus, model_config, vocab, render_config, **extra) -> int:
    def log(m):
        if m.step % 100 == 0 or m.step == args.steps:
            print(m.line(), flush=True)

    try:
        res = run_pretraining(
            kind, corpus, model_config, _train_config(args), vocab, _atlas(args), render_config,
            seed=args.seed, out_dir=args.out, log=log, **extra,
        )
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        print(f"diagnostic checkpoint: {e.checkpoint}", file=sys.stderr)
        return 1
    print(f"checkpoint={res.checkpoint}")
    return 0


def cmd_pretrain(args) -> int:
    _require(args, "corpus")
    corpus = _corpus_lines(args.corpus)
    vocab = _training_vocab(args, corpus)
    overrides = {"vocab_size": vocab.size, "use_embedding_layernorm": args.embedding_layernorm}
    if args.patches:
        overrides["max_patches"] = args.patches
    model_config = config_by_name(args.model, **overrides)
    render_config = RenderConfig(max_patches=model_config.max_patches)
    mask = MaskConfig(args.patch_rate, args.text_rate, span=not args.uniform_mask, channels=model_config.channels)
    return _run_training(args, "ptp", corpus, model_config, vocab, render_config, mask_config=mask)


def cmd_ar_pretrain(args) -> int:
    _require(args, "corpus")
    lines = _corpus_lines(args.corpus)
    vocab = _training_vocab(args, [l.replace("\t", " ") for l in lines])
    model_config = ar_config_by_name(args.model, vocab_size=vocab.size, patch_prediction=not args.no_patch_pred)
    data = ARDataConfig(args.m_s, args.m_t, args.n_patches, args.row_width)
    render_config = RenderConfig(max_patches=args.n_patches, prefix=args.prefix, eos_black_patch=False)
    corpus = [_split_item(l) for l in lines]
    return _run_training(args, "ar", corpus, model_config, vocab, render_config, ar_data=data)


def _task_spec(args) -> TaskSpec:
    metric_name = args.metric or ("spearman" if args.kind == "regression" else "accuracy")
    task = TaskSpec(args.kind, 1 if args.kind == "regression" else args.n_classes, metric_name, pair_task=args.pair)
    if args.mode == "s2s":
        if not args.label_texts and args.kind == "classification":
            raise UsageError("s2s mode needs --label-texts for classification tasks")
        texts = args.label_texts.split(",") if args.label_texts else [f"{i / 5:.1f}" for i in range(26)]
        task = task.as_seq2seq(texts)
    return task


def _grid(args) -> GridSpec:
    try:
        return GridSpec(
            tuple(float(x) for x in args.lrs.split(",")),
            tuple(int(x) for x in args.batch_sizes.split(",")),
            tuple(int(x) for x in args.steps_list.split(",")),
            tuple(int(x) for x in args.seeds.split(",")),
            eval_every=args.eval_every,
        )
    except ValueError as e:
        raise UsageError(f"bad grid: {e}") from None


def cmd_finetune(args) -> int:
    _require(args, "ckpt")
    base = load_checkpoint(args.ckpt, PTP_MAGIC)
    vocab = _vocab_near(args.ckpt, args.vocab)
    if args.synthetic:
        data, task = SYNTHETIC_TASKS[args.synthetic](seed=args.seed)
        args.kind, args.pair = task.kind, task.pair_task
    else:
        _require(args, "task", "valid")
    task = _task_spec(args)
    if not args.synthetic:
        data = TaskData(load_task_tsv(args.task, task), load_task_tsv(args.valid, task))
    render_config = render_config_from(base.config, RenderConfig(max_patches=PTPConfig.from_dict(base.config).max_patches))
    result, best = run_grid(
        data, task, _grid(args), base, args.mode, _atlas(args), render_config, vocab,
        log=lambda line: print(line, flush=True), keep_best_model=True,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "results.tsv").write_text(result.to_tsv())
    (cell, score) = result.best_cell()
    print(f"best_cell=lr:{cell[0]!r},batch:{cell[1]},steps:{cell[2]}\tmean_best_score={score!r}")
    ckpt = finetune_checkpoint(best, task, args.mode, base.config, 0)
    (args.out / "best.ptpc").write_bytes(to_bytes(ckpt))
    vocab.save(args.out / VOCAB_FILE)
    print(f"results={args.out / 'results.tsv'}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "ckpt", "task")
    ckpt = load_checkpoint(args.ckpt, PTP_MAGIC)
    if "mode" not in ckpt.config:
        raise RuntimeError(f"{args.ckpt} is not a fine-tuned checkpoint")
    ft, task, _ = load_finetuned(ckpt)
    vocab = _vocab_near(args.ckpt, args.vocab) if task.kind == "seq2seq" else None
    examples = load_task_tsv(args.task, task)
    render_config = render_config_from(ckpt.config, RenderConfig(max_patches=ft.model.config.max_patches))
    data = encode_split(examples, task, _atlas(args), render_config, ft.model.config, vocab)
    preds, failed = predict(ft, data, task, vocab)
    print(f"{task.metric}={metric(task.metric, preds, data.labels)!r}")
    if task.kind == "seq2seq":
        print(f"unparsed={failed}")
    return 0


def cmd_eval_ppl(args) -> int:
    _require(args, "ckpt", "corpus")
    ckpt = load_checkpoint(args.ckpt, AR_MAGIC)
    cfg = ARConfig.from_dict(ckpt.config)
    model = ARModel(cfg)
    load_into(model, ckpt)
    model.eval()
    vocab = _vocab_near(args.ckpt, args.vocab)
    data = ARDataConfig(*(int(ckpt.config.get(f"data.{k}", getattr(ARDataConfig, k))) for k in ("m_s", "m_t", "n_patches", "row_width")))
    render_config = render_config_from(ckpt.config, RenderConfig(max_patches=data.n_patches, prefix="", eos_black_patch=False))
    atlas = _atlas(args)
    shots, texts, evals = [], [], []
    for line in _corpus_lines(args.corpus):
        item = _split_item(line)
        if isinstance(item, tuple):
            screen, follow = item[0], vocab.encode(item[1])[: data.m_t]
        else:
            ids = vocab.encode(item)
            screen, follow = vocab.decode(ids[: data.m_s]), ids[data.m_s : data.m_s + data.m_t]
        if not follow:
            continue
        shots.append(make_ar_example((screen, ""), vocab, atlas, render_config, data, cfg.channels))
        texts.append(tokens_only(vocab.encode(screen), cfg.patch_dim))
        evals.append(follow)
    if not evals:
        raise RuntimeError("no corpus line has tokens to score after the context")
    wanted = ("screenshot", "text", "none") if args.context == "all" else (args.context,)
    for ctx in wanted:
        if ctx == "screenshot":
            contexts = shots
        elif ctx == "text":
            contexts = [t if len(t) else tokens_only([vocab.bos_id], cfg.patch_dim) for t in texts]
        else:
            contexts = [blank_like(s) for s in shots]
        print(f"ppl_{ctx}={batch_perplexity(model, contexts, evals, vocab.pad_id)!r}")
    return 0


def cmd_inspect(args) -> int:
    _require(args, "ckpt", "text")
    ckpt = load_checkpoint(args.ckpt, PTP_MAGIC)
    cfg = PTPConfig.from_dict(ckpt.config)
    model = PTPModel(cfg)
    load_into(model, ckpt)
    model.eval()
    vocab = _vocab_near(args.ckpt, args.vocab)
    render_config = render_config_from(ckpt.config, RenderConfig(max_patches=cfg.max_patches))
    rng = np.random.default_rng(args.seed)
    ex = assemble_ptp_example(args.text, _atlas(args), render_config, MaskConfig(channels=cfg.channels), vocab, rng)
    batch = collate([ex], vocab.bos_id, vocab.eos_id, vocab.pad_id)
    with torch.no_grad():
        out = model(batch)
    idx = ex.masked_indices
    recon = ex.grid.patches.astype(np.float64).copy()
    if len(idx):
        mean, std = patch_moments(ex.grid.patches[idx])
        pred = out.full_predictions[0, idx].double().numpy()
        recon[idx] = np.clip(pred * std[:, None] + mean[:, None], 0.0, 1.0)
    args.out.mkdir(parents=True, exist_ok=True)
    save_png(ex.screenshot, args.out / "input.png")
    save_png(overlay_masked(ex.screenshot, ex.patch_plan), args.out / "masked.png")
    save_png(reassemble(PatchGrid(recon, ex.grid.p_h, ex.grid.p_w, ex.grid.c)), args.out / "reconstruction.png")
    print(f"masked_patches={len(idx)}")
    print(f"mse_patch={float(out.mse_patch)!r}")
    print(f"ce_text={float(out.ce_text)!r}")
    return 0


def cmd_config(args, parser) -> int:
    if not args.dump:
        raise UsageError("config needs --dump")
    print(dump_defaults(parser), end="")
    return 0


COMMANDS = {
    "render": cmd_render,
    "pretrain": cmd_pretrain,
    "ar-pretrain": cmd_ar_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "eval-ppl": cmd_eval_ppl,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    sub = _subparsers(parser)[args.command]
    try:
        if args.config is not None:
            apply_config_file(sub, read_config_file(args.config))
            args = parser.parse_args(argv)
        torch.manual_seed(args.seed)
        if args.command == "config":
            return cmd_config(args, parser)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"screenlm {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError, CheckpointError, AtlasFormatError) as e:
        print(f"screenlm {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
