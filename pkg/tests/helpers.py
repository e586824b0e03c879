"""Small fixtures shared by unit and acceptance tests."""

import math

import numpy as np
import torch

from screenlm.arscreen import ARDataConfig, ARModel, ar_config_by_name, collate_mixed, make_ar_example
from screenlm.nnet.ptp import PTPModel, collate, config_by_name
from screenlm.patchwork import MaskConfig, assemble_ptp_example
from screenlm.render import RenderConfig, builtin_test_atlas
from screenlm.textcodec import train_bpe

TINY_TEXTS = ["a cat sat on a mat", "dogs bark at night", "red sun, blue sea", "one two three"]


def tiny_vocab(size=300):
    return train_bpe(TINY_TEXTS, size)


def tiny_ptp(seed=0, dtype=torch.float64, embedding_layernorm=False):
    """Tiny PTP model (hidden 32, 16 patches) with a two-example batch."""
    vocab = tiny_vocab()
    cfg = config_by_name("ptp-tiny", vocab_size=vocab.size, use_embedding_layernorm=embedding_layernorm)
    model = PTPModel(cfg, seed=seed).to(dtype)
    atlas = builtin_test_atlas()
    rc = RenderConfig(max_patches=cfg.max_patches, prefix="")
    rng = np.random.default_rng(seed)
    exs = [assemble_ptp_example(t, atlas, rc, MaskConfig(patch_rate=0.3), vocab, rng) for t in TINY_TEXTS[:2]]
    batch = collate(exs, vocab.bos_id, vocab.eos_id, vocab.pad_id, dtype=dtype)
    return model, batch, vocab


def tiny_ar(seed=0, dtype=torch.float64, patch_prediction=True):
    """ar-tiny model with a two-sequence mixed batch (8 patches in 2 rows)."""
    vocab = tiny_vocab()
    cfg = ar_config_by_name("ar-tiny", vocab_size=vocab.size, patch_prediction=patch_prediction)
    model = ARModel(cfg, seed=seed).to(dtype)
    atlas = builtin_test_atlas()
    data = ARDataConfig(m_s=4, m_t=4, n_patches=8, row_width=4)
    rc = RenderConfig(max_patches=8, prefix="", eos_black_patch=False)
    seqs = [make_ar_example(t, vocab, atlas, rc, data) for t in TINY_TEXTS[:2]]
    return model, collate_mixed(seqs, vocab.pad_id, dtype=dtype), vocab


# -- brute-force metric references --


def confusion_counts(preds, golds):
    tp = fp = fn = tn = 0
    for p, g in zip(preds, golds):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif g == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def ref_accuracy(preds, golds):
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def ref_f1(preds, golds):
    tp, fp, fn, _ = confusion_counts(preds, golds)
    # F1 = 2TP / (2TP + FP + FN), zero when there are no positives anywhere
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def ref_matthews(preds, golds):
    tp, fp, fn, tn = confusion_counts(preds, golds)
    factors = [tp + fp, tp + fn, tn + fp, tn + fn]
    if 0 in factors:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(factors[0] * factors[1] * factors[2] * factors[3])
