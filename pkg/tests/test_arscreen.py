import math

import numpy as np
import pytest
import torch

from helpers import tiny_ar, tiny_vocab
from screenlm.arscreen import (
    AR_CONFIGS,
    PATCH,
    TOKEN,
    ARConfig,
    ARDataConfig,
    ARModel,
    ar_config_by_name,
    ar_forward,
    ar_loss,
    ar_losses_from,
    blank_like,
    build_mixed_input,
    collate_mixed,
    generate,
    make_ar_example,
    patch_reconstruction_mse,
    perplexity,
    perplexity_from_logits,
    tokens_only,
)
from screenlm.nnet import core
from screenlm.patchwork import standardize_patch
from screenlm.render import RenderConfig, render_line


@pytest.fixture(scope="module")
def vocab():
    return tiny_vocab()


def test_layout_length_at_reference_size(atlas, vocab):
    shot = render_line("hello world", atlas, RenderConfig(max_patches=512))
    seq = build_mixed_input(shot, [65] * 256, vocab, row_width=512)
    assert len(seq) == 1 + 512 + 1 + 1 + 256
    assert int((seq.kinds == PATCH).sum()) == 512
    # screenshot segment strictly precedes text
    assert np.all(seq.kinds[-256:] == TOKEN) and seq.token_ids[514] == vocab.img_end_id


def test_layout_two_rows_and_empty_text(atlas, vocab):
    shot = render_line("hi", atlas, RenderConfig(max_patches=4, prefix="", eos_black_patch=False))
    seq = build_mixed_input(shot, [], vocab, row_width=2)
    assert seq.trace(vocab).split("\n")[:-1] == ["S <img>", "P", "P", "S <img_nl>", "P", "P", "S <img_nl>", "S </img>"]
    seq = build_mixed_input(shot, [70, 71], vocab, row_width=2)
    assert seq.trace(vocab).endswith("T 70\nT 71\n")
    np.testing.assert_array_equal(seq.patches[1], np.repeat(shot.pixels[:, :16, None], 3, axis=-1).reshape(-1))
    with pytest.raises(ValueError):
        build_mixed_input(shot, [], vocab, row_width=3)


def test_trailing_blank_patches_not_attended(atlas, vocab):
    shot = render_line("a", atlas, RenderConfig(max_patches=8, prefix="", eos_black_patch=False))
    seq = build_mixed_input(shot, [], vocab, row_width=8)
    assert seq.attend[1] and not seq.attend[1 + shot.patches_used :9].any()


def test_causality_and_normalized_logits():
    model, batch, _ = tiny_ar()
    pixels, logits = model(batch)
    t = 5
    batch.patches[:, t] += 0.5
    batch.token_ids[:, t] = (batch.token_ids[:, t] + 1) % model.config.vocab_size
    p2, l2 = model(batch)
    assert torch.equal(pixels[:, :t], p2[:, :t]) and torch.equal(logits[:, :t], l2[:, :t])
    assert not torch.allclose(logits[:, t], l2[:, t])
    rows = torch.softmax(logits, -1).sum(-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-12)


def test_overlength_rejected(vocab):
    model = ARModel(ar_config_by_name("ar-tiny", vocab_size=vocab.size, max_seq=8))
    with pytest.raises(ValueError):
        ar_forward(tokens_only(list(range(65, 75)), model.config.patch_dim), model)


@pytest.mark.parametrize("patch_prediction", [True, False])
def test_gradient_check(patch_prediction):
    model, batch, _ = tiny_ar(patch_prediction=patch_prediction)
    report = core.finite_difference_check(lambda: model.losses(batch).total, list(model.named_parameters()), floor=1e-6)
    assert max(report.values()) < 1e-3, max(report, key=report.get)


def test_one_head_per_position():
    _, batch, _ = tiny_ar()
    lengths = (batch.kinds >= 0).sum(1)
    for i in range(batch.kinds.shape[0]):
        n = int(batch.attend[i].sum() + (~batch.attend[i] & (batch.kinds[i] == PATCH)).sum())
        assert not torch.any(batch.patch_next[i] & batch.token_next[i])
        assert int(batch.patch_next[i].sum() + batch.token_next[i].sum()) == n - 1
    assert lengths.min() > 0


def test_patch_targets_share_standardization(atlas, vocab):
    shot = render_line("a b", atlas, RenderConfig(max_patches=4, prefix="", eos_black_patch=False))
    seq = build_mixed_input(shot, [66], vocab, row_width=4)
    batch = collate_mixed([seq], vocab.pad_id, dtype=torch.float64)
    expect = standardize_patch(seq.patches[2:5])
    np.testing.assert_array_equal(batch.targets[0, 1:4].numpy(), expect.astype(np.float64))
    assert batch.patch_next[0].tolist() == [True, True, True, True, False, False, False, False]


def test_loss_contracts(vocab):
    model = ARModel(ar_config_by_name("ar-tiny", vocab_size=vocab.size)).double()
    out = ar_loss(tokens_only([65, 66, 67, 68], model.config.patch_dim), model)
    assert out.mse_patch.item() == 0.0
    _, batch, _ = tiny_ar()
    pixels, logits = model(batch)
    uniform = ar_losses_from(pixels, torch.zeros_like(logits), batch, model.config)
    assert uniform.ce_text.item() == pytest.approx(math.log(vocab.size), abs=1e-12)
    zeroed = ar_losses_from(torch.zeros_like(pixels), logits, batch, model.config)
    base = ar_losses_from(pixels, logits, batch, model.config)
    assert zeroed.ce_text.item() == base.ce_text.item()
    assert base.total.item() == pytest.approx(base.mse_patch.item() + base.ce_text.item(), abs=1e-12)


def test_without_patch_prediction_zeroes_mse_only():
    with_pp, batch, _ = tiny_ar(patch_prediction=True)
    without, _, _ = tiny_ar(patch_prediction=False)
    a, b = with_pp.losses(batch), without.losses(batch)
    assert b.mse_patch.item() == 0.0 and a.mse_patch.item() > 0
    assert a.pixel_predictions.shape == b.pixel_predictions.shape and a.logits.shape == b.logits.shape
    assert b.ce_text.item() == a.ce_text.item()


def test_rotary_scores_depend_on_offset_only():
    torch.manual_seed(0)
    attn = core.Attention(8, 2, bias=False).double()
    content = torch.randn(2, 8, dtype=torch.float64)

    def score(i, j):
        x = torch.zeros(1, max(i, j) + 1, 8, dtype=torch.float64)
        x[0, i], x[0, j] = content[0], content[1]
        cos, sin = core.rotary_tables(torch.arange(x.shape[1]), 4, dtype=torch.float64)
        q = core.apply_rotary(attn._split(attn.q(x)), cos, sin)
        k = core.apply_rotary(attn._split(attn.k(x)), cos, sin)
        return (q[..., i, :] * k[..., j, :]).sum(-1)

    assert torch.allclose(score(3, 1), score(9, 7), atol=1e-12)
    assert torch.allclose(score(1, 3), score(10, 12), atol=1e-12)
    assert not torch.allclose(score(3, 1), score(4, 1))


def test_perplexity_identities(vocab):
    assert perplexity_from_logits(torch.zeros(5, 2), torch.tensor([0, 1, 1, 0, 1])) == pytest.approx(2.0, abs=1e-12)
    model, _, _ = tiny_ar()
    ctx = tokens_only([65, 66, 67], model.config.patch_dim)
    ev = [68, 69, 70]
    _, logits = ar_forward(ctx.append_tokens(ev), model)
    logp = torch.log_softmax(logits, -1)
    hand = math.exp(-sum(float(logp[2 + i, t].detach()) for i, t in enumerate(ev)) / 3)
    assert perplexity(model, ctx, ev) == pytest.approx(hand, rel=1e-9)
    with pytest.raises(ValueError):
        perplexity(model, ctx, [])


def test_generate_contracts():
    model, _, _ = tiny_ar()
    ctx = tokens_only([65, 66], model.config.patch_dim)
    assert generate(model, ctx, 0) == []
    assert generate(model, ctx, 5) == generate(model, ctx, 5)
    assert generate(model, ctx, 5, temperature=1.0, seed=3) == generate(model, ctx, 5, temperature=1.0, seed=3)
    with pytest.raises(ValueError):
        generate(model, ctx, 1, temperature=-1)


def test_blank_like_keeps_layout(atlas):
    vocab = tiny_vocab()
    rc = RenderConfig(max_patches=8, prefix="", eos_black_patch=False)
    seq = make_ar_example("a cat sat on a mat", vocab, atlas, rc, ARDataConfig(4, 4, 8, 4))
    blank = blank_like(seq)
    assert np.array_equal(blank.kinds, seq.kinds) and np.array_equal(blank.token_ids, seq.token_ids)
    assert np.all(blank.patches[blank.kinds == PATCH] == 1.0)


def test_overfit_one_sentence_generates_continuation(atlas, vocab):
    torch.manual_seed(0)
    data = ARDataConfig(m_s=4, m_t=6, n_patches=8, row_width=8)
    rc = RenderConfig(max_patches=8, prefix="", eos_black_patch=False)
    seq = make_ar_example("a cat sat on a mat", vocab, atlas, rc, data)
    model = ARModel(ar_config_by_name("ar-tiny", vocab_size=vocab.size))
    batch = collate_mixed([seq], vocab.pad_id)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for _ in range(150):
        opt.zero_grad()
        model.losses(batch).total.backward()
        opt.step()
    n_ctx = 1 + data.n_patches + 1 + 1
    follow = [int(t) for t in seq.token_ids[n_ctx:]]
    ctx = build_mixed_input(render_line(vocab.decode(vocab.encode("a cat sat on a mat")[:4]), atlas, rc), [], vocab, 8)
    assert generate(model, ctx, len(follow)) == follow
    assert patch_reconstruction_mse(model, [seq]) < 0.5


def test_reference_configs():
    assert (AR_CONFIGS["ar-380m"].hidden, AR_CONFIGS["ar-380m"].intermediate, AR_CONFIGS["ar-380m"].heads, AR_CONFIGS["ar-380m"].layers) == (1024, 2816, 16, 24)
    big = AR_CONFIGS["ar-1.3b"]
    assert (big.hidden, big.intermediate, big.heads, big.layers) == (2048, 5504, 16, 24)
    tiny, small = AR_CONFIGS["ar-tiny"], AR_CONFIGS["ar-small"]
    assert (tiny.hidden, tiny.intermediate, tiny.heads, tiny.layers) == (64, 160, 4, 4)
    assert (small.hidden, small.intermediate, small.heads, small.layers) == (256, 704, 8, 8)
    for c in AR_CONFIGS.values():
        assert ARConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        ARConfig(hidden=12, heads=4)
