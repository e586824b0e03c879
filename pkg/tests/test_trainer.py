import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TINY_TEXTS, tiny_vocab
from screenlm.nnet.checkpoint import load_checkpoint, snapshot
from screenlm.nnet.ptp import PTPModel, config_by_name
from screenlm.patchwork import MaskConfig
from screenlm.render import RenderConfig
from screenlm.trainer import (
    METRIC_COLUMNS,
    NonFiniteGradient,
    OptimState,
    Schedule,
    StabilityMonitor,
    TrainConfig,
    TrainingAborted,
    adamw_step,
    detect_plateau,
    epoch_order,
    lr_at,
    optimize,
    render_config_from,
    render_settings,
    run_pretraining,
)


def reference_adamw(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Plain-float AdamW with decoupled decay."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        theta -= lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adamw_scalar_matches_hand_formula():
    p = {"w": torch.tensor([1.5], dtype=torch.float64)}
    state = OptimState(weight_decay=0.1)
    adamw_step(p, {"w": torch.tensor([0.3], dtype=torch.float64)}, state, lr=0.01)
    # one step: m_hat = g, v_hat = g^2 so the step is lr * g / (|g| + eps)
    expect = 1.5 * (1 - 0.01 * 0.1) - 0.01 * 0.3 / (0.3 + 1e-8)
    assert p["w"].item() == pytest.approx(expect, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(grads=st.lists(st.floats(-5, 5), min_size=1, max_size=8), wd=st.sampled_from([0.0, 0.01, 0.3]))
def test_adamw_multistep_matches_reference(grads, wd):
    p = {"w": torch.tensor([0.7], dtype=torch.float64)}
    state = OptimState(weight_decay=wd)
    for g in grads:
        adamw_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, state, lr=1e-2)
    assert p["w"].item() == pytest.approx(reference_adamw(0.7, grads, 1e-2, wd=wd), abs=1e-12)
    assert state.exp_avg["w"].shape == p["w"].shape


def test_adamw_agrees_with_torch_adamw():
    torch.manual_seed(0)
    w = torch.randn(3, 4, dtype=torch.float64)
    mine = {"w": w.clone()}
    ref = torch.nn.Parameter(w.clone())
    opt = torch.optim.AdamW([ref], lr=3e-3, weight_decay=0.05)
    state = OptimState(weight_decay=0.05)
    for _ in range(10):
        g = torch.randn(3, 4, dtype=torch.float64)
        adamw_step(mine, {"w": g}, state, 3e-3)
        ref.grad = g
        opt.step()
    assert torch.allclose(mine["w"], ref.detach(), atol=1e-12)


def test_adamw_zero_grads_and_decay():
    p = {"a": torch.tensor([2.0, -1.0], dtype=torch.float64)}
    adamw_step(p, {"a": torch.zeros(2, dtype=torch.float64)}, OptimState(weight_decay=0.0), 0.1)
    assert p["a"].tolist() == [2.0, -1.0]
    adamw_step(p, {"a": torch.zeros(2, dtype=torch.float64)}, OptimState(weight_decay=0.5), 0.1)
    assert p["a"].tolist() == pytest.approx([2.0 * 0.95, -0.95], abs=1e-15)


def test_adamw_errors():
    p = {"a": torch.zeros(2), "b": torch.zeros(3)}
    with pytest.raises(NonFiniteGradient, match="'b'"):
        adamw_step(p, {"a": torch.zeros(2), "b": torch.tensor([0.0, float("nan"), 0.0])}, OptimState(), 0.1)
    with pytest.raises(ValueError, match="'a'"):
        adamw_step(p, {"a": torch.zeros(3)}, OptimState(), 0.1)


def test_lr_examples():
    s = Schedule(peak_lr=1e-3, min_lr=1e-5, warmup_steps=100, total_steps=1100)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 100) == 1e-3
    assert lr_at(s, 1100) == pytest.approx(1e-5, abs=1e-18)
    assert lr_at(s, 600) == pytest.approx(1e-5 + (1e-3 - 1e-5) / 2, rel=1e-12)
    lin = Schedule(peak_lr=1e-3, warmup_steps=10, total_steps=110, shape="linear")
    assert lr_at(lin, 110) == 0.0 and lr_at(lin, 60) == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        lr_at(s, 1101)
    with pytest.raises(ValueError):
        lr_at(s, -1)
    with pytest.raises(ValueError):
        Schedule(shape="step")


def test_reference_schedule_defaults():
    s = Schedule()
    assert (s.peak_lr, s.warmup_steps, s.shape) == (1.5e-4, 50_000, "cosine")


@settings(max_examples=50, deadline=None)
@given(warm=st.integers(0, 50), extra=st.integers(1, 200), shape=st.sampled_from(["cosine", "linear"]))
def test_lr_continuous_and_nonincreasing_after_warmup(warm, extra, shape):
    s = Schedule(peak_lr=1e-3, min_lr=1e-5, warmup_steps=warm, total_steps=warm + extra, shape=shape)
    lrs = [lr_at(s, t) for t in range(s.total_steps + 1)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
    if warm:
        # one warmup increment on the left of the boundary, decay step on the right
        assert abs(lrs[warm] - lrs[warm - 1]) <= 1e-3 / warm + 1e-15
        assert lrs[warm] == 1e-3


def test_spike_flag():
    mon = StabilityMonitor(window=10, k=3.0)
    rng = np.random.default_rng(0)
    flags = [mon.update(1.0 + 0.01 * rng.standard_normal())[0] for _ in range(30)]
    assert not any(flags)
    assert mon.update(5.0)[0]
    assert not mon.update(1.0)[0]
    fresh = StabilityMonitor(window=10, k=3.0)
    assert not fresh.update(100.0)[0]  # window not full


def test_plateau_flags():
    mon = StabilityMonitor(plateau_window=20)
    for _ in range(20):
        mon.update(2.0)
    assert detect_plateau(mon)
    mon = StabilityMonitor(plateau_window=20)
    for i in range(20):
        mon.update(10.0 - i)
    assert not detect_plateau(mon)


def test_plateau_then_drop_flips_once_at_drop():
    trace = [3.0] * 400 + [3.0 * math.exp(-0.05 * i) for i in range(1, 201)]
    mon = StabilityMonitor(plateau_window=200, tau=1e-5)
    flags = [mon.update(x)[1] for x in trace]
    first_true = flags.index(True)
    assert first_true == 199
    changes = [i for i in range(first_true + 1, len(flags)) if flags[i] != flags[i - 1]]
    assert changes == [400]


def test_epoch_order_is_permutation_per_epoch():
    gen = epoch_order(7, seed=3)
    first = [next(gen) for _ in range(7)]
    second = [next(gen) for _ in range(7)]
    assert sorted(first) == sorted(second) == list(range(7))
    again = epoch_order(7, seed=3)
    assert [next(again) for _ in range(7)] == first


def test_render_settings_roundtrip():
    rc = RenderConfig(max_patches=48, prefix="", eos_black_patch=False)
    assert render_config_from(render_settings(rc)) == rc


@pytest.fixture(scope="module")
def setup(atlas):
    vocab = tiny_vocab()
    cfg = config_by_name("ptp-tiny", vocab_size=vocab.size)
    rc = RenderConfig(max_patches=16, prefix="")
    return vocab, cfg, rc


def run(setup, atlas, steps, out=None, **kw):
    vocab, cfg, rc = setup
    train = TrainConfig(steps=steps, batch_size=2, ckpt_every=kw.pop("ckpt_every", 0))
    return run_pretraining("ptp", TINY_TEXTS, cfg, train, vocab, atlas, rc, seed=5, mask_config=MaskConfig(patch_rate=0.2), out_dir=out)


def test_zero_steps_checkpoint_equals_init(setup, atlas, tmp_path):
    res = run(setup, atlas, 0, tmp_path)
    init = snapshot(PTPModel(setup[1], seed=5))
    ckpt = load_checkpoint(res.checkpoint)
    assert ckpt.step == 0 and set(ckpt.tensors) == set(init)
    assert all(np.array_equal(ckpt.tensors[k], v) for k, v in init.items())
    assert ckpt.config["kind"] == "ptp" and ckpt.config["render.max_patches"] == "16"


def test_metrics_log_reproducible_and_cadence(setup, atlas, tmp_path):
    a = run(setup, atlas, 6, tmp_path / "a", ckpt_every=2)
    b = run(setup, atlas, 6, tmp_path / "b")
    assert a.log_text() == b.log_text()
    lines = (tmp_path / "a" / "metrics.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(METRIC_COLUMNS) and len(lines) == 7
    assert [p.name for p in a.checkpoints] == ["ckpt_000002.ptpc", "ckpt_000004.ptpc", "ckpt_000006.ptpc"]
    for m in a.metrics:
        assert m.total == pytest.approx(m.mse + m.ce)


def test_nonfinite_loss_aborts_with_diagnostic(tmp_path):
    model = torch.nn.Linear(2, 1)
    saved = []

    def ckpt(step, why):
        saved.append((step, why))
        return tmp_path / why

    def loss_fn(_):
        out = model(torch.ones(1, 2)).sum() * float("nan")
        return out, float("nan"), float("nan")

    with pytest.raises(TrainingAborted) as err:
        optimize(model, lambda s: None, loss_fn, TrainConfig(steps=10, nonfinite_patience=3), ckpt)
    assert saved == [(3, "diagnostic")] and err.value.checkpoint == tmp_path / "diagnostic"


def test_empty_corpus_and_bad_kind(setup, atlas):
    vocab, cfg, rc = setup
    with pytest.raises(ValueError):
        run_pretraining("ptp", [], cfg, TrainConfig(steps=1), vocab, atlas, rc)
    with pytest.raises(ValueError):
        run_pretraining("gan", TINY_TEXTS, cfg, TrainConfig(steps=1), vocab, atlas, rc)
