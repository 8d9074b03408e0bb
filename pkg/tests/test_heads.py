import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from p2p.errors import ShapeMismatch
from p2p.heads import (
    TASKS, Targets, TaskHeads, TaskWeights, compute_pos_weight, heads_forward, multitask_loss, task_losses,
    weighted_bce_with_logits,
)

D = torch.float64


def targets(n=4, jitter_mask=None, fps_mask=None, loss=None, value=0.0):
    full = torch.full((n,), value, dtype=D)
    return Targets(
        bitrate=full.clone(), jitter=full.clone(), fps=full.clone(),
        loss=torch.zeros(n, dtype=D) if loss is None else torch.tensor(loss, dtype=D),
        jitter_mask=torch.ones(n, dtype=torch.bool) if jitter_mask is None else torch.tensor(jitter_mask),
        fps_mask=torch.ones(n, dtype=torch.bool) if fps_mask is None else torch.tensor(fps_mask),
    )


def test_zero_parameters_give_half_probability():
    heads = TaskHeads(8, hidden=4, dtype=D)
    with torch.no_grad():
        for p in heads.parameters():
            p.zero_()
    assert heads_forward(torch.randn(8, dtype=D), heads) == (0.0, 0.0, 0.0, 0.5)
    with pytest.raises(ShapeMismatch):
        heads(torch.zeros(2, 7, dtype=D))
    with pytest.raises(ShapeMismatch):
        heads_forward(torch.zeros(2, 8, dtype=D), heads)


def test_head_closed_form(rng):
    heads = TaskHeads(6, hidden=5, dtype=D, generator=torch.Generator().manual_seed(2))
    x = rng.normal(size=(3, 6))
    out = heads(torch.from_numpy(x))
    for t in TASKS:
        w1, b1 = heads.w1[t].detach().numpy(), heads.b1[t].detach().numpy()
        w2, b2 = heads.w2[t].detach().numpy(), heads.b2[t].detach().numpy()
        h = x @ w1 + b1
        h = np.where(h > 0, h, 0.01 * h)
        assert np.allclose(out[t].detach().numpy(), (h @ w2 + b2)[:, 0], atol=1e-12)


def test_bce_examples():
    # p = 0.5 on a positive with weight 10: 10 * ln 2
    got = weighted_bce_with_logits(torch.zeros(1, dtype=D), torch.ones(1, dtype=D), 10.0)
    assert got.item() == pytest.approx(6.931, abs=5e-4)
    got = weighted_bce_with_logits(torch.zeros(1, dtype=D), torch.zeros(1, dtype=D), 10.0)
    assert got.item() == pytest.approx(math.log(2))
    # large logits stay finite
    big = weighted_bce_with_logits(torch.tensor([800.0, -800.0], dtype=D), torch.tensor([0.0, 1.0], dtype=D), 2.0)
    assert torch.allclose(big, torch.tensor([800.0, 1600.0], dtype=D))


def test_single_task_mae():
    preds = {t: torch.zeros(2, dtype=D) for t in TASKS}
    preds["bitrate"] = torch.tensor([2.0, -2.0], dtype=D)
    parts = task_losses(preds, targets(2), 1.0)
    assert parts["bitrate"].item() == 2.0
    assert parts["fps"].item() == 0.0


def test_multitask_closed_form():
    preds = {t: torch.tensor([0.5, -1.0, 2.0], dtype=D) for t in TASKS}
    tg = targets(3, loss=[1.0, 0.0, 1.0], value=1.0)
    w = TaskWeights(pos_weight=3.0, dtype=D)
    with torch.no_grad():
        w.s.copy_(torch.tensor([0.2, -0.3, 1.0, 0.0], dtype=D))
    total, parts = multitask_loss(preds, tg, w)
    mae = (0.5 + 2.0 + 1.0) / 3
    sig = 1 / (1 + np.exp(-np.array([0.5, -1.0, 2.0])))
    bce = np.mean([-3 * np.log(sig[0]), -np.log(1 - sig[1]), -3 * np.log(sig[2])])
    s = np.array([0.2, -0.3, 1.0, 0.0])
    expect = sum(np.exp(-s[i]) * v + s[i] for i, v in enumerate([mae, mae, mae, bce]))
    assert total.item() == pytest.approx(expect, abs=1e-12)
    assert parts["loss"] == pytest.approx(bce, abs=1e-12)


def test_pos_weight():
    assert compute_pos_weight([True] * 17 + [False] * 983) == pytest.approx(983 / 17)
    assert round(compute_pos_weight([True] * 17 + [False] * 983), 1) == 57.8
    assert compute_pos_weight([True, False] * 50) == 1.0
    assert compute_pos_weight([False] * 10) == 1.0
    assert compute_pos_weight([True] * 9 + [False]) == 1.0
    assert compute_pos_weight([True] + [False] * 5000) == 1000.0


def test_log_variance_gradient():
    preds = {t: torch.tensor([1.5, 0.0], dtype=D) for t in TASKS}
    w = TaskWeights(dtype=D)
    with torch.no_grad():
        w.s.copy_(torch.tensor([0.4, -0.2, 0.0, 0.7], dtype=D))
    total, parts = multitask_loss(preds, targets(2), w)
    total.backward()
    for i, t in enumerate(TASKS):
        expect = -math.exp(-w.s[i].item()) * parts[t] + 1
        assert w.s.grad[i].item() == pytest.approx(expect, abs=1e-12)


def test_masked_samples_get_no_gradient():
    preds = {t: torch.tensor([1.0, 2.0, 3.0], dtype=D, requires_grad=True) for t in TASKS}
    tg = targets(3, jitter_mask=[True, False, True], fps_mask=[False, False, True])
    total, _ = multitask_loss(preds, tg, TaskWeights(dtype=D))
    total.backward()
    assert preds["jitter"].grad[1].item() == 0.0
    assert preds["fps"].grad[:2].tolist() == [0.0, 0.0]
    assert preds["fps"].grad[2].item() != 0.0


def test_all_masked_task_is_dropped():
    preds = {t: torch.ones(2, dtype=D) for t in TASKS}
    tg = targets(2, fps_mask=[False, False])
    w = TaskWeights(dtype=D)
    with torch.no_grad():
        w.s.fill_(0.5)
    total, parts = multitask_loss(preds, tg, w)
    assert parts["fps"] is None
    expect = 2 * (math.exp(-0.5) * 1.0 + 0.5) + math.exp(-0.5) * math.log(1 + math.e) + 0.5
    assert total.item() == pytest.approx(expect, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(1, 1000), st.integers(0, 2**16))
def test_loss_non_negative_at_zero_log_variance(vals, pw, seed):
    g = torch.Generator().manual_seed(seed)
    n = len(vals)
    preds = {t: torch.tensor(vals, dtype=D) for t in TASKS}
    tg = targets(n, loss=(torch.rand(n, generator=g, dtype=D) < 0.5).to(D).tolist(),
                 value=float(torch.randn(1, generator=g, dtype=D)))
    total, _ = multitask_loss(preds, tg, TaskWeights(pos_weight=pw, dtype=D))
    assert total.item() >= 0.0
