"""Differentiable numerical substrate.

Tensors and the gradient tape are torch's; this module pins down the exact
operation contracts the model relies on (masking, tie-breaking, stability)
and supplies a finite-difference gradient checker that is independent of
autograd.
"""
from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numba
import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyRow, ShapeMismatch

LEAKY_SLOPE = 0.01
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Mutation switch used to prove the self-test catches a broken max-pool backward.
MUTATE_MAXPOOL_BACKWARD = os.environ.get("P2P_MUTATION", "") == "maxpool"


def dtype_for(precision: int) -> torch.dtype:
    if precision == 64:
        return torch.float64
    if precision == 32:
        return torch.float32
    raise ValueError(f"precision must be 32 or 64, got {precision}")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """y = x W + 1 bias^T."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: x has {x.shape[-1]} cols, weight has {weight.shape[0]} rows")
    if bias is None:
        return x @ weight
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"linear: bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    if x.ndim == 2:
        return torch.addmm(bias, x, weight)
    return x @ weight + bias


def masked_softmax_rows(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries come out exactly 0. A row with no unmasked entry raises
    EmptyRow. Leading batch axes are allowed; ``mask`` must broadcast.
    """
    mask = mask.to(torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise EmptyRow("masked_softmax_rows: a row has no unmasked entry")
    # torch.softmax subtracts the row max internally; exp(-inf) is exactly 0
    return torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise ShapeMismatch(f"layer_norm: gain/shift length must be {x.shape[-1]}")
    # biased variance, eps inside the square root
    return F.layer_norm(x, (x.shape[-1],), gain, shift, eps)


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, slope)


class _RowMaxPool(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        # torch.argmax returns the first maximal index on ties
        idx = torch.argmax(x, dim=-1)
        values = torch.gather(x, -1, idx.unsqueeze(-1)).squeeze(-1)
        ctx.save_for_backward(idx)
        ctx.in_shape = x.shape
        ctx.mark_non_differentiable(idx)
        return values, idx

    @staticmethod
    def backward(ctx, grad_values, grad_idx):
        (idx,) = ctx.saved_tensors
        grad = grad_values.new_zeros(ctx.in_shape)
        if MUTATE_MAXPOOL_BACKWARD:
            idx = torch.zeros_like(idx)
        grad.scatter_(-1, idx.unsqueeze(-1), grad_values.unsqueeze(-1))
        return grad


def row_max_pool(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Max over the last axis; backward sends each row's gradient to its argmax."""
    if x.shape[-1] < 1:
        raise ShapeMismatch("row_max_pool: need at least one column")
    return _RowMaxPool.apply(x)


@numba.njit(cache=True, fastmath=True)
def _block_argmax(qt, kt, n, idx, out):  # pragma: no cover - compiled
    # qt (h, dh, R), kt (h, dh, C=L*n); idx and out (h, L, R). Rows are the
    # vector lanes so the running max is elementwise; strict '>' keeps first maxima.
    h, dh, R = qt.shape
    L = kt.shape[2] // n
    acc = np.empty(R, qt.dtype)
    for a in range(h):
        for g in range(L):
            ix = idx[a, g]
            best = out[a, g]
            for r in range(R):
                best[r] = -np.inf
                ix[r] = 0
            for j in range(n):
                c = g * n + j
                kc = kt[a, 0, c]
                q0 = qt[a, 0]
                for r in range(R):
                    acc[r] = q0[r] * kc
                for d in range(1, dh):
                    kc = kt[a, d, c]
                    qd = qt[a, d]
                    for r in range(R):
                        acc[r] += qd[r] * kc
                for r in range(R):
                    if acc[r] > best[r]:
                        best[r] = acc[r]
                        ix[r] = j


class _BlockRowMax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, k, n, scale):
        h, R, dh = q.shape
        L = k.shape[1] // n
        qt = q.detach().transpose(1, 2).contiguous().numpy()
        kt = k.detach().transpose(1, 2).contiguous().numpy()
        idx = np.empty((h, L, R), dtype=np.int32)
        best = np.empty((h, L, R), dtype=qt.dtype)
        _block_argmax(qt, kt, n, idx, best)
        idx = torch.from_numpy(idx).permute(0, 2, 1).long()  # (h, R, L)
        values = torch.from_numpy(best).permute(0, 2, 1) * scale
        col = idx + torch.arange(L).view(1, 1, L) * n
        ctx.save_for_backward(q, k, col)
        ctx.scale = scale
        ctx.mark_non_differentiable(idx)
        return values, idx

    @staticmethod
    def backward(ctx, grad, grad_idx):
        q, k, col = ctx.saved_tensors
        h, R, dh = q.shape
        L = col.shape[-1]
        if MUTATE_MAXPOOL_BACKWARD:
            col = (col // (k.shape[1] // L)) * (k.shape[1] // L)
        g = grad * ctx.scale
        flat = col.reshape(h, R * L, 1).expand(-1, -1, dh)
        k_sel = torch.gather(k, 1, flat).view(h, R, L, dh)
        dq = (g.unsqueeze(-1) * k_sel).sum(2)
        contrib = (g.unsqueeze(-1) * q.unsqueeze(2)).reshape(h, R * L, dh)
        dk = torch.zeros_like(k).scatter_add_(1, flat, contrib)
        return dq, dk, None, None


def block_row_max(q: torch.Tensor, k: torch.Tensor, n: int, scale: float = 1.0
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Row maxima of ``scale * q k^T`` within each block of ``n`` key columns.

    q is (h, R, dh) and k is (h, L*n, dh); returns values and in-block argmax
    indices of shape (h, R, L). Equal to ``row_max_pool`` applied to each
    (R x n) key block, without materializing the logits.
    """
    if q.ndim != 3 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeMismatch(f"block_row_max: bad shapes {tuple(q.shape)}, {tuple(k.shape)}")
    if k.shape[1] % n:
        raise ShapeMismatch(f"block_row_max: {k.shape[1]} keys not a multiple of n={n}")
    return _BlockRowMax.apply(q, k, n, scale)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    n_probe: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between autograd and central differences.

    ``f`` re-evaluates the scalar objective from the current contents of
    ``params`` (leaf tensors with requires_grad). When ``n_probe`` is set,
    that many entries are drawn uniformly over all parameters; otherwise
    every entry is probed.
    """
    for p in params:
        p.grad = None
    loss = f()
    analytic = torch.autograd.grad(loss, list(params), allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if n_probe is None or n_probe >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=n_probe, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for k in flat:
            pi = int(np.searchsorted(offsets, k, side="right") - 1)
            j = int(k - offsets[pi])
            view = params[pi].data.view(-1)
            orig = view[j].item()
            view[j] = orig + eps
            up = f().item()
            view[j] = orig - eps
            down = f().item()
            view[j] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[pi].reshape(-1)[j].item()
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if not math.isfinite(err):
                return float("inf")
            worst = max(worst, err)
    return worst
