"""Metric suite, persistence baseline and the single-shot latency benchmark."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .encoder import EncoderConfig
from .errors import AllMasked
from .trainer import P2PModel, window_tensors
from .windowing import N_FEATURES, WindowBatch

REPORT_FORMAT = "p2p-report"
REPORT_VERSION = 1
MAPE_FLOOR = 1e-6
REGRESSION = ("bitrate", "jitter", "fps")
LABEL_FIELDS = {"bitrate": "label_bitrate_mbps", "jitter": "label_jitter_ms", "fps": "label_fps"}
MASK_FIELDS = {"jitter": "jitter_mask", "fps": "fps_mask"}


def regression_metrics(pred, truth, mask=None) -> dict:
    """RMSE, MAE, MAPE (%) and R^2 over unmasked points.

    MAPE skips targets with |y| < 1e-6; the number skipped is reported.
    R^2 is None with fewer than two points or a constant target.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in length")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        pred, truth = pred[m], truth[m]
    if pred.size == 0:
        raise AllMasked("no unmasked points")
    err = pred - truth
    big = np.abs(truth) >= MAPE_FLOOR
    mape = float(np.mean(np.abs(err[big] / truth[big])) * 100.0) if big.any() else None
    sst = float(np.sum((truth - truth.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err ** 2)) / sst if truth.size >= 2 and sst > 0 else None
    if truth.size >= 2 and sst == 0 and not err.any():
        r2 = 1.0
    return {
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "mae": float(np.mean(np.abs(err))),
        "mape": mape,
        "mape_excluded": int((~big).sum()),
        "r2": r2,
        "count": int(truth.size),
    }


def classification_metrics(prob, truth, threshold: float = 0.5) -> dict:
    """Confusion counts, per-class recall and F1, macro-F1 for the binary loss task."""
    prob = np.asarray(prob, dtype=np.float64)
    y = np.asarray(truth, dtype=bool)
    if prob.size == 0:
        raise AllMasked("no samples")
    yhat = prob >= threshold
    tp = int(np.sum(yhat & y))
    tn = int(np.sum(~yhat & ~y))
    fp = int(np.sum(yhat & ~y))
    fn = int(np.sum(~yhat & y))

    def ratio(a, b):
        return a / b if b else None

    rec1, rec0 = ratio(tp, tp + fn), ratio(tn, tn + fp)
    prec1, prec0 = ratio(tp, tp + fp), ratio(tn, tn + fn)

    def f1(p, r):
        if p is None or r is None:
            return None
        return 2 * p * r / (p + r) if p + r else 0.0

    f1s = [f1(prec0, rec0), f1(prec1, rec1)]
    present = [v for v in f1s if v is not None]
    return {
        "recall_0": rec0,
        "recall_1": rec1,
        "f1_per_class": f1s,
        "f1_macro": float(np.mean(present)) if present else None,
        "confusion": {"tn": tn, "fp": fp, "fn": fn, "tp": tp},
        "count": int(y.size),
    }


@dataclass
class Predictions:
    """Aligned per-sample predictions, labels and masks for one split."""

    pred: dict[str, np.ndarray]
    truth: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]

    def metrics(self) -> dict:
        out = {}
        for t in REGRESSION:
            try:
                out[t] = regression_metrics(self.pred[t], self.truth[t], self.mask[t])
            except AllMasked:
                out[t] = None
        out["loss"] = classification_metrics(self.pred["loss"], self.truth["loss"]) if self.truth["loss"].size else None
        return out


def _labels(samples) -> tuple[dict, dict]:
    truth = {t: np.array([getattr(s, f) for s in samples], dtype=np.float64) for t, f in LABEL_FIELDS.items()}
    truth["loss"] = np.array([s.label_loss for s in samples], dtype=bool)
    mask = {t: np.ones(len(samples), dtype=bool) for t in ("bitrate", "loss")}
    for t, f in MASK_FIELDS.items():
        mask[t] = np.array([getattr(s, f) for s in samples], dtype=bool)
    return truth, mask


def model_predictions(model: P2PModel, batches: Sequence[WindowBatch]) -> Predictions:
    samples = [s for b in batches for s in b.samples]
    pred = {t: [] for t in (*REGRESSION, "loss")}
    model.eval()
    with torch.no_grad():
        for b in batches:
            w = window_tensors(b, model.dtype)
            out = model.predict(w.features, w.L)
            for t in pred:
                pred[t].append(out[t].double().numpy())
    truth, mask = _labels(samples)
    cat = {t: np.concatenate(v) if v else np.empty(0) for t, v in pred.items()}
    return Predictions(cat, truth, mask)


def persistence_predictions(batches: Sequence[WindowBatch], window_s: float = 0.5) -> Predictions:
    """Each flow's labels from its previous window; first window per flow skipped.

    "Previous" means the immediately preceding window start; a flow absent in
    that window restarts its history.
    """
    last: dict = {}
    samples, prev = [], []
    for b in sorted(batches, key=lambda b: b.window_start):
        for s in b.samples:
            p = last.get(s.flow)
            if p is not None and math.isclose(s.window_start - p.window_start, window_s, rel_tol=0, abs_tol=1e-9):
                samples.append(s)
                prev.append(p)
            last[s.flow] = s
    truth, mask = _labels(samples)
    pred = {t: np.array([getattr(p, f) for p in prev], dtype=np.float64) for t, f in LABEL_FIELDS.items()}
    pred["loss"] = np.array([float(p.label_loss) for p in prev])
    # a target only counts when its persisted value was itself a valid label
    for t, f in MASK_FIELDS.items():
        mask[t] &= np.array([getattr(p, f) for p in prev], dtype=bool)
    return Predictions(pred, truth, mask)


def persistence_baseline(batches: Sequence[WindowBatch], window_s: float = 0.5) -> dict:
    return persistence_predictions(batches, window_s).metrics()


def paired_samples(batches: Sequence[WindowBatch], window_s: float = 0.5) -> list[bool]:
    """Per sample (in batch order): True when persistence has a previous window for it."""
    last: dict = {}
    flags = []
    for b in batches:
        for s in b.samples:
            p = last.get(s.flow)
            flags.append(p is not None and math.isclose(s.window_start - p.window_start, window_s,
                                                        rel_tol=0, abs_tol=1e-9))
            last[s.flow] = s
    return flags


def restrict(pr: Predictions, keep) -> Predictions:
    keep = np.asarray(keep, dtype=bool)
    return Predictions({k: v[keep] for k, v in pr.pred.items()}, {k: v[keep] for k, v in pr.truth.items()},
                       {k: v[keep] for k, v in pr.mask.items()})


def evaluate(model: P2PModel, batches: Sequence[WindowBatch], window_s: float = 0.5) -> dict:
    """Model and persistence metrics for the windows of one session."""
    return evaluate_sessions(model, {"session": batches}, window_s)


def evaluate_sessions(model: P2PModel, sessions: dict[str, Sequence[WindowBatch]], window_s: float = 0.5) -> dict:
    """Model and persistence metrics pooled over a split of sessions.

    ``model`` covers every sample; ``model_paired`` covers only the samples
    the persistence baseline can score, so the two are directly comparable.
    Persistence pairs never cross session boundaries.
    """
    full, paired, pers = [], [], []
    for name in sorted(sessions):
        bs = sorted(sessions[name], key=lambda b: b.window_start)
        pr = model_predictions(model, bs)
        base = persistence_predictions(bs, window_s)
        both = restrict(pr, paired_samples(bs, window_s))
        both.mask = base.mask  # score exactly the targets persistence scores
        full.append(pr)
        paired.append(both)
        pers.append(base)
    full, paired, base = _concat(full), _concat(paired), _concat(pers)
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "sessions": sorted(sessions),
        "samples": int(full.truth["loss"].size),
        "windows": sum(len(v) for v in sessions.values()),
        "model": full.metrics(),
        "model_paired": paired.metrics(),
        "persistence": base.metrics(),
    }


def _concat(parts: Sequence[Predictions]) -> Predictions:
    def cat(attr, key):
        return np.concatenate([getattr(p, attr)[key] for p in parts])

    keys = parts[0].pred.keys()
    return Predictions({k: cat("pred", k) for k in keys}, {k: cat("truth", k) for k in keys},
                       {k: cat("mask", k) for k in keys})


def side_by_side(reports: dict[str, dict]) -> dict:
    """Compact per-task comparison table across named reports (for ablations)."""
    rows = {}
    for name, rep in reports.items():
        m = rep["model"]
        rows[name] = {
            **{f"{t}_mae": (m[t] or {}).get("mae") for t in REGRESSION},
            **{f"{t}_rmse": (m[t] or {}).get("rmse") for t in REGRESSION},
            "loss_recall_1": (m["loss"] or {}).get("recall_1"),
            "loss_f1_macro": (m["loss"] or {}).get("f1_macro"),
        }
    first = next(iter(reports.values()))
    rows["persistence"] = {
        **{f"{t}_mae": (first["persistence"][t] or {}).get("mae") for t in REGRESSION},
        **{f"{t}_rmse": (first["persistence"][t] or {}).get("rmse") for t in REGRESSION},
        "loss_recall_1": (first["persistence"]["loss"] or {}).get("recall_1"),
        "loss_f1_macro": (first["persistence"]["loss"] or {}).get("f1_macro"),
    }
    return rows


# latency -------------------------------------------------------------------------------

@dataclass
class LatencyRow:
    flows: int
    single_shot_ms: dict = field(default_factory=dict)
    sequential_ms: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.sequential_ms["median"] / self.single_shot_ms["median"]


def _summary(samples: list[float]) -> dict:
    a = np.asarray(samples) * 1e3
    return {"median": float(np.median(a)), "p95": float(np.percentile(a, 95)), "reps": int(a.size)}


def latency_bench(model: P2PModel, flows: Sequence[int] = range(1, 12), reps: int = 200,
                  warmup: int = 10, seed: int = 0) -> list[LatencyRow]:
    """Median/p95 wall time: one single-shot forward vs L sequential single-flow forwards.

    The sequential baseline runs the same weights in vanilla mode, one flow
    per call. Timing is interleaved per repetition so drift affects both
    sides equally.
    """
    cfg = model.config
    vanilla = P2PModel(EncoderConfig(**{**cfg.__dict__, "mode": "vanilla"}), dtype=model.dtype)
    vanilla.load_state_dict(model.state_dict())
    vanilla.eval()
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    rows = []
    threads = torch.get_num_threads()
    torch.set_num_threads(1)  # one execution stream for stable timing
    try:
        with torch.inference_mode():
            for L in flows:
                x = torch.randn(cfg.n * L, N_FEATURES, generator=gen, dtype=model.dtype)
                parts = [x[i * cfg.n:(i + 1) * cfg.n] for i in range(L)]

                def single():
                    model.predict(x, L)

                def sequential():
                    for p in parts:
                        vanilla.predict(p, 1)

                for _ in range(warmup):
                    single()
                    sequential()
                ss, sq = [], []
                for _ in range(reps):
                    t = time.perf_counter()
                    single()
                    ss.append(time.perf_counter() - t)
                    t = time.perf_counter()
                    sequential()
                    sq.append(time.perf_counter() - t)
                rows.append(LatencyRow(L, _summary(ss), _summary(sq)))
    finally:
        torch.set_num_threads(threads)
    return rows


def latency_table(rows: Sequence[LatencyRow]) -> dict:
    return {
        str(r.flows): {"single_shot_ms": r.single_shot_ms, "sequential_ms": r.sequential_ms,
                       "speedup": r.speedup}
        for r in rows
    }
