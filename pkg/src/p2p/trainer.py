"""Session splits, feature normalisation, training loop and checkpoints."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoder import Encoder, EncoderConfig
from .engine import ADAM_BETAS, ADAM_EPS, dtype_for
from .errors import DataError, DivergedLoss, EmptySplit, TooFewSessions
from .heads import TASKS, Targets, TaskHeads, TaskWeights, compute_pos_weight, multitask_loss
from .windowing import N_FEATURES, WindowBatch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "p2p-checkpoint"
CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-8
SPLIT_PARTS = (50, 10, 11)  # train / validation / test proportions


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay_every_epochs: int = 2
    lr_decay_factor: float = 0.1
    batch_windows: int = 8
    epochs: int = 6
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        from .errors import ConfigError

        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_windows < 1 or self.epochs < 0 or self.lr_decay_every_epochs < 1:
            raise ConfigError("batch_windows and lr_decay_every_epochs must be >= 1, epochs >= 0")
        dtype_for(self.precision)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)


def split_sessions(ids: Sequence[str], seed: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Seeded shuffle into train/validation/test in 50:10:11 proportions."""
    ids = sorted(ids)
    if len(ids) < 3:
        raise TooFewSessions(f"need at least 3 sessions, got {len(ids)}")
    total = sum(SPLIT_PARTS)
    n_val = max(1, round(len(ids) * SPLIT_PARTS[1] / total))
    n_test = max(1, round(len(ids) * SPLIT_PARTS[2] / total))
    n_train = len(ids) - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = 1, 1, len(ids) - 2
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def fit_feature_norm(batches: Sequence[WindowBatch]) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and floored std over every feature row of the split."""
    rows = [s.features for b in batches for s in b.samples]
    if not rows:
        raise EmptySplit("cannot fit feature statistics on an empty split")
    x = np.concatenate(rows, axis=0)
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


class P2PModel(nn.Module):
    """Encoder, task heads, task weights and feature statistics as one module."""

    def __init__(self, config: EncoderConfig, dtype=torch.float64, seed: int = 0, pos_weight: float = 1.0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.encoder = Encoder(config, dtype=dtype, generator=gen)
        self.heads = TaskHeads(config.n, dtype=dtype, generator=gen, slope=config.leaky_slope)
        self.weights = TaskWeights(pos_weight, dtype=dtype)
        self.register_buffer("feat_mean", torch.zeros(N_FEATURES, dtype=dtype))
        self.register_buffer("feat_std", torch.ones(N_FEATURES, dtype=dtype))

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def dtype(self) -> torch.dtype:
        return self.feat_mean.dtype

    def set_feature_norm(self, mean, std) -> None:
        self.feat_mean.copy_(torch.as_tensor(mean, dtype=self.dtype))
        self.feat_std.copy_(torch.as_tensor(std, dtype=self.dtype))

    def normalize(self, features: torch.Tensor) -> torch.Tensor:
        return (features - self.feat_mean) / self.feat_std

    def forward(self, features: torch.Tensor, L: int, details: dict | None = None) -> dict[str, torch.Tensor]:
        """Raw per-flow outputs for one window; ``features`` are unnormalised (n*L, 6)."""
        return self.heads(self.encoder(self.normalize(features), L, details))

    def predict(self, features: torch.Tensor, L: int) -> dict[str, torch.Tensor]:
        out = self(features, L)
        out["loss"] = torch.sigmoid(out["loss"])
        return out


# batch tensors -------------------------------------------------------------------------

@dataclass
class WindowTensors:
    features: torch.Tensor  # (n*L, 6), unnormalised
    L: int
    targets: Targets


def window_tensors(batch: WindowBatch, dtype=torch.float64) -> WindowTensors:
    s = batch.samples
    feats = torch.from_numpy(np.concatenate([x.features for x in s], axis=0)).to(dtype)

    def col(name, dt=dtype):
        return torch.tensor([getattr(x, name) for x in s], dtype=dt)

    return WindowTensors(feats, len(s), Targets(
        bitrate=col("label_bitrate_mbps"),
        jitter=col("label_jitter_ms"),
        fps=col("label_fps"),
        loss=col("label_loss"),
        jitter_mask=col("jitter_mask", torch.bool),
        fps_mask=col("fps_mask", torch.bool),
    ))


def _forward_many(model: P2PModel, windows: Sequence[WindowTensors]) -> tuple[dict, Targets]:
    outs = [model(w.features, w.L) for w in windows]
    preds = {t: torch.cat([o[t] for o in outs]) for t in TASKS}
    return preds, Targets.cat([w.targets for w in windows])


def evaluate_loss(model: P2PModel, windows: Sequence[WindowTensors]) -> tuple[float, dict]:
    """Total multitask loss pooled over every sample of the given windows."""
    if not windows:
        raise EmptySplit("no windows to evaluate")
    with torch.no_grad():
        preds, targets = _forward_many(model, windows)
        total, parts = multitask_loss(preds, targets, model.weights)
    return float(total), parts


def init_head_biases(model: P2PModel, batches: Sequence[WindowBatch]) -> None:
    """Start each regression head at the median training label of its task."""
    samples = [s for b in batches for s in b.samples]
    picks = {
        "bitrate": [s.label_bitrate_mbps for s in samples],
        "jitter": [s.label_jitter_ms for s in samples if s.jitter_mask],
        "fps": [s.label_fps for s in samples if s.fps_mask],
    }
    with torch.no_grad():
        for task, vals in picks.items():
            if vals:
                model.heads.b2[task].fill_(float(np.median(vals)))


# training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: P2PModel
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)


def build_model(train: Sequence[WindowBatch], enc_config: EncoderConfig, config: TrainConfig) -> P2PModel:
    model = P2PModel(enc_config, dtype=dtype_for(config.precision), seed=config.seed,
                     pos_weight=compute_pos_weight([s.label_loss for b in train for s in b.samples]))
    model.set_feature_norm(*fit_feature_norm(train))
    init_head_biases(model, train)
    return model


def make_optimizer(model: P2PModel, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def train(
    train_batches: Sequence[WindowBatch],
    val_batches: Sequence[WindowBatch],
    enc_config: EncoderConfig | None = None,
    config: TrainConfig | None = None,
    resume: "Checkpoint | None" = None,
) -> TrainResult:
    """Adam with staged LR decay; returns the lowest-validation-loss model.

    One optimizer step per ``batch_windows`` shuffled windows. Each window is
    encoded single-shot; the multitask loss is pooled over all samples of the
    step so sparse tasks (loss events, video-only FPS) see the whole step.
    """
    config = config or TrainConfig()
    enc_config = enc_config or EncoderConfig()
    if not train_batches:
        raise EmptySplit("training split is empty")
    if not val_batches:
        raise EmptySplit("validation split is empty")
    dtype = dtype_for(config.precision)
    if resume is not None:
        model = resume.model
        start_epoch = resume.epoch + 1
        history = list(resume.history)
    else:
        model = build_model(train_batches, enc_config, config)
        start_epoch, history = 0, []
    opt = make_optimizer(model, config)
    if resume is not None and resume.optimizer_state is not None:
        opt.load_state_dict(resume.optimizer_state)

    tr = [window_tensors(b, dtype) for b in train_batches]
    va = [window_tensors(b, dtype) for b in val_batches]
    best_state = copy.deepcopy(model.state_dict())
    best_opt = copy.deepcopy(opt.state_dict())
    best_loss, best_epoch = (resume.val_loss, resume.epoch) if resume is not None else (math.inf, -1)

    for epoch in range(start_epoch, config.epochs):
        lr = config.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(tr))
        sums = {t: 0.0 for t in TASKS}
        counts = {t: 0 for t in TASKS}
        total_sum = 0.0
        model.train()
        for start in range(0, len(order), config.batch_windows):
            chunk = [tr[i] for i in order[start:start + config.batch_windows]]
            opt.zero_grad(set_to_none=True)
            preds, targets = _forward_many(model, chunk)
            total, parts = multitask_loss(preds, targets, model.weights)
            if not torch.isfinite(total):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}, step {start // config.batch_windows}")
            total.backward()
            opt.step()
            total_sum += float(total.detach())
            for t, v in parts.items():
                if v is not None:
                    sums[t] += v
                    counts[t] += 1
        model.eval()
        val_loss, val_parts = evaluate_loss(model, va)
        n_steps = math.ceil(len(order) / config.batch_windows)
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_sum / n_steps,
            "train_tasks": {t: sums[t] / counts[t] if counts[t] else None for t in TASKS},
            "val_loss": val_loss,
            "val_tasks": val_parts,
        }
        history.append(rec)
        log.info("epoch %d lr %.0e train %.4f val %.4f", epoch, lr, rec["train_loss"], val_loss)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
            best_opt = copy.deepcopy(opt.state_dict())

    model.load_state_dict(best_state)
    model.optimizer_state = best_opt
    return TrainResult(model, best_epoch, best_loss, history)


# checkpoints ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: P2PModel
    epoch: int
    val_loss: float
    train_config: TrainConfig
    history: list[dict]
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _optimizer_arrays(state: dict | None) -> tuple[dict, dict]:
    arrays, meta = {}, {}
    if not state:
        return arrays, meta
    meta["param_groups"] = state["param_groups"]
    for pid, st in state["state"].items():
        for k, v in st.items():
            arrays[f"optim/{pid}/{k}"] = v.detach().cpu().numpy()
    return arrays, meta


def save_checkpoint(path: str | Path, model: P2PModel, epoch: int, val_loss: float,
                    train_config: TrainConfig, history: Sequence[dict] = (),
                    optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    """Write a versioned .npz container: tensors plus a JSON metadata record."""
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    opt_arrays, opt_meta = _optimizer_arrays(optimizer_state)
    arrays.update(opt_arrays)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder": asdict(model.config),
        "train": asdict(train_config),
        "dtype": "float64" if model.dtype == torch.float64 else "float32",
        "epoch": epoch,
        "val_loss": val_loss,
        "history": list(history),
        "rng": {"seed": train_config.seed, "next_epoch": epoch + 1},
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc
    with data:
        if "__meta__" not in data.files:
            raise DataError(f"{path}: not a checkpoint")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint format")
        dtype = torch.float64 if meta["dtype"] == "float64" else torch.float32
        model = P2PModel(EncoderConfig(**meta["encoder"]), dtype=dtype)
        state = {k[len("model/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("model/")}
        model.load_state_dict(state)
        opt_state = None
        if meta["optimizer"]:
            per: dict[int, dict] = {}
            for k in data.files:
                if k.startswith("optim/"):
                    _, pid, name = k.split("/")
                    per.setdefault(int(pid), {})[name] = torch.from_numpy(data[k].copy())
            opt_state = {"state": per, "param_groups": meta["optimizer"]["param_groups"]}
    model.eval()
    return Checkpoint(model, meta["epoch"], meta["val_loss"], TrainConfig(**meta["train"]),
                      meta["history"], opt_state, meta.get("extra", {}))


def save_result(path: str | Path, result: TrainResult, config: TrainConfig, extra: dict | None = None) -> None:
    save_checkpoint(path, result.model, result.best_epoch, result.best_val_loss, config,
                    result.history, getattr(result.model, "optimizer_state", None), extra)
