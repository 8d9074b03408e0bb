import numpy as np
import pytest
import torch

from p2p.encoder import EncoderConfig
from p2p.errors import DataError, EmptySplit, TooFewSessions
from p2p.trainer import (
    P2PModel, TrainConfig, evaluate_loss, fit_feature_norm, load_checkpoint, save_checkpoint, save_result,
    split_sessions, train, window_tensors,
)
from p2p.windowing import FlowKey, WindowBatch, WindowSample

N = 8
SMALL = EncoderConfig(d_embed=8, heads=2, ffn_neurons=16, neighbourhood_k=2, n=N)


def sample(feats, lossy=False, flow=0, t=0.0, bitrate=1.0):
    key = FlowKey("10.0.0.1", "10.0.0.2", 5000 + flow, 6000, 100 + flow, 96)
    return WindowSample(key, np.asarray(feats, dtype=np.float64), bitrate, 1.0, 30.0, lossy, True, True, t)


def separable_windows(count, seed):
    """One flow per window; lossy windows have dilated gaps in their recent half."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        lossy = bool(i % 2)
        f = rng.normal(size=(N, 6))
        if lossy:
            f[N // 2:, 0] += 4.0
        out.append(WindowBatch(0.5 * i, [sample(f, lossy, t=0.5 * i)]))
    return out


def random_windows(count, seed, max_flows=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        L = int(rng.integers(1, max_flows + 1))
        out.append(WindowBatch(0.5 * i, [
            sample(rng.normal(size=(N, 6)), bool(rng.random() < 0.3), flow=j, t=0.5 * i,
                   bitrate=float(rng.uniform(0.5, 3)))
            for j in range(L)
        ]))
    return out


def test_split_proportions():
    ids = [f"s{i:03d}" for i in range(71)]
    tr, va, te = split_sessions(ids, seed=0)
    assert (len(tr), len(va), len(te)) == (50, 10, 11)
    assert sorted(tr + va + te) == ids
    assert split_sessions(list(reversed(ids)), seed=0) == (tr, va, te)
    assert split_sessions(ids, seed=1) != (tr, va, te)
    assert tuple(map(len, split_sessions(["a", "b", "c"]))) == (1, 1, 1)
    with pytest.raises(TooFewSessions):
        split_sessions(["a", "b"])


def test_feature_norm():
    wins = random_windows(5, 0)
    mean, std = fit_feature_norm(wins)
    x = np.concatenate([s.features for b in wins for s in b.samples])
    assert np.allclose(mean, x.mean(axis=0)) and np.allclose(std, x.std(axis=0))
    const = [WindowBatch(0.0, [sample(np.ones((N, 6)))])]
    assert np.all(fit_feature_norm(const)[1] == 1e-8)
    with pytest.raises(EmptySplit):
        fit_feature_norm([])


def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in range(6)] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5])


def test_zero_lr_leaves_parameters_unchanged():
    wins = random_windows(6, 1)
    cfg = TrainConfig(lr=0.0, epochs=2, precision=64)
    res = train(wins, random_windows(2, 2), SMALL, cfg)
    ref = train(wins, random_windows(2, 2), SMALL, TrainConfig(lr=0.0, epochs=0, precision=64))
    # epochs=0 returns the freshly built model; lr=0 must not move it
    fresh = P2PModel(SMALL, dtype=torch.float64)
    for (name, a), b in zip(res.model.state_dict().items(), ref.model.state_dict().values()):
        assert torch.equal(a, b), name
    assert fresh.encoder.wq.shape == res.model.encoder.wq.shape


def test_best_checkpoint_is_minimum():
    res = train(random_windows(12, 3), random_windows(4, 4), SMALL, TrainConfig(epochs=4, precision=64, lr=3e-3))
    losses = [h["val_loss"] for h in res.history]
    assert res.best_val_loss == min(losses)
    assert res.best_epoch == int(np.argmin(losses))
    again, _ = evaluate_loss(res.model, [window_tensors(b) for b in random_windows(4, 4)])
    assert again == pytest.approx(res.best_val_loss, rel=1e-12)


def test_learns_separable_loss_labels():
    # pilot: validation BCE 0.025 after epoch 0, 0.001 from epoch 1 on
    res = train(separable_windows(512, 5), separable_windows(64, 6), SMALL,
                TrainConfig(epochs=5, precision=64, lr=3e-3))
    assert res.history[-1]["val_tasks"]["loss"] < 0.1


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, precision=64)
    a = train(random_windows(10, 7), random_windows(3, 8), SMALL, cfg)
    b = train(random_windows(10, 7), random_windows(3, 8), SMALL, cfg)
    assert a.history == b.history
    for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(x, y)


def test_empty_splits_rejected():
    with pytest.raises(EmptySplit):
        train([], random_windows(1, 0), SMALL)
    with pytest.raises(EmptySplit):
        train(random_windows(1, 0), [], SMALL)


def test_checkpoint_roundtrip(tmp_path):
    cfg = TrainConfig(epochs=1, precision=64)
    res = train(random_windows(6, 9), random_windows(2, 10), SMALL, cfg)
    path = tmp_path / "m.npz"
    save_result(path, res, cfg, {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.epoch == res.best_epoch and ck.val_loss == res.best_val_loss
    assert ck.train_config == cfg and ck.extra == {"note": "x"} and ck.history == res.history
    for k, v in res.model.state_dict().items():
        assert torch.equal(ck.model.state_dict()[k], v), k
    w = window_tensors(random_windows(1, 11)[0])
    with torch.no_grad():
        a, b = res.model.predict(w.features, w.L), ck.model.predict(w.features, w.L)
    assert all(torch.equal(a[t], b[t]) for t in a)
    save_checkpoint(tmp_path / "again.npz", ck.model, ck.epoch, ck.val_loss, ck.train_config, ck.history,
                    ck.optimizer_state, ck.extra)
    assert (tmp_path / "again.npz").read_bytes() == path.read_bytes()


def test_bad_checkpoints(tmp_path):
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(junk)
    other = tmp_path / "other.npz"
    np.savez(other, a=np.zeros(3))
    with pytest.raises(DataError):
        load_checkpoint(other)


def test_resume_matches_uninterrupted(tmp_path):
    trw, vaw = random_windows(10, 12), random_windows(3, 13)
    full = train(trw, vaw, SMALL, TrainConfig(epochs=3, precision=64))
    first = train(trw, vaw, SMALL, TrainConfig(epochs=1, precision=64))
    assert first.best_epoch == 0
    save_result(tmp_path / "e0.npz", first, TrainConfig(epochs=1, precision=64))
    ck = load_checkpoint(tmp_path / "e0.npz")
    rest = train(trw, vaw, SMALL, TrainConfig(epochs=3, precision=64), resume=ck)
    assert [h["val_loss"] for h in rest.history] == pytest.approx([h["val_loss"] for h in full.history], rel=1e-9)
    for x, y in zip(full.model.state_dict().values(), rest.model.state_dict().values()):
        assert torch.allclose(x, y, rtol=1e-9, atol=1e-12)
