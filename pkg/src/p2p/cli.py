"""``p2p`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 bad input data,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import GlobalConfig, load_config, setup_logging
from .errors import P2PError, UsageError
from .evaluator import evaluate_sessions, latency_bench, latency_table, side_by_side
from .ingest import IngestStats, ingest_pcap, read_packet_log, write_packet_log
from .synth import generate, load_scenario, scenario_to_json, training_corpus, write_truth
from .trainer import P2PModel, load_checkpoint, save_result, split_sessions, train
from .windowing import PacketTable, build_dataset, read_dataset_dir, window_at, write_dataset

log = logging.getLogger("p2p")

PCAP_MAGIC = {b"\xa1\xb2\xc3\xd4", b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\x3c\x4d", b"\x4d\x3c\xb2\xa1", b"\x0a\x0d\x0d\x0a"}
ATTENTION_FORMAT = "p2p-attention"
PREDICTION_FORMAT = "p2p-predictions"
FORMAT_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flow_range(raw: str) -> list[int]:
    """'1..11', '3' or '1,2,4'."""
    try:
        if ".." in raw:
            a, b = raw.split("..")
            flows = list(range(int(a), int(b) + 1))
        else:
            flows = [int(p) for p in raw.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad flow range {raw!r}") from exc
    if not flows or min(flows) < 1:
        raise argparse.ArgumentTypeError("flow counts must be >= 1")
    return flows


def _global_options(default) -> argparse.ArgumentParser:
    g = _Parser(add_help=False)
    g.add_argument("--config", default=default, help="INI configuration file")
    g.add_argument("--seed", type=int, default=default, help="random seed (training, synthesis, benchmarks)")
    g.add_argument("--precision", type=int, choices=(32, 64), default=default, help="float width for training")
    g.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"), default=default)
    return g


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; the copy on
    # each subcommand must not reset values given before it
    common = _global_options(argparse.SUPPRESS)
    p = _Parser(prog="p2p", description="Per-flow QoS prediction for real-time media traffic.",
                parents=[_global_options(None)])
    p.add_argument("--version", action="version", version=f"p2p {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("ingest", parents=[common], help="pcap/pcapng -> packet log")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--udp-only", action="store_true", help="only UDP is inspected (always true)")

    c = sub.add_parser("dataset", parents=[common], help="packet log or capture -> windowed dataset")
    c.add_argument("--input", required=True, help="packet log or pcap/pcapng")
    c.add_argument("--output", required=True, help="dataset file (.jsonl or .jsonl.gz)")
    c.add_argument("--session", help="session name stored in the header (default: input stem)")

    c = sub.add_parser("synth", parents=[common], help="synthetic sessions with ground truth")
    c.add_argument("--scenario", help="scenario INI file")
    c.add_argument("--out", help="packet log output (with --scenario)")
    c.add_argument("--truth", help="ground-truth JSON output (with --scenario)")
    c.add_argument("--dataset", help="also write the windowed dataset here (with --scenario)")
    c.add_argument("--corpus", type=int, metavar="N", help="write N benchmark-style sessions as datasets")
    c.add_argument("--duration", type=float, default=220.0, help="seconds per corpus session")
    c.add_argument("--out-dir", help="corpus output directory")

    c = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    c.add_argument("--dataset", required=True)
    c.add_argument("--out", required=True, help="checkpoint path")
    c.add_argument("--resume", help="continue from this checkpoint")
    c.add_argument("--epochs", type=int)
    c.add_argument("--mode", choices=("dual_attention", "vanilla"))

    c = sub.add_parser("eval", parents=[common], help="score checkpoints against persistence")
    c.add_argument("--ckpt", required=True, nargs="+",
                   help="one checkpoint, or several for a side-by-side ablation report")
    c.add_argument("--dataset", required=True)
    c.add_argument("--report", required=True)
    c.add_argument("--split", choices=("test", "all"), default="test",
                   help="sessions to score: the checkpoint's test split (default) or all")

    c = sub.add_parser("predict", parents=[common], help="predict every active flow at time t")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--log", required=True, help="packet log or pcap/pcapng")
    c.add_argument("--t", type=float, required=True, help="window start in seconds")
    c.add_argument("--threshold", type=float, default=0.5)
    c.add_argument("--output", help="JSON output (default: stdout)")
    c.add_argument("--dump-attention", help="write attention blocks (.npz)")

    c = sub.add_parser("bench", parents=[common], help="single-shot vs sequential latency")
    c.add_argument("--ckpt", help="checkpoint (default: freshly initialised default model)")
    c.add_argument("--flows", type=_flow_range, default=list(range(1, 12)))
    c.add_argument("--reps", type=int, default=200)
    c.add_argument("--report", help="JSON output (default: stdout)")

    c = sub.add_parser("selftest", parents=[common], help="built-in numerical checks")
    c.add_argument("--grad", action="store_true", help="include the end-to-end gradient check")
    return p


def _config(args) -> GlobalConfig:
    train_over = {"seed": args.seed, "precision": args.precision, "epochs": getattr(args, "epochs", None)}
    enc_over = {"mode": getattr(args, "mode", None)}
    return load_config(args.config, {
        "train": train_over, "encoder": enc_over, "logging": {"level": args.log_level},
    })


def _is_capture(path: str) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) in PCAP_MAGIC
    except OSError:
        return False


def _load_packets(path: str) -> PacketTable:
    records = ingest_pcap(path) if _is_capture(path) else read_packet_log(path)
    return PacketTable.from_records(records)


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_ingest(args, cfg: GlobalConfig) -> int:
    stats = IngestStats()
    n = write_packet_log(ingest_pcap(args.input, True, stats), args.output)
    log.info("wrote %d packets to %s", n, args.output)
    return 0


def cmd_dataset(args, cfg: GlobalConfig) -> int:
    table = _load_packets(args.input)
    batches = build_dataset(table, cfg.windowing)
    session = args.session or Path(args.input).name.split(".")[0]
    write_dataset(batches, args.output, cfg.windowing, session)
    log.info("wrote %d windows (%d samples) to %s", len(batches), sum(len(b) for b in batches), args.output)
    return 0


def cmd_synth(args, cfg: GlobalConfig) -> int:
    if args.corpus is not None:
        if not args.out_dir:
            raise UsageError("--corpus needs --out-dir")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        seed = cfg.train.seed if args.seed is None else args.seed
        for i, sc in enumerate(training_corpus(args.corpus, args.duration, seed=seed)):
            name = f"s{i:03d}"
            batches = build_dataset(generate(sc).table, cfg.windowing)
            write_dataset(batches, out / f"{name}.jsonl.gz", cfg.windowing, name)
            log.info("%s: %d windows", name, len(batches))
        return 0
    if not (args.scenario and args.out and args.truth):
        raise UsageError("synth needs --scenario, --out and --truth (or --corpus N --out-dir DIR)")
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    session = generate(sc)
    n = session.write_log(args.out)
    write_truth(session.truth, args.truth)
    if args.dataset:
        write_dataset(build_dataset(session.table, cfg.windowing), args.dataset, cfg.windowing,
                      Path(args.out).name.split(".")[0])
    log.info("wrote %d packets for %d flows (%s)", n, len(sc.flows), json.dumps(scenario_to_json(sc))[:80])
    return 0


def cmd_train(args, cfg: GlobalConfig) -> int:
    sessions = read_dataset_dir(args.dataset)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and "split" in resume.extra:
        split = resume.extra["split"]
        tr, va, te = split["train"], split["val"], split["test"]
    else:
        tr, va, te = split_sessions(sorted(sessions), cfg.train.seed)
    missing = [s for s in tr + va if s not in sessions]
    if missing:
        raise UsageError(f"dataset lacks sessions {missing} named by the checkpoint split")
    t = time.perf_counter()
    result = train([b for s in tr for b in sessions[s]], [b for s in va for b in sessions[s]],
                   cfg.encoder if resume is None else resume.model.config, cfg.train, resume)
    extra = {"split": {"train": tr, "val": va, "test": te}, "config": cfg.echo(),
             "train_seconds": round(time.perf_counter() - t, 3)}
    save_result(args.out, result, cfg.train, extra)
    log.info("best epoch %d, validation loss %.4f, saved %s", result.best_epoch, result.best_val_loss, args.out)
    return 0


def _eval_one(path, sessions, split: str, cfg: GlobalConfig) -> dict:
    ck = load_checkpoint(path)
    if split == "test" and "split" in ck.extra:
        names = [s for s in ck.extra["split"]["test"] if s in sessions]
        if not names:
            raise UsageError("none of the checkpoint's test sessions are in this dataset; use --split all")
    else:
        names = sorted(sessions)
    report = evaluate_sessions(ck.model, {s: sessions[s] for s in names}, cfg.windowing.window_s)
    report["checkpoint"] = str(path)
    report["mode"] = ck.model.config.mode
    return report


def cmd_eval(args, cfg: GlobalConfig) -> int:
    sessions = read_dataset_dir(args.dataset)
    reports = {str(p): _eval_one(p, sessions, args.split, cfg) for p in args.ckpt}
    if len(reports) == 1:
        report = next(iter(reports.values()))
    else:
        if len({tuple(r["sessions"]) for r in reports.values()}) > 1:
            raise UsageError("checkpoints were scored on different sessions; use --split all")
        report = {"format": "p2p-ablation", "reports": reports, "side_by_side": side_by_side(reports)}
    report["config"] = cfg.echo()
    _write_json(report, args.report)
    return 0


def cmd_predict(args, cfg: GlobalConfig) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model
    batch = window_at(_load_packets(args.log), args.t, cfg.windowing)
    feats = torch.from_numpy(np.concatenate([s.features for s in batch.samples])).to(model.dtype)
    details: dict = {}
    with torch.no_grad():
        out = model(feats, len(batch), details)
    p_loss = torch.sigmoid(out["loss"])
    records = []
    for i, s in enumerate(batch.samples):
        records.append({
            "flow": s.flow._asdict(),
            "bitrate_mbps": float(out["bitrate"][i]),
            "jitter_ms": float(out["jitter"][i]),
            "fps": float(out["fps"][i]) if s.fps_mask else None,
            "p_loss": float(p_loss[i]),
            "loss": bool(p_loss[i] >= args.threshold),
        })
    _write_json({"format": PREDICTION_FORMAT, "version": FORMAT_VERSION, "t": batch.window_start,
                 "window_s": cfg.windowing.window_s, "predictions": records}, args.output)
    if args.dump_attention:
        _dump_attention(args.dump_attention, batch, details, model)
    return 0


def _dump_attention(path: str, batch, details: dict, model: P2PModel) -> None:
    """Write one .npz with:

    attention     (heads, L, n, n)  own-flow weights after mask and softmax
    injected      (heads, L, n)     per-row shift added before the softmax
    cross_max     (heads, L, n, L)  per-row maximum logit toward every flow
    cross_argmax  (heads, L, n, L)  column (within that flow) of the maximum
    meta          JSON bytes: format, version, t, flows, n, heads, mode
    """
    c = model.config
    h, L, n = c.heads, len(batch), c.n
    zeros = np.zeros((h, L, n, L))
    arrays = {
        "attention": details["attention"].numpy(),
        "injected": np.zeros((h, L, n)) if details["injected"] is None else details["injected"].numpy(),
        "cross_max": zeros if details["cross_max"] is None else details["cross_max"].numpy(),
        "cross_argmax": zeros.astype(np.int64) if details["cross_argmax"] is None else details["cross_argmax"].numpy(),
    }
    meta = {"format": ATTENTION_FORMAT, "version": FORMAT_VERSION, "t": batch.window_start,
            "flows": [s.flow._asdict() for s in batch.samples], "n": n, "heads": h, "mode": c.mode}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def cmd_bench(args, cfg: GlobalConfig) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt).model
    else:
        model = P2PModel(cfg.encoder, dtype=torch.float32 if cfg.train.precision == 32 else torch.float64,
                         seed=cfg.train.seed)
    rows = latency_bench(model, args.flows, args.reps, seed=cfg.train.seed)
    _write_json({"format": "p2p-bench", "version": FORMAT_VERSION, "rows": latency_table(rows),
                 "config": cfg.echo()}, args.report)
    return 0


def cmd_selftest(args, cfg: GlobalConfig) -> int:
    from .selftest import main_selftest

    return 0 if main_selftest(grad=args.grad) else 3


COMMANDS = {
    "ingest": cmd_ingest,
    "dataset": cmd_dataset,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        setup_logging(cfg.log_level)
        return COMMANDS[args.command](args, cfg)
    except P2PError as exc:
        print(f"p2p: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
