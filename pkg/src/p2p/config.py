"""INI configuration merged into one validated GlobalConfig.

Sections mirror the pipeline stages::

    [windowing]  window_ms, history_packets, per_flow_packets, staleness_s,
                 clock_rates (e.g. "96:90000, 111:48000"), video_payload_types
    [encoder]    d_embed, heads, ffn_neurons, neighbourhood_k, n, mode,
                 leaky_slope, cross_injection
    [train]      lr, lr_decay_every_epochs, lr_decay_factor, batch_windows,
                 epochs, seed, precision
    [paths]      any name = path
    [logging]    level

Unknown sections or keys are rejected. Precedence is CLI flag, then file,
then built-in default.
"""
from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .trainer import TrainConfig
from .windowing import DEFAULT_CLOCK_RATES, WindowingConfig

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class GlobalConfig:
    windowing: WindowingConfig = field(default_factory=WindowingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict[str, str] = field(default_factory=dict)
    log_level: str = "INFO"

    def echo(self) -> dict:
        """Plain-data copy for provenance records in output artifacts."""
        w = dataclasses.asdict(self.windowing)
        w["clock_rates"] = {str(k): v for k, v in sorted(w["clock_rates"].items())}
        w["video_payload_types"] = sorted(w["video_payload_types"])
        return {
            "windowing": w,
            "encoder": dataclasses.asdict(self.encoder),
            "train": dataclasses.asdict(self.train),
            "paths": dict(self.paths),
            "log_level": self.log_level,
        }


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_clock_rates(raw: str) -> dict[int, float]:
    out = dict(DEFAULT_CLOCK_RATES)
    for item in filter(None, (p.strip() for p in raw.split(","))):
        pt, _, hz = item.partition(":")
        out[int(pt)] = float(hz)
    return out


def _parse_int_set(raw: str) -> frozenset[int]:
    return frozenset(int(p) for p in raw.replace(" ", "").split(",") if p)


def _field_parser(cls, name: str):
    typ = str({f.name: f.type for f in dataclasses.fields(cls)}[name])
    if typ == "bool":
        return _parse_bool
    if typ == "int":
        return int
    if typ == "float":
        return float
    return str


def _section(cp: configparser.ConfigParser, name: str, cls, special: dict | None = None) -> dict:
    if name not in cp:
        return {}
    known = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in cp[name].items():
        if key not in known:
            raise ConfigError(f"[{name}]: unknown key {key!r}")
        parse = (special or {}).get(key) or _field_parser(cls, key)
        try:
            out[key] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    return out


SECTIONS = ("windowing", "encoder", "train", "paths", "logging")


def load_config(path: str | Path | None = None, overrides: dict[str, dict] | None = None) -> GlobalConfig:
    """Defaults, then the file (if any), then ``overrides`` ({section: {key: value}})."""
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            if not cp.read(path, encoding="utf-8"):
                raise ConfigError(f"cannot read config file {path}")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        unknown = set(cp.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        values["windowing"] = _section(cp, "windowing", WindowingConfig, {
            "clock_rates": _parse_clock_rates, "video_payload_types": _parse_int_set,
        })
        values["encoder"] = _section(cp, "encoder", EncoderConfig)
        values["train"] = _section(cp, "train", TrainConfig)
        if "paths" in cp:
            values["paths"] = dict(cp["paths"])
        if "logging" in cp:
            extra = set(cp["logging"]) - {"level"}
            if extra:
                raise ConfigError(f"[logging]: unknown keys {sorted(extra)}")
            values["logging"] = dict(cp["logging"])
    for sec, kv in (overrides or {}).items():
        if sec not in values:
            raise ConfigError(f"unknown config section {sec!r}")
        values[sec].update({k: v for k, v in kv.items() if v is not None})

    level = str(values["logging"].get("level", "INFO")).upper()
    if level not in LOG_LEVELS:
        raise ConfigError(f"log level must be one of {LOG_LEVELS}")
    try:
        return GlobalConfig(
            windowing=WindowingConfig(**values["windowing"]),
            encoder=EncoderConfig(**values["encoder"]),
            train=TrainConfig(**values["train"]),
            paths=values["paths"],
            log_level=level,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
