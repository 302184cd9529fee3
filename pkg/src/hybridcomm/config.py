"""Experiment configuration: INI-style text files or the equivalent JSON.

Example::

    [topology]
    preset = lassen-like        ; any Topology field may follow as an override

    [layout]
    dp = 2
    pp = 2
    tp = 2
    zero1 = off                 ; off | reduce-scatter | allreduce

    [model]
    num_blocks = 2
    steps = 200

    [scheme]
    name = z-hybrid-16-8        ; or name = custom plus one line per path:
    ; DpAllReduce = fixed:8

    [output]
    dir = out
    plots = false

    [run]
    seeds = 0, 1, 2

The JSON form has the same sections as objects, with ``scheme.paths`` holding
the explicit path map.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .netsim import PRESET_ENV, PRESETS, Topology, preset
from .parallel3d import BadLayout, CommPath, InvalidScheme, SchemeTable, build_layout, named_scheme
from .toymodel import ZERO1_MODES, BadConfig, ToyModelConfig


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


_TOPOLOGY_FIELDS = {f.name: f.type for f in dataclasses.fields(Topology)}
_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ToyModelConfig)}


@dataclass(frozen=True)
class ExperimentConfig:
    topology: Topology = field(default_factory=Topology)
    preset_name: str = "lassen-like"
    dp: int = 2
    pp: int = 2
    tp: int = 2
    zero1: str = "off"
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    scheme: SchemeTable = field(default_factory=lambda: named_scheme("baseline"))
    out_dir: str = "out"
    plots: bool = False
    seeds: tuple[int, ...] = (0,)

    def layout(self):
        return build_layout(self.dp, self.pp, self.tp, self.topology)

    def validate(self) -> ExperimentConfig:
        try:
            self.layout()
        except BadLayout as exc:
            raise ConfigError("layout", str(exc)) from None
        if self.zero1 not in ZERO1_MODES:
            raise ConfigError("layout.zero1", f"must be one of {', '.join(ZERO1_MODES)}")
        try:
            self.model.check_layout(self.dp, self.pp, self.tp)
        except BadConfig as exc:
            raise ConfigError(f"model.{exc.field}", str(exc).split(": ", 1)[1]) from None
        if not self.seeds:
            raise ConfigError("run.seeds", "at least one seed is required")
        return self

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, model=dataclasses.replace(self.model, seed=seed))

    def to_dict(self) -> dict:
        topo = {"preset": self.preset_name, **self.topology.to_dict()}
        return {
            "topology": topo,
            "layout": {"dp": self.dp, "pp": self.pp, "tp": self.tp, "zero1": self.zero1},
            "model": self.model.to_dict(),
            "scheme": self.scheme.to_dict(),
            "output": {"dir": self.out_dir, "plots": self.plots},
            "run": {"seeds": list(self.seeds)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        unknown = set(data) - {"topology", "layout", "model", "scheme", "output", "run"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        topo_sec = dict(data.get("topology", {}))
        preset_name = topo_sec.pop("preset", None) or os.environ.get(PRESET_ENV) or "lassen-like"
        if preset_name not in PRESETS:
            raise ConfigError("topology.preset", f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        overrides = {}
        for key, value in topo_sec.items():
            if key not in _TOPOLOGY_FIELDS:
                raise ConfigError(f"topology.{key}", "unknown field")
            overrides[key] = _coerce(f"topology.{key}", value, int if key in ("num_nodes", "gpus_per_node") else float)
        try:
            topology = dataclasses.replace(preset(preset_name), **overrides)
        except ValueError as exc:
            raise ConfigError(f"topology.{str(exc).split()[0]}", str(exc)) from None

        lay = dict(data.get("layout", {}))
        for key in lay:
            if key not in ("dp", "pp", "tp", "zero1"):
                raise ConfigError(f"layout.{key}", "unknown field")
        dp, pp, tp = (_coerce(f"layout.{k}", lay.get(k, 1), int) for k in ("dp", "pp", "tp"))
        zero1 = str(lay.get("zero1", "off")).strip().lower()
        if zero1 in ("false", "no", "0"):
            zero1 = "off"
        elif zero1 in ("true", "yes", "1", "on"):
            zero1 = "reduce-scatter"

        model_kw = {}
        for key, value in dict(data.get("model", {})).items():
            if key not in _MODEL_FIELDS:
                raise ConfigError(f"model.{key}", "unknown field")
            if key == "adam_betas":
                parts = value.split(",") if isinstance(value, str) else value
                model_kw[key] = tuple(_coerce("model.adam_betas", v, float) for v in parts)
            elif key in ("learning_rate", "adam_eps"):
                model_kw[key] = _coerce(f"model.{key}", value, float)
            else:
                model_kw[key] = _coerce(f"model.{key}", value, int)
        try:
            model = ToyModelConfig(**model_kw)
        except BadConfig as exc:
            raise ConfigError(f"model.{exc.field}", str(exc).split(": ", 1)[1]) from None

        scheme = _parse_scheme(dict(data.get("scheme", {})))
        out = dict(data.get("output", {}))
        plots = out.get("plots", False)
        if isinstance(plots, str):
            plots = plots.strip().lower() in ("1", "true", "yes", "on")
        run = dict(data.get("run", {}))
        seeds = run.get("seeds", [model.seed])
        if isinstance(seeds, str):
            seeds = [s for s in seeds.split(",") if s.strip()]
        seeds = tuple(_coerce("run.seeds", s, int) for s in seeds)
        cfg = cls(topology, preset_name, dp, pp, tp, zero1, model, scheme, str(out.get("dir", "out")),
                  bool(plots), seeds)
        return cfg.validate()

    # --- text forms ---

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        d = self.to_dict()
        parser["topology"] = {k: _fmt(v) for k, v in d["topology"].items()}
        parser["layout"] = {k: _fmt(v) for k, v in d["layout"].items()}
        parser["model"] = {k: _fmt(v) for k, v in d["model"].items()}
        parser["scheme"] = {"name": self.scheme.name, **d["scheme"]["paths"]}
        parser["output"] = {k: _fmt(v) for k, v in d["output"].items()}
        parser["run"] = {"seeds": _fmt(list(self.seeds))}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, value, kind):
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            if isinstance(value, str):
                value = value.strip()
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {kind.__name__}, got {value!r}") from None


def _parse_scheme(sec: dict) -> SchemeTable:
    paths = sec.get("paths")
    if paths is None:
        paths = {k: v for k, v in sec.items() if k in {p.value for p in CommPath}}
    extra = set(sec) - {"name", "paths", "mp_rate", "dp_rate"} - {p.value for p in CommPath}
    if extra:
        raise ConfigError(f"scheme.{sorted(extra)[0]}", "unknown field")
    name = str(sec.get("name", "baseline")).strip()
    try:
        if paths and len(paths) == len(CommPath):
            return SchemeTable.from_dict({"name": name, "paths": paths})
        if paths:
            missing = sorted({p.value for p in CommPath} - set(paths))
            raise ConfigError(f"scheme.{missing[0]}", "explicit path maps must list every path")
        if "mp_rate" in sec or "dp_rate" in sec:
            rates = [str(_coerce(f"scheme.{k}", sec[k], int)) for k in ("mp_rate", "dp_rate") if k in sec]
            if name.lower().replace("_", "-") in ("z-hybrid", "mz-hybrid"):
                return named_scheme("-".join([name, *rates]))
        return named_scheme(name)
    except InvalidScheme as exc:
        raise ConfigError("scheme.name", str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("scheme", str(exc)) from None


def parse_ini(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    return {s: dict(parser[s]) for s in parser.sections()}


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc.strerror}") from None
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("file", f"invalid JSON: {exc}") from None
    else:
        data = parse_ini(text)
    return ExperimentConfig.from_dict(data)
