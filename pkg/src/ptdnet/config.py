"""Flat ``key = value`` experiment configuration.

Keys are namespaced by module (``synth.``, ``data.``, ``hc.``, ``gnn.``,
``lowrank.``, ``train.``, ``experiment.``). A key prefixed with ``sweep.``
holds a comma-separated list of values for the key that follows, e.g.
``sweep.train.beta1 = 0, 0.05, 0.9``. Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .concrete import HCConfig
from .errors import ConfigError, ParseError
from .graph import SynthConfig
from .lowrank import SpectralConfig
from .trainer import TrainConfig

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


def _optional(kind):
    def parse(text: str):
        return None if text.strip().lower() in ("none", "null", "") else kind(text)
    return parse


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


# key -> (parser, default)
_SCHEMA: dict = {}


def _register(prefix: str, cls, rename=None, skip=()):
    rename = rename or {}
    inst = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        default = getattr(inst, f.name)
        kind = type(default)
        if kind is bool:
            parser = _parse_bool
        elif default is None:
            parser = _optional(float)
        else:
            parser = kind
        _SCHEMA[f"{prefix}.{rename.get(f.name, f.name)}"] = (parser, default)


_register("synth", SynthConfig, skip=("seed",))
_register("hc", HCConfig)
_register("lowrank", SpectralConfig)
_register("train", TrainConfig, skip=("hc", "lowrank", "layers", "hidden", "embed", "dropout",
                                      "lowrank_enabled", "lowrank_stride"))
_SCHEMA.update({
    "gnn.layers": (int, TrainConfig.layers),
    "gnn.hidden": (int, TrainConfig.hidden),
    "gnn.embed": (int, TrainConfig.embed),
    "gnn.dropout": (float, TrainConfig.dropout),
    "lowrank.enabled": (_parse_bool, TrainConfig.lowrank_enabled),
    "lowrank.stride": (int, TrainConfig.lowrank_stride),
    "synth.target_positive_ratio": (_optional(float), None),
    "data.dir": (_optional(str), None),
    "data.inject_noise": (int, 0),
    "data.communities": (int, 0),
    "experiment.name": (str, "run"),
    "experiment.seeds": (_int_list, (0,)),
    "experiment.workers": (int, 1),
})
KNOWN_KEYS = frozenset(_SCHEMA)


def parse_lines(text: str, source: str = "<string>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment, later keys win."""
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, no, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError(source, no, "empty key")
        out[key] = value
    return out


def _convert(key: str, text: str):
    parser, _ = _SCHEMA[key]
    try:
        return parser(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in _SCHEMA.items()})
    grid: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        cfg = cls()
        for key, text in raw.items():
            if key.startswith("sweep."):
                target = key[len("sweep."):]
                if target not in KNOWN_KEYS:
                    raise ConfigError(f"unknown sweep key {target!r}")
                items = [t.strip() for t in text.split(",") if t.strip()]
                if not items:
                    raise ConfigError(f"{key}: empty value list")
                cfg.grid[target] = [_convert(target, t) for t in items]
            elif key in KNOWN_KEYS:
                cfg.values[key] = _convert(key, text)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg.check()
        return cfg

    def check(self):
        # building every section runs each dataclass's own validation
        self.synth_config()
        self.train_config()

    def get(self, key: str):
        return self.values[key]

    def with_values(self, **updates) -> "ExperimentConfig":
        """Copy with ``updates`` applied; keys use ``__`` in place of ``.``."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        out = ExperimentConfig(vals, dict(self.grid))
        out.check()
        return out

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        s = {k: v for k, v in self.section("synth").items() if k != "target_positive_ratio"}
        cfg = SynthConfig(**s, seed=self.seeds[0] if seed is None else seed)
        cfg.validate()
        return cfg

    def train_config(self, seed: int | None = None) -> TrainConfig:
        gnn = self.section("gnn")
        lr = self.section("lowrank")
        t = self.section("train")
        if seed is not None:
            t["seed"] = seed
        return TrainConfig(
            **t, layers=gnn["layers"], hidden=gnn["hidden"], embed=gnn["embed"],
            dropout=gnn["dropout"], hc=HCConfig(**self.section("hc")),
            lowrank=SpectralConfig(k=lr["k"], pi_iters=lr["pi_iters"], pi_tol=lr["pi_tol"],
                                   max_nodes=lr["max_nodes"]),
            lowrank_enabled=lr["enabled"], lowrank_stride=lr["stride"])

    @property
    def seeds(self) -> tuple:
        return tuple(self.values["experiment.seeds"])

    def resolved(self) -> dict:
        """JSON-friendly flat mapping of every key (tuples become lists)."""
        out = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items())}
        for k, v in sorted(self.grid.items()):
            out[f"sweep.{k}"] = list(v)
        return out

    def to_text(self) -> str:
        """Round-trippable ``key = value`` rendering of the resolved values."""
        lines = []
        for k, v in sorted(self.values.items()):
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{k} = {v}")
        for k, vs in sorted(self.grid.items()):
            lines.append(f"sweep.{k} = " + ", ".join(str(x) for x in vs))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved.json"
        path.write_text(json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Read a config file (or literal text); no argument gives all defaults."""
    if path is None and text is None:
        return ExperimentConfig()
    if text is None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_mapping(parse_lines(text, str(path or "<string>")))
