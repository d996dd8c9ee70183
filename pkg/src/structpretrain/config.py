"""Flat ``key = value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

import os
from dataclasses import fields
from typing import Callable

from .adapt import INIT_MODES, TASK_KINDS, FinetuneConfig, NodeTaskConfig
from .model import ModelConfig
from .pretrain import PretrainConfig
from .synth import DEFAULT_TRAIN_FRACTION, ConfigError, DcbmRanges


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair(conv: Callable) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",")]
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise ValueError(f"expected 'lo,hi', got {text!r}")
        return conv(parts[0]), conv(parts[1])
    return parse


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(p) for p in text.split(",")) if text else ()


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


_R = DcbmRanges()
_M = ModelConfig()
_P = PretrainConfig()
_N = NodeTaskConfig()
_F = FinetuneConfig()

# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (int, 0),
    "deterministic": (_bool, False),
    "threads": (int, 0),
    "gen.count": (int, 64),
    "gen.seed": (int, 0),
    "gen.n": (_pair(int), _R.n),
    "gen.K": (_pair(int), _R.K),
    "gen.p_div_q": (_pair(float), _R.p_div_q),
    "gen.k": (_pair(float), _R.k),
    "gen.gamma": (_pair(float), _R.gamma),
    "gen.mean_degree": (_pair(float), _R.mean_degree),
    "gen.force_regimes": (_bool, False),
    "gen.train_fraction": (float, DEFAULT_TRAIN_FRACTION),
    "model.hidden_dim": (int, _M.hidden_dim),
    "model.num_layers": (int, _M.num_layers),
    "model.activation": (str, _M.activation),
    "pretrain.mask_fraction": (float, _P.mask_fraction),
    "pretrain.graphs_per_step": (int, _P.graphs_per_step),
    "pretrain.n_pos": (int, _P.n_pos),
    "pretrain.n_neg": (int, _P.n_neg),
    "pretrain.lr": (float, _P.lr),
    "pretrain.max_steps": (int, _P.max_steps),
    "pretrain.val_every": (int, _P.val_every),
    "pretrain.cluster_support_fraction": (float, _P.cluster_support_fraction),
    "pretrain.val_seed": (int, _P.val_seed),
    "adapt.task": (_choice(TASK_KINDS), "node"),
    "adapt.task_seed": (int, 0),
    "adapt.boundary": (int, 1),
    "adapt.boundaries": (_int_list, ()),
    "adapt.init_mode": (_choice(INIT_MODES), "pretrained"),
    "adapt.epochs": (int, _F.epochs),
    "adapt.lr": (float, _F.lr),
    "adapt.seeds": (int, 5),
    "adapt.node_n": (int, _N.n),
    "adapt.node_K": (int, _N.K),
    "adapt.node_p_div_q": (float, _N.p_div_q),
    "adapt.node_gamma": (float, _N.gamma),
    "adapt.node_mean_degree": (float, _N.mean_degree),
    "adapt.node_ratio_spread": (float, _N.ratio_spread),
    "adapt.label_fraction": (float, _N.label_fraction),
    "adapt.task_n": (_pair(int), (60, 120)),
    "adapt.graph_per_regime": (int, 50),
    "path.corpus": (str, ""),
    "path.out": (str, ""),
    "path.checkpoint": (str, ""),
}


class RunConfig:
    """Validated configuration values; usually built with :meth:`parse` or :meth:`load`."""

    def __init__(self, values: dict | None = None):
        self.values = {k: d for k, (_, d) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                if k not in SCHEMA:
                    raise ConfigError(f"unknown config key {k!r}")
                self.values[k] = v
        self.validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    @staticmethod
    def parse_value(key: str, text: str, where: str = ""):
        if key not in SCHEMA:
            raise ConfigError(f"{where}unknown config key {key!r}")
        try:
            return SCHEMA[key][0](text.strip())
        except ValueError as exc:
            raise ConfigError(f"{where}bad value for {key}: {exc}") from None

    @classmethod
    def parse(cls, text: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = cls.parse_value(key, val, f"line {lineno}: ")
        for key, val in (overrides or {}).items():
            values[key] = cls.parse_value(key, val, "override: ")
        return cls(values)

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        text = ""
        if path:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.parse(text, overrides)

    def dump(self) -> str:
        """Every key with its value; ``parse(dump())`` reproduces this config exactly."""
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    def validate(self) -> "RunConfig":
        self.ranges().validate()
        self.model_config()
        self.pretrain_config().validate()
        v = self.values
        if not 0 < v["gen.train_fraction"] < 1:
            raise ConfigError("gen.train_fraction must lie in (0, 1)")
        if v["gen.count"] < 2:
            raise ConfigError("gen.count must be >= 2 (train and val splits)")
        if v["threads"] < 0:
            raise ConfigError("threads must be >= 0")
        L = v["model.num_layers"]
        for b in (v["adapt.boundary"],) + tuple(v["adapt.boundaries"]):
            if not 0 <= b <= L + 1:
                raise ConfigError(f"boundary {b} outside [0, {L + 1}]")
        if v["adapt.epochs"] < 0 or v["adapt.seeds"] < 1 or v["adapt.lr"] <= 0:
            raise ConfigError("adapt.epochs >= 0, adapt.seeds >= 1 and adapt.lr > 0 required")
        if not 0 < v["adapt.label_fraction"] < 1:
            raise ConfigError("adapt.label_fraction must lie in (0, 1)")
        if v["adapt.node_ratio_spread"] < 1 or v["adapt.node_K"] < 2:
            raise ConfigError("adapt.node_ratio_spread >= 1 and adapt.node_K >= 2 required")
        return self

    # typed views ------------------------------------------------------------
    def ranges(self) -> DcbmRanges:
        v = self.values
        return DcbmRanges(n=v["gen.n"], K=v["gen.K"], p_div_q=v["gen.p_div_q"], k=v["gen.k"],
                          gamma=v["gen.gamma"], mean_degree=v["gen.mean_degree"])

    def model_config(self) -> ModelConfig:
        v = self.values
        try:
            return ModelConfig(hidden_dim=v["model.hidden_dim"], num_layers=v["model.num_layers"],
                               activation=v["model.activation"])
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from None

    def pretrain_config(self) -> PretrainConfig:
        v = self.values
        kw = {f.name: v[f"pretrain.{f.name}"] for f in fields(PretrainConfig)
              if f"pretrain.{f.name}" in v}
        return PretrainConfig(seed=v["seed"], **kw)

    def node_task_config(self) -> NodeTaskConfig:
        v = self.values
        return NodeTaskConfig(n=v["adapt.node_n"], K=v["adapt.node_K"], p_div_q=v["adapt.node_p_div_q"],
                              gamma=v["adapt.node_gamma"], mean_degree=v["adapt.node_mean_degree"],
                              ratio_spread=v["adapt.node_ratio_spread"],
                              label_fraction=v["adapt.label_fraction"])

    def task_ranges(self) -> DcbmRanges:
        return DcbmRanges(n=self.values["adapt.task_n"])

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(epochs=self.values["adapt.epochs"], lr=self.values["adapt.lr"])
