"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Keys form one flat namespace over the training, model, GP, episode and
synthetic-domain settings. A key that several sections share (``n_z``,
``n_tasks``, ...) sets all of them at once.
"""
from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, field, fields, replace

from .episodes import CLASSIFICATION, REGRESSION, EpisodeSpec, GpConfig, SyntheticDomainsConfig
from .models import ModelConfig
from .training import TrainConfig

DATA_KINDS = ("gp", "synthetic", "features")


class ConfigFileError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None, source: str = "<config>"):
        self.line, self.key = line, key
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {message}" + (f" (key {key!r})" if key else ""))


@dataclass
class RunConfig:
    data: str = "gp"
    feature_bank: str = ""
    domain_seed: int = 0
    eval_episodes: int = 0  # 0: 1000 for regression, 600 for classification
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    domains: SyntheticDomainsConfig = field(default_factory=SyntheticDomainsConfig)

    @property
    def mode(self) -> str:
        return REGRESSION if self.data == "gp" else CLASSIFICATION

    def default_eval_episodes(self) -> int:
        return self.eval_episodes or (1000 if self.mode == REGRESSION else 600)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["gp"]["intervals"] = [list(i) for i in self.gp.intervals]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        gp = dict(doc.get("gp", {}))
        if "intervals" in gp:
            gp["intervals"] = tuple(tuple(i) for i in gp["intervals"])
        return cls(
            data=doc.get("data", "gp"),
            feature_bank=doc.get("feature_bank", ""),
            domain_seed=doc.get("domain_seed", 0),
            eval_episodes=doc.get("eval_episodes", 0),
            train=TrainConfig.from_dict(doc.get("train", {})),
            model=ModelConfig.from_dict(doc.get("model", {})),
            gp=GpConfig(**gp),
            spec=EpisodeSpec(**doc.get("spec", {})),
            domains=SyntheticDomainsConfig(**doc.get("domains", {})),
        )


_SECTIONS = {"train": TrainConfig, "model": ModelConfig, "gp": GpConfig, "spec": EpisodeSpec,
             "domains": SyntheticDomainsConfig}
_TOP = {"data": str, "feature_bank": str, "domain_seed": int, "eval_episodes": int}
# The model's mode and input width follow from the data source.
_DERIVED = {("model", "mode"), ("model", "x_dim")}


def key_table() -> dict:
    """key -> (type, [sections it sets])."""
    table = {k: (t, []) for k, t in _TOP.items()}
    for sec, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if (sec, f.name) in _DERIVED:
                continue
            typ = hints[f.name]
            if f.name in table and table[f.name][0] is not typ:
                raise AssertionError(f"config key {f.name} has conflicting types")
            table.setdefault(f.name, (typ, []))[1].append(sec)
    return table


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_intervals(text: str) -> tuple:
    """``-4:-2, -2:0`` -> ((-4.0, -2.0), (-2.0, 0.0))."""
    out = []
    for part in text.split(","):
        lo, sep, hi = part.strip().partition(":")
        if not sep:
            raise ValueError(f"interval {part.strip()!r} is not lo:hi")
        out.append((float(lo), float(hi)))
    return tuple(out)


def _parse_value(key: str, typ, text: str):
    if key == "intervals":
        return _parse_intervals(text)
    if typ is bool:
        return _parse_bool(text)
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    table = key_table()
    top, per = {}, {sec: {} for sec in _SECTIONS}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = (s.strip() for s in line.partition("="))
        if not eq or not key:
            raise ConfigFileError(f"expected 'key = value', got {line!r}", lineno, None, source)
        if key not in table:
            raise ConfigFileError("unknown key", lineno, key, source)
        if key in seen:
            raise ConfigFileError(f"duplicate key (first set on line {seen[key]})", lineno, key, source)
        seen[key] = lineno
        typ, sections = table[key]
        try:
            parsed = _parse_value(key, typ, value)
        except ValueError as exc:
            raise ConfigFileError(str(exc), lineno, key, source) from None
        if key in _TOP:
            top[key] = parsed
        for sec in sections:
            per[sec][key] = parsed
    cfg = base or RunConfig()
    try:
        cfg = replace(cfg, **top, **{sec: replace(getattr(cfg, sec), **kv) for sec, kv in per.items()})
        if cfg.data not in DATA_KINDS:
            raise ValueError(f"data must be one of {DATA_KINDS}, got {cfg.data!r}")
        return finalize(cfg)
    except (ValueError, TypeError) as exc:
        bad = next((k for k in seen if k in str(exc)), None)
        raise ConfigFileError(str(exc), seen.get(bad), bad, source) from None


def finalize(cfg: RunConfig) -> RunConfig:
    """Make the model and episode settings agree with the data source."""
    if cfg.mode == REGRESSION:
        model = replace(cfg.model, mode=REGRESSION, x_dim=1, n_tasks=cfg.gp.n_tasks)
    else:
        x_dim = cfg.domains.feature_dim
        if cfg.data == "features":
            from .episodes import load_feature_bank
            x_dim = load_feature_bank(cfg.feature_bank).feature_dim
        model = replace(cfg.model, mode=CLASSIFICATION, x_dim=x_dim, n_tasks=cfg.spec.n_tasks, n_way=cfg.spec.n_way)
    if cfg.data == "synthetic" and cfg.spec.n_tasks != cfg.domains.n_domains:
        raise ValueError(f"n_tasks={cfg.spec.n_tasks} must equal n_domains={cfg.domains.n_domains}")
    return replace(cfg, model=model)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    from pathlib import Path

    return parse_config(Path(path).read_text(), str(path), base)
