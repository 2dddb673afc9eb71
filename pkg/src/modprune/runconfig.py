"""Run configuration: a flat dotted-key text format with exact round-trip.

One ``section.key = value`` per line; ``#`` starts a comment. Values are
ints, floats, booleans, comma-separated int lists, or bare strings. The
serialized form is canonical (fixed key order), so its hash identifies a run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .bcm import BcmHyper
from .rmp import RmpHyper
from .toymodel import CorpusSpec, ModelConfig

MODES = ("gprune", "baseline_global")
PROFILES = ("desk", "paper")


@dataclass
class PretrainConfig:
    steps: int = 600
    lr: float = 0.003
    batch_size: int = 8


@dataclass
class RunConfig:
    mode: str = "gprune"
    base_metric: str = "wanda_sp"
    r_target: float = 0.5
    seed: int = 0
    checkpoint: str = "model.ckpt"
    out_dir: str = "run_out"
    model: ModelConfig = field(default_factory=ModelConfig)
    primary: CorpusSpec = field(default_factory=lambda: CorpusSpec(
        "synthetic-a", seed=11, n_samples=256, seq_len=128))
    auxiliary: CorpusSpec | None = field(default_factory=lambda: CorpusSpec(
        "synthetic-b", seed=11, n_samples=256, seq_len=128))
    heldout: CorpusSpec | None = field(default_factory=lambda: CorpusSpec(
        "synthetic-a", seed=12, n_samples=32, seq_len=128))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    bcm: BcmHyper = field(default_factory=lambda: BcmHyper.desk_profile())
    rmp: RmpHyper = field(default_factory=RmpHyper)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.r_target <= 1.0:
            raise ValueError("r_target must lie in (0, 1]")
        if self.mode == "gprune" and self.auxiliary is None:
            raise ValueError("gprune mode needs an auxiliary corpus for rank drift")

    @classmethod
    def default(cls, profile: str = "desk") -> "RunConfig":
        if profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        cfg = cls()
        if profile == "paper":
            cfg.bcm = BcmHyper()
            cfg.pretrain = PretrainConfig(steps=2000)
            cfg.primary = replace(cfg.primary, n_samples=2048)
            cfg.auxiliary = replace(cfg.auxiliary, n_samples=2048)
        return cfg


_CORPUS_KEYS = ("source", "seed", "n_samples", "seq_len")


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(config: RunConfig) -> str:
    """Canonical text form; parse(serialize(c)) == c."""
    lines: list[str] = []
    for key in ("mode", "base_metric", "r_target", "seed", "checkpoint", "out_dir"):
        lines.append(f"{key} = {_emit_value(getattr(config, key))}")
    for f in fields(ModelConfig):
        v = getattr(config.model, f.name)
        if v is None:
            continue
        lines.append(f"model.{f.name} = {_emit_value(v)}")
    for section in ("primary", "auxiliary", "heldout"):
        spec = getattr(config, section)
        if spec is None:
            lines.append(f"corpus.{section}.source = none")
            continue
        for key in _CORPUS_KEYS:
            lines.append(f"corpus.{section}.{key} = {_emit_value(getattr(spec, key))}")
    for f in fields(PretrainConfig):
        lines.append(f"pretrain.{f.name} = {_emit_value(getattr(config.pretrain, f.name))}")
    for f in fields(BcmHyper):
        if f.name == "seed":
            continue    # the BCM stream derives from the run seed
        lines.append(f"bcm.{f.name} = {_emit_value(getattr(config.bcm, f.name))}")
    for f in fields(RmpHyper):
        lines.append(f"rmp.{f.name} = {_emit_value(getattr(config.rmp, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_scalar(text: str, target_type):
    text = text.strip()
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is bool:
        if text not in ("true", "false"):
            raise ValueError(f"bad boolean {text!r}")
        return text == "true"
    if target_type is tuple:
        return tuple(int(x) for x in text.split(","))
    return text


_FIELD_TYPES = {}
for _cls, _prefix in ((ModelConfig, "model"), (PretrainConfig, "pretrain"),
                      (BcmHyper, "bcm"), (RmpHyper, "rmp")):
    for _f in fields(_cls):
        t = {"int": int, "float": float, "bool": bool, "str": str}.get(_f.type, tuple)
        _FIELD_TYPES[f"{_prefix}.{_f.name}"] = t


def parse(text: str) -> RunConfig:
    """Parse dotted-key config text into a RunConfig (unset keys keep defaults)."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value

    config = RunConfig()
    corpus_fields: dict[str, dict] = {"primary": {}, "auxiliary": {}, "heldout": {}}
    explicit_corpora: set[str] = set()
    for key, value in pairs.items():
        if key in ("mode", "base_metric", "checkpoint", "out_dir"):
            setattr(config, key, value)
        elif key == "r_target":
            config.r_target = float(value)
        elif key == "seed":
            config.seed = int(value)
        elif key.startswith("corpus."):
            _, section, attr = key.split(".", 2)
            if section not in corpus_fields or attr not in _CORPUS_KEYS:
                raise ValueError(f"unknown corpus key {key!r}")
            explicit_corpora.add(section)
            corpus_fields[section][attr] = (int(value) if attr in ("seed", "n_samples", "seq_len")
                                            else value)
        elif key in _FIELD_TYPES:
            prefix, attr = key.split(".", 1)
            target = {"model": config.model, "pretrain": config.pretrain,
                      "bcm": config.bcm, "rmp": config.rmp}[prefix]
            setattr(target, attr, _parse_scalar(value, _FIELD_TYPES[key]))
        else:
            raise ValueError(f"unknown config key {key!r}")

    for section in explicit_corpora:
        vals = corpus_fields[section]
        if vals.get("source") == "none":
            if section == "primary":
                raise ValueError("primary corpus cannot be none")
            setattr(config, section, None)
            continue
        missing = [k for k in _CORPUS_KEYS if k not in vals]
        if missing:
            raise ValueError(f"corpus.{section} missing keys: {missing}")
        setattr(config, section, CorpusSpec(**vals))
    config.model.__post_init__()
    return config


def load(path: str | Path) -> RunConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(serialize(config).encode("utf-8")).hexdigest()[:16]
