"""Run configuration: flat ``key = value`` files with a ``[domains]`` section, plus ablation presets."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from .federation import TrainConfig
from .synthetic import SyntheticSpec

VARIANTS = ("full", "no_hcl", "no_hsd_no_hcl", "local_only")

# variant -> forced TrainConfig values
VARIANT_OVERRIDES = {
    "full": {},
    "no_hcl": {"gamma": 0.0},
    "no_hsd_no_hcl": {"lam": 0.0, "gamma": 0.0},
    "local_only": {"lam": 0.0, "gamma": 0.0, "federated": False},
}

_MAIN = "run"
_SYNTH_PREFIX = "synthetic_"
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_SYNTH_KEYS = {f.name: f.type for f in fields(SyntheticSpec)}
_RUN_KEYS = {"name": "str", "variant": "str", "out": "str", "min_user_inter": "int", "min_item_inter": "int"}
# config keys that differ from the attribute name
_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "full"
    domains: Dict[str, Path] = field(default_factory=dict)
    synthetic: Optional[SyntheticSpec] = None
    name: str = "scenario"
    out: Optional[str] = None
    min_user_inter: int = 5
    min_item_inter: int = 10

    def errors(self) -> List[str]:
        errs = [f"variant must be one of {VARIANTS} (got {self.variant!r})"] if self.variant not in VARIANTS else []
        errs += self.train.errors()
        if self.domains and self.synthetic is not None:
            errs.append("give either a [domains] section or synthetic_* keys, not both")
        if not self.domains and self.synthetic is None:
            errs.append("no data: add a [domains] section or synthetic_* keys")
        if self.domains and len(self.domains) < 2:
            errs.append("[domains] needs at least 2 entries")
        if self.synthetic is not None:
            errs += self.synthetic.errors()
        for key in ("min_user_inter", "min_item_inter"):
            if getattr(self, key) < 1:
                errs.append(f"{key} must be >= 1 (got {getattr(self, key)})")
        return errs

    def resolved(self) -> "RunConfig":
        """Copy with the variant's forced values applied; raises ConfigError listing every problem."""
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        train = self.train.replace(**VARIANT_OVERRIDES[self.variant])
        return RunConfig(train=train, variant=self.variant, domains=dict(self.domains), synthetic=self.synthetic,
                         name=self.name, out=self.out, min_user_inter=self.min_user_inter,
                         min_item_inter=self.min_item_inter)


def _coerce(key, raw, kind, errs):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw.strip()
    except ValueError:
        errs.append(f"{key}: cannot parse {raw!r} as {kind}")
        return None


def apply_values(cfg: RunConfig, values: Dict[str, str], errs: List[str], base_dir: Optional[Path] = None):
    """Apply string key/values (from a file or the command line) onto ``cfg`` in place."""
    train_kw, synth_kw = {}, {}
    for key, raw in values.items():
        name = _ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if name in _TRAIN_KEYS:
            val = _coerce(key, raw, _TRAIN_KEYS[name], errs)
            if val is not None:
                train_kw[name] = val
        elif name.startswith(_SYNTH_PREFIX) and name[len(_SYNTH_PREFIX):] in _SYNTH_KEYS:
            sub = name[len(_SYNTH_PREFIX):]
            val = _coerce(key, raw, _SYNTH_KEYS[sub], errs)
            if val is not None:
                synth_kw[sub] = val
        elif name in _RUN_KEYS:
            val = _coerce(key, raw, _RUN_KEYS[name], errs)
            if val is not None:
                setattr(cfg, name, val)
        else:
            errs.append(f"unknown key {key!r}")
    if train_kw:
        cfg.train = cfg.train.replace(**train_kw)
    if synth_kw:
        base = cfg.synthetic or SyntheticSpec()
        cfg.synthetic = SyntheticSpec(**{**{f.name: getattr(base, f.name) for f in fields(SyntheticSpec)}, **synth_kw})
    return cfg


def parse_config_text(text: str, base_dir=None) -> RunConfig:
    """Parse config text without validating ranges (see :meth:`RunConfig.resolved`)."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    errs: List[str] = []
    try:
        parser.read_string(f"[{_MAIN}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in (_MAIN, "domains"):
            errs.append(f"unknown section [{section}]")
    apply_values(cfg, dict(parser[_MAIN]), errs)
    if parser.has_section("domains"):
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        for tag, p in parser["domains"].items():
            path = Path(p.strip())
            cfg.domains[tag] = path if path.is_absolute() else base / path
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    return parse_config_text(text, base_dir=path.parent)


def dump_config(cfg: RunConfig) -> str:
    """Flat text that :func:`parse_config_text` reads back into an equal config."""
    lines = [f"name = {cfg.name}", f"variant = {cfg.variant}",
             f"min_user_inter = {cfg.min_user_inter}", f"min_item_inter = {cfg.min_item_inter}"]
    for f in fields(TrainConfig):
        key = "lambda" if f.name == "lam" else f.name
        lines.append(f"{key} = {getattr(cfg.train, f.name)!r}".replace("'", ""))
    if cfg.synthetic is not None:
        for f in fields(SyntheticSpec):
            lines.append(f"{_SYNTH_PREFIX}{f.name} = {getattr(cfg.synthetic, f.name)!r}")
    if cfg.domains:
        lines.append("")
        lines.append("[domains]")
        lines += [f"{tag} = {Path(p).resolve()}" for tag, p in cfg.domains.items()]
    return "\n".join(lines) + "\n"
