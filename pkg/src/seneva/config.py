"""Run configuration: one INI file with a section per component.

Precedence (lowest first): dataclass defaults, the config file, the
``SENEVA_SEED`` environment variable, command-line flags.  Unknown sections
and keys are rejected.  Dict-valued fields are written ``key=value, ...`` and
tuples as comma-separated numbers.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from seneva.encoder import EncoderConfig
from seneva.errors import InvalidConfig
from seneva.mixture import MixtureConfig
from seneva.sampling import SamplerConfig
from seneva.synthetic import GeneratorConfig
from seneva.training import TrainConfig

SEED_ENV = "SENEVA_SEED"


@dataclass
class DataConfig:
    ood_frac: float = 0.35

    def validate(self) -> None:
        if not 0.0 <= self.ood_frac < 1.0:
            raise InvalidConfig("data.ood_frac must lie in [0, 1)")


@dataclass
class EvalConfig:
    mr: str = "argoverse"
    entropy_mc: int = 16
    seed: int = 0
    heatmap_resolution: float = 0.5

    def validate(self) -> None:
        if self.mr not in ("argoverse", "interaction"):
            raise InvalidConfig(f"eval.mr must be 'argoverse' or 'interaction', got {self.mr!r}")
        if self.entropy_mc < 1:
            raise InvalidConfig("eval.entropy_mc must be >= 1")
        if self.heatmap_resolution <= 0:
            raise InvalidConfig("eval.heatmap_resolution must be > 0")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("generator", "data", "encoder", "mixture", "train", "sampler", "eval")

    def set(self, section: str, key: str, value) -> None:
        """Set one field, parsing strings by the field's current type."""
        if section not in self.SECTIONS:
            raise InvalidConfig(f"unknown config section [{section}]")
        obj = getattr(self, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if key not in names:
            raise InvalidConfig(f"unknown key {key!r} in section [{section}]")
        current = getattr(obj, key)
        setattr(obj, key, _parse(value, current, f"{section}.{key}") if isinstance(value, str) else value)

    def apply_seed(self, seed: int) -> None:
        self.generator.seed = seed
        self.train.seed = seed
        self.eval.seed = seed

    def validate(self) -> None:
        for name in self.SECTIONS:
            try:
                getattr(self, name).validate()
            except InvalidConfig:
                raise
            except ValueError as exc:
                raise InvalidConfig(f"[{name}] {exc}") from exc

    def to_ini(self) -> str:
        lines = []
        for name in self.SECTIONS:
            obj = getattr(self, name)
            lines.append(f"[{name}]")
            lines.extend(f"{f.name} = {_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj))
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dict):
        return ", ".join(f"{k}={_format(x)}" for k, x in sorted(v.items()))
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, current, where: str):
    text = text.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(float(x) for x in text.split(",") if x.strip())
        if isinstance(current, dict):
            out = {}
            for item in filter(None, (s.strip() for s in text.split(","))):
                k, _, v = item.partition("=")
                if not _:
                    raise ValueError(f"expected key=value, got {item!r}")
                out[k.strip()] = float(v)
            return out
        return text
    except ValueError as exc:
        raise InvalidConfig(f"{where}: cannot parse {text!r} ({exc})") from exc


def load_run_config(path=None, env=None) -> RunConfig:
    """Defaults, then the INI file at ``path`` (if any), then ``SENEVA_SEED``."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keys are case-sensitive (K, T, H)
        text = Path(path).read_text(encoding="utf-8")
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
        for section in cp.sections():
            for key, value in cp[section].items():
                cfg.set(section, key, value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.apply_seed(int(env[SEED_ENV]))
        except ValueError as exc:
            raise InvalidConfig(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return cfg
