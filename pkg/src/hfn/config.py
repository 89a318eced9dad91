"""INI run configs: presets, file loading and command-line overrides."""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources

from .model import ZOO, ArchConfig, ConfigError, desk_config, zoo_config
from .train import TrainConfig

PRESETS = ("desk-hfn", "desk-hnn", "paper-cifar100")


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar
    train_size: int = 1500
    val_size: int = 500
    test_size: int = 1000
    image_size: int = 8
    separation: float = 4.0
    data_seed: int = 0
    cifar_train: str = "cifar-100-binary/train.bin"
    cifar_test: str = "cifar-100-binary/test.bin"
    split_seed: int = 0

    def validate(self):
        if self.source not in ("synthetic", "cifar"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if min(self.train_size, self.val_size, self.test_size, self.image_size) < 1:
            raise ConfigError("data sizes must be positive")
        return self


@dataclass
class RunConfig:
    arch: ArchConfig
    train: TrainConfig
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.arch.validate()
        if self.train.method != self.arch.method:
            raise ConfigError(f"train method {self.train.method!r} != arch method {self.arch.method!r}")
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.data.validate()
        return self

    def to_dict(self):
        return dict(arch=self.arch.to_dict(), train=asdict(self.train), data=asdict(self.data))


def _ints(text):
    text = str(text).strip().strip("()")
    return tuple(int(t) for t in text.replace(";", ",").split(",") if t.strip())


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {type(like).__name__}") from None
    return str(value)


def _arch_from(section: dict) -> ArchConfig:
    section = dict(section)
    name = section.pop("arch", "desk")
    method = section.pop("method", "hfn")
    kw = {}
    if "topk" in section:
        kw["k_permille"] = round(float(section.pop("topk")) * 10)
    for key in ("stage_blocks", "folded_stages"):
        if key in section:
            kw[key] = _ints(section.pop(key))
    defaults = ArchConfig()
    for f in fields(ArchConfig):
        if f.name in section:
            kw[f.name] = _coerce(section.pop(f.name), getattr(defaults, f.name) if f.name != "init" else "")
    if section:
        raise ConfigError(f"unknown [arch] keys: {sorted(section)}")
    if name == "desk":
        return desk_config(method=method, **kw)
    if name == "custom":
        return ArchConfig(method=method, **kw)
    if name not in ZOO:
        raise ConfigError(f"unknown arch {name!r}; expected desk, custom or one of {sorted(ZOO)}")
    classes = kw.pop("num_classes", 100)
    folds = kw.pop("folded_stages", None)
    k = kw.pop("k_permille", 300)
    return zoo_config(name, classes, method, folded_stages=folds, k_permille=k, **kw)


def _dataclass_from(cls, section: dict, base=None):
    base = base or cls()
    kw = {}
    for f in fields(cls):
        if f.name in section:
            kw[f.name] = _coerce(section[f.name], getattr(base, f.name))
    unknown = set(section) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown [{cls.__name__}] keys: {sorted(unknown)}")
    return replace(base, **kw)


def read_ini(text: str) -> dict:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config file: {exc}") from None
    unknown = set(parser.sections()) - {"arch", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return {s: dict(parser[s]) for s in parser.sections()}


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return resources.files("hfn").joinpath("presets").joinpath(f"{name}.ini").read_text()


def build_run_config(sections: dict, overrides: dict | None = None) -> RunConfig:
    """Merge INI sections with flat overrides like ``{"arch.topk": "30"}``."""
    merged = {s: dict(v) for s, v in sections.items()}
    for key, value in (overrides or {}).items():
        sec, _, name = key.partition(".")
        merged.setdefault(sec, {})[name] = value
    arch = _arch_from(merged.get("arch", {}))
    train_sec = dict(merged.get("train", {}))
    train_sec.setdefault("method", arch.method)
    train = _dataclass_from(TrainConfig, train_sec)
    data = _dataclass_from(DataConfig, merged.get("data", {}))
    return RunConfig(arch, train, data).validate()


def load_run_config(preset=None, path=None, overrides=None) -> RunConfig:
    sections = {}
    if preset:
        sections = read_ini(preset_text(preset))
    if path:
        try:
            with open(path) as fh:
                extra = read_ini(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for s, v in extra.items():
            sections.setdefault(s, {}).update(v)
    return build_run_config(sections, overrides)


def to_ini(cfg: RunConfig) -> str:
    """Flat INI snapshot of a resolved config (round-trips through load)."""
    parser = configparser.ConfigParser()
    arch = cfg.arch.to_dict()
    arch["stage_blocks"] = ",".join(map(str, arch["stage_blocks"]))
    arch["folded_stages"] = ",".join(map(str, arch["folded_stages"]))
    parser["arch"] = {"arch": "custom", **{k: str(v) for k, v in arch.items()}}
    parser["train"] = {k: str(v) for k, v in asdict(cfg.train).items()}
    parser["data"] = {k: str(v) for k, v in asdict(cfg.data).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
