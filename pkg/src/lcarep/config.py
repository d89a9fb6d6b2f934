"""Run configuration: one flat dotted-key namespace loaded from TOML plus overrides."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

from .backbone import BackboneConfig
from .dataio import AugmentConfig, SyntheticSpec
from .errors import ConfigError, InvalidArgumentError
from .lca import LcaConfig
from .losses import LossConfig
from .pipeline import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    lca: LcaConfig = field(default_factory=LcaConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def flat(self) -> dict[str, object]:
        out = {}
        for f in fields(TrainConfig):
            if f.name not in ("loss", "augment"):
                out[f"train.{f.name}"] = getattr(self.train, f.name)
        for prefix, obj in (("loss", self.train.loss), ("augment", self.train.augment),
                            ("lca", self.lca), ("backbone", self.backbone)):
            for f in fields(obj):
                out[f"{prefix}.{f.name}"] = getattr(obj, f.name)
        return out

    def resolved(self) -> str:
        """TOML-compatible ``key = value`` lines, sorted, every key present."""
        return "".join(f"{k} = {_toml_value(v)}\n" for k, v in sorted(self.flat().items()))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str):
    """Interpret an override string as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in value):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def load_toml(path) -> dict[str, object]:
    try:
        with open(path, "rb") as fh:
            return flatten(tomllib.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_run_config(values: dict[str, object]) -> RunConfig:
    """Apply flat dotted keys on top of the defaults. Unknown keys are fatal."""
    base = RunConfig()
    defaults = base.flat()
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = {k: _coerce(k, v, defaults[k]) for k, v in values.items()}
    groups: dict[str, dict[str, object]] = {}
    for k, v in merged.items():
        prefix, name = k.split(".", 1)
        groups.setdefault(prefix, {})[name] = v
    try:
        loss = replace(base.train.loss, **groups.get("loss", {}))
        aug = replace(base.train.augment, **groups.get("augment", {}))
        train = replace(base.train, loss=loss, augment=aug, **groups.get("train", {}))
        lca = replace(base.lca, **groups.get("lca", {}))
        backbone = replace(base.backbone, **groups.get("backbone", {}))
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train, lca, backbone)


def load_run_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    values = load_toml(path) if path else {}
    values.update(overrides or {})
    return build_run_config(values)


def load_synthetic_spec(path=None, overrides: dict[str, object] | None = None) -> SyntheticSpec:
    values = load_toml(path) if path else {}
    values.update(overrides or {})
    values = {k.removeprefix("synthetic."): v for k, v in values.items()}
    base = SyntheticSpec()
    known = {f.name: getattr(base, f.name) for f in fields(SyntheticSpec)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown synthetic spec key(s): {', '.join(unknown)}")
    try:
        return replace(base, **{k: _coerce(k, v, known[k]) for k, v in values.items()})
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from None
