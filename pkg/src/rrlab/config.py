"""Plain-text ``key = value`` run configuration.

Keys without a prefix name :class:`TrainConfig` fields (``lambda`` is
accepted for ``lam``). ``attack.<field>`` and ``eval_attack.<field>`` set the
training and validation attack, ``data.<field>`` sets :class:`DataConfig`.
``#`` starts a comment. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .attacks import AttackConfig
from .data import Dataset, gen_blobs, gen_moons, gen_rings, load_csv
from .errors import ConfigError, InvalidArgumentError, ParseError
from .training import TrainConfig

GENERATORS = ("blobs", "moons", "rings", "csv")
ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class DataConfig:
    generator: str = "blobs"
    n_classes: int = 4
    dim: int = 8
    n_per_class: int = 500
    n: int = 1000
    separation: float = 3.0
    noise_sd: float = 1.0
    seed: int = 0
    path: str | None = None
    holdout: float = 0.4

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise InvalidArgumentError(f"data.generator must be one of {GENERATORS}")
        if not 0.0 < self.holdout < 1.0:
            raise InvalidArgumentError("data.holdout must lie in (0, 1)")

    def build(self) -> Dataset:
        if self.generator == "blobs":
            return gen_blobs(self.n_classes, self.dim, self.n_per_class, self.separation, self.noise_sd, self.seed)
        if self.generator == "moons":
            return gen_moons(self.n, self.noise_sd, self.seed)
        if self.generator == "rings":
            return gen_rings(self.n, self.n_classes, self.noise_sd, self.seed)
        if self.path is None:
            raise ConfigError("data.generator=csv needs data.path")
        return load_csv(self.path)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def resolved(self) -> dict:
        """Flat key -> text mapping that parses back to an equal config."""
        out = {}
        for f in fields(TrainConfig):
            v = getattr(self.train, f.name)
            if isinstance(v, AttackConfig):
                for af in fields(AttackConfig):
                    out[f"{f.name}.{af.name}"] = _render(getattr(v, af.name))
            elif v is None and f.name == "eval_attack":
                continue
            else:
                out[f.name] = _render(v)
        for f in fields(DataConfig):
            out[f"data.{f.name}"] = _render(getattr(self.data, f.name))
        return out

    def text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.resolved().items())


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v) if v else "-"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if text.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0], key)
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if origin is tuple:
        if text in ("", "-"):
            return ()
        return tuple(_coerce(p, args[0], key) for p in text.split(","))
    try:
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    if tp is str:
        return text
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str, int]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key = value", lineno)
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip(), lineno))
    return pairs


def apply(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``(key, value[, line])`` overrides to ``cfg``."""
    train_kw: dict = {}
    attack_kw: dict = {}
    eval_kw: dict = {}
    data_kw: dict = {}
    th, ah, dh = _hints(TrainConfig), _hints(AttackConfig), _hints(DataConfig)
    for item in pairs:
        key, value = item[0], item[1]
        prefix, _, name = key.rpartition(".")
        name = ALIASES.get(name, name) if not prefix else name
        if prefix in ("attack", "eval_attack"):
            if name not in ah:
                raise ConfigError(f"unknown key {key!r}")
            tp = ah[name]
            if name == "box":
                try:
                    v = None if value.lower() in ("none", "") else tuple(float(p) for p in value.split(","))
                except ValueError:
                    raise ConfigError(f"{key}: expected 'low,high', got {value!r}") from None
            else:
                v = _coerce(value, tp, key)
            (attack_kw if prefix == "attack" else eval_kw)[name] = v
        elif prefix == "data":
            if name not in dh:
                raise ConfigError(f"unknown key {key!r}")
            data_kw[name] = _coerce(value, dh[name], key)
        elif prefix == "":
            if name not in th or name in ("attack", "eval_attack"):
                raise ConfigError(f"unknown key {key!r}")
            train_kw[name] = _coerce(value, th[name], key)
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        attack = replace(cfg.train.attack, **attack_kw)
        eval_attack = cfg.train.eval_attack
        if eval_kw:
            eval_attack = replace(eval_attack or replace(attack, objective="ce"), **eval_kw)
        train = replace(cfg.train, attack=attack, eval_attack=eval_attack, **train_kw)
        data = replace(cfg.data, **data_kw)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train, data)


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``
    given as ``key=value`` strings."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
        cfg = apply(cfg, parse_pairs(text, str(p)))
    extra = []
    for o in overrides:
        if "=" not in o:
            raise ConfigError(f"--set expects key=value, got {o!r}")
        k, v = o.split("=", 1)
        extra.append((k.strip(), v.strip()))
    return apply(cfg, extra)
