"""Run configuration as a flat ``key=value`` mapping.

Dataset and optimizer fields share one namespace; ``seed`` feeds both. A run
writes its resolved configuration next to its outputs so the directory alone
is enough to repeat it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from rsgrpo.env import DatasetSpec
from rsgrpo.trainer import Mode, OptimizerConfig

_DATA_FIELDS = tuple(f.name for f in dataclasses.fields(DatasetSpec) if f.name != "seed")
_OPTIM_FIELDS = tuple(f.name for f in dataclasses.fields(OptimizerConfig) if f.name != "seed")


class ConfigError(ValueError):
    """Unknown key, unparsable value or an invalid combination."""


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    eval_episodes: int = 300
    eval_docs: int = 3
    split_ratio: float = 0.8
    seeds: int = 5

    _RUN_FIELDS = ("seed", "data_dir", "out_dir", "eval_episodes", "eval_docs", "split_ratio", "seeds")

    def __post_init__(self) -> None:
        self.data = dataclasses.replace(self.data, seed=self.seed)
        self.optim = dataclasses.replace(self.optim, seed=self.seed)

    @property
    def eval_spec(self) -> DatasetSpec:
        """Evaluation data: fixed document count, same mixture as the SFT data."""
        return dataclasses.replace(self.data, min_docs=self.eval_docs, max_docs=self.eval_docs,
                                   episodes=self.eval_episodes)

    def validate(self) -> None:
        try:
            self.data.validate()
            self.eval_spec.validate()
            self.optim.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval_episodes < 1 or self.seeds < 1:
            raise ConfigError("eval_episodes and seeds must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie strictly between 0 and 1")

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {name: getattr(self, name) for name in self._RUN_FIELDS}
        flat.update({name: getattr(self.data, name) for name in _DATA_FIELDS})
        flat.update({name: getattr(self.optim, name) for name in _OPTIM_FIELDS})
        flat["mode"] = self.optim.mode.value
        return flat

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "RunConfig":
        base = cls()
        run_kw, data_kw, optim_kw = {}, {}, {}
        for key, raw in values.items():
            if key in cls._RUN_FIELDS:
                run_kw[key] = _parse(key, raw, getattr(base, key))
            elif key in _DATA_FIELDS:
                data_kw[key] = _parse(key, raw, getattr(base.data, key))
            elif key in _OPTIM_FIELDS:
                optim_kw[key] = _parse(key, raw, getattr(base.optim, key))
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            data = dataclasses.replace(base.data, **data_kw)
            optim = dataclasses.replace(base.optim, **optim_kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(data=data, optim=optim, **run_kw)

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        flat = {k: _format(v) for k, v in self.to_flat().items()}
        flat.update(values)
        return RunConfig.from_flat(flat)

    def snapshot(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in sorted(self.to_flat().items()))

    def write_snapshot(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.snapshot())
        tmp.replace(path)


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Mode):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, default: object) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, Mode):
            return Mode(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(pairs: Iterable[str]) -> dict[str, str]:
    """``["a=1", "b=x"]`` -> ``{"a": "1", "b": "x"}``."""
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"expected key=value, got {pair!r}")
        out[key.strip()] = value
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat file: one ``key=value`` per line, ``#`` comments and blank lines ignored."""
    lines = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_pairs(lines)


def load_run_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(parse_pairs(overrides))
    config = RunConfig.from_flat(values)
    config.validate()
    return config
