"""Flat ``key = value`` TOML run configs."""
from __future__ import annotations

from pathlib import Path

try:  # 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .adapt import TrainConfig


def load_config(path=None, **overrides) -> TrainConfig:
    data: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ValueError(f"{path}: config must be flat key = value, found tables {nested}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def dumps_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.to_dict().items())


def write_config(path, cfg: TrainConfig) -> None:
    Path(path).write_text(dumps_config(cfg))
