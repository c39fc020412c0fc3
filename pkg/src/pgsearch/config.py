"""Flat ``section.key=value`` experiment configs.

Example::

    task=neg-ackley
    method=pgs-cql
    seeds=0,1,2,3,4
    dataset.pool_size=5000
    agent.gamma=0.99
    osel.p_values=10,20,30,40

Unknown keys are errors. ``config_hash`` is computed from the canonical
dump, so two files that differ only in ordering or comments hash equal.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .agents import CqlConfig
from .osel import EncoderConfig, GridSpec
from .search import RunConfig
from .surrogate import SurrogateConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OselSettings:
    grid: GridSpec = GridSpec()
    encoder: EncoderConfig = EncoderConfig()
    k: int = 10
    k_tie: int = 100


@dataclass(frozen=True)
class Config:
    run: RunConfig = RunConfig()
    osel: OselSettings = OselSettings()
    output_dir: str = "results"


# RunConfig scalar fields -> section in the flat file ("" = top level)
_RUN_SECTIONS = {
    "task": "",
    "method": "",
    "seeds": "",
    "pool_size": "dataset",
    "keep_percentile": "dataset",
    "p": "traj",
    "m": "traj",
    "T": "traj",
    "monotonic": "traj",
    "full_data": "traj",
    "alpha_scale": "traj",
    "eps_g": "traj",
    "N": "search",
    "T_test": "search",
    "eta": "search",
    "deterministic": "search",
}
# derived or per-seed values that must not be set from a file
_SKIP = {("surrogate", "seed"), ("agent", "a_max")}


def _coerce(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        items = [v for v in raw.split(",") if v.strip()]
        elem = like[0] if like else 0
        return tuple(_coerce(v, elem) for v in items)
    return raw


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def to_kv(cfg: Config) -> dict[str, str]:
    out: dict[str, str] = {}
    run = cfg.run
    for name, section in _RUN_SECTIONS.items():
        out[f"{section}.{name}" if section else name] = _fmt(getattr(run, name))
    for section, obj in (("surrogate", run.surrogate), ("agent", run.agent)):
        for f in fields(obj):
            if (section, f.name) not in _SKIP:
                out[f"{section}.{f.name}"] = _fmt(getattr(obj, f.name))
    for f in fields(cfg.osel.grid):
        out[f"osel.{f.name}"] = _fmt(getattr(cfg.osel.grid, f.name))
    for f in fields(cfg.osel.encoder):
        out[f"osel.encoder_{f.name}"] = _fmt(getattr(cfg.osel.encoder, f.name))
    out["osel.k"] = _fmt(cfg.osel.k)
    out["osel.k_tie"] = _fmt(cfg.osel.k_tie)
    out["output.dir"] = cfg.output_dir
    return out


def from_kv(pairs: dict[str, str], base: Config = Config()) -> Config:
    run_kw: dict = {}
    sur_kw: dict = {}
    agent_kw: dict = {}
    grid_kw: dict = {}
    enc_kw: dict = {}
    osel_kw: dict = {}
    out_dir = base.output_dir
    run = base.run
    for key, raw in pairs.items():
        section, _, name = key.rpartition(".")
        try:
            if _RUN_SECTIONS.get(name) == section and name in _RUN_SECTIONS:
                run_kw[name] = _coerce(raw, getattr(run, name))
            elif section == "surrogate" and hasattr(run.surrogate, name) and (section, name) not in _SKIP:
                sur_kw[name] = _coerce(raw, getattr(run.surrogate, name))
            elif section == "agent" and hasattr(run.agent, name) and (section, name) not in _SKIP:
                agent_kw[name] = _coerce(raw, getattr(run.agent, name))
            elif section == "osel" and hasattr(base.osel.grid, name):
                grid_kw[name] = _coerce(raw, getattr(base.osel.grid, name))
            elif section == "osel" and name.startswith("encoder_") and hasattr(base.osel.encoder, name[8:]):
                enc_kw[name[8:]] = _coerce(raw, getattr(base.osel.encoder, name[8:]))
            elif section == "osel" and name in ("k", "k_tie"):
                osel_kw[name] = int(raw)
            elif key == "output.dir":
                out_dir = raw.strip()
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    try:
        new_run = replace(
            run,
            **run_kw,
            surrogate=replace(run.surrogate, **sur_kw),
            agent=replace(run.agent, **agent_kw),
        )
        osel = replace(
            base.osel,
            grid=replace(base.osel.grid, **grid_kw),
            encoder=replace(base.osel.encoder, **enc_kw),
            **osel_kw,
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return Config(new_run, osel, out_dir)


def parse_lines(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    pairs = parse_lines(Path(path).read_text()) if path else {}
    if overrides:
        pairs.update(parse_lines("\n".join(overrides)))
    return from_kv(pairs)


def dump_config(cfg: Config) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(to_kv(cfg).items()))


def config_hash(cfg: Config | RunConfig) -> str:
    if isinstance(cfg, RunConfig):
        cfg = Config(run=cfg)
    kv = to_kv(cfg)
    kv.pop("output.dir")
    canon = "".join(f"{k}={v}\n" for k, v in sorted(kv.items()))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _canon(obj):
    if dataclasses.is_dataclass(obj):
        return tuple((f.name, _canon(getattr(obj, f.name))) for f in fields(obj))
    return _fmt(obj)


def stable_hash(*parts) -> str:
    """Hash of dataclasses and scalars, for artifact cache keys."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(_canon(part)).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


__all__ = [
    "Config",
    "ConfigError",
    "OselSettings",
    "config_hash",
    "dump_config",
    "from_kv",
    "load_config",
    "stable_hash",
    "to_kv",
    "CqlConfig",
    "SurrogateConfig",
]
