"""Run configuration: INI-style ``key = value`` file with section headers.

Sections map onto the module configs::

    [run]       seed, threads
    [scene]     SceneSpec fields
    [shift]     ShiftSpec fields
    [benchmark] n_source, n_target
    [perturb]   PerturbConfig fields
    [loss]      LossConfig fields
    [evolve]    EvolutionConfig scalar fields

Unknown sections or keys are rejected. ``[run] seed`` seeds the scene, the
shift and training unless a section sets its own ``seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

from rankseg.errors import ConfigError
from rankseg.evolve import EvolutionConfig
from rankseg.losses import LossConfig
from rankseg.rankcore import PerturbConfig
from rankseg.synthshift import SceneSpec, ShiftSpec

_EVOLVE_KEYS = ("n_phases", "iters_per_phase", "batch_size", "lr", "infer_iters", "sampling", "widths")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: ShiftSpec = field(default_factory=lambda: ShiftSpec("gamma", 1.0 / 3.0))
    n_source: int = 40
    n_target: int = 20
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    evolve: EvolutionConfig = field(default_factory=EvolutionConfig)

    def evolution(self) -> EvolutionConfig:
        """Training config with the perturbation and loss sections folded in."""
        return replace(self.evolve, perturb=self.perturb, loss=self.loss)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed), "threads": str(self.threads)}
        cp["scene"] = _section(self.scene)
        cp["shift"] = _section(self.shift)
        cp["benchmark"] = {"n_source": str(self.n_source), "n_target": str(self.n_target)}
        cp["perturb"] = _section(self.perturb)
        cp["loss"] = _section(self.loss)
        cp["evolve"] = {k: v for k, v in _section(self.evolve).items() if k in _EVOLVE_KEYS + ("seed",)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section(obj) -> dict:
    return {f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name not in ("perturb", "loss", "dump_dir")}


def _parse(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        if default is None:
            return int(raw) if raw else None
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from exc


def _apply(obj, values: dict, section: str, allowed=None):
    names = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in names or (allowed is not None and key not in allowed):
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        updates[key] = _parse(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid values in [{section}]: {exc}") from exc


def load_config(text: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Parse configuration text; ``seed`` (the ``--seed`` flag) overrides every seed."""
    cp = configparser.ConfigParser()
    if text:
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed configuration: {exc}") from exc
    known = {"run", "scene", "shift", "benchmark", "perturb", "loss", "evolve"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown configuration sections {sorted(extra)}")
    sec = {name: dict(cp[name]) if cp.has_section(name) else {} for name in known}

    cfg = RunConfig()
    run = sec["run"]
    for key in run:
        if key not in ("seed", "threads"):
            raise ConfigError(f"unknown key {key!r} in section [run]")
    cfg.seed = int(run.get("seed", 0)) if seed is None else int(seed)
    cfg.threads = int(run.get("threads", 0))

    bench = sec["benchmark"]
    for key in bench:
        if key not in ("n_source", "n_target"):
            raise ConfigError(f"unknown key {key!r} in section [benchmark]")
    cfg.n_source = int(bench.get("n_source", cfg.n_source))
    cfg.n_target = int(bench.get("n_target", cfg.n_target))

    def seeded(obj, name, allowed=None):
        values = dict(sec[name])
        if seed is not None or "seed" not in values:
            values["seed"] = str(cfg.seed)
        return _apply(obj, values, name, allowed)

    cfg.scene = seeded(cfg.scene, "scene")
    cfg.shift = seeded(cfg.shift, "shift")
    cfg.perturb = _apply(cfg.perturb, sec["perturb"], "perturb")
    cfg.loss = _apply(cfg.loss, sec["loss"], "loss")
    cfg.evolve = seeded(cfg.evolve, "evolve", allowed=set(_EVOLVE_KEYS) | {"seed"})
    return cfg


def load_config_file(path, seed: Optional[int] = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration file {path}: {exc}") from exc
    return load_config(text, seed)


def override(cfg: RunConfig, **flags) -> RunConfig:
    """Apply command-line overrides; ``None`` values are ignored."""
    p, l, e = {}, {}, {}
    if flags.get("sigma") is not None:
        p["sigma"] = flags["sigma"]
    if flags.get("n_perturb") is not None:
        p["n_perturb"] = flags["n_perturb"]
    if flags.get("grades") is not None:
        p["n_grades"] = flags["grades"]
    if flags.get("alpha") is not None:
        l["alpha"] = flags["alpha"]
    if flags.get("stop_grad_perturbed"):
        l["stop_grad_perturbed"] = True
    if flags.get("train_phases") is not None:
        e["n_phases"] = flags["train_phases"]
    if flags.get("infer_iters") is not None:
        e["infer_iters"] = flags["infer_iters"]
    try:
        cfg.perturb = replace(cfg.perturb, **p)
        cfg.loss = replace(cfg.loss, **l)
        cfg.evolve = replace(cfg.evolve, **e)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if flags.get("threads") is not None:
        cfg.threads = flags["threads"]
    return cfg
