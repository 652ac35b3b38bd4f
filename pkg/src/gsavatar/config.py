"""INI run configuration with typed, documented defaults.

Every key below may appear in a config file; anything else is rejected.

[paths]
    template        builtin:puppet or a JSON template file
    dataset         dataset directory (written by ``synth``, read by train/eval)
    output          run directory for checkpoints, curves and reports
    fit_target      JSON with ``vertices`` (V, 3) and ``joints`` (J, 3) arrays for ``fit``
[run]
    seed            seeds synthesis, decoder init and step sampling
[schedule]
    pretrain_steps, joint_steps, face_steps, lr_decoder, lr_canonical
[loss]
    l1, perceptual, offset, adv
[model]
    n_mlp, cm, activation, body_resolution, face_resolution, densify_factor,
    face_half_size, crop_size, attenuation, head_threshold
[data]
    n_frames, n_views, width, height, focal, radius, heldout_views (comma list)
[fit]
    lam, tolerance (max vertex RMS in meters), max_iter
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .avatar import AvatarSpec
from .data import SynthSpec
from .trainer import LossWeights, TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass
class PathsSection:
    template: str = "builtin:puppet"
    dataset: str = "data"
    output: str = "run"
    fit_target: str = ""


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class ScheduleSection:
    pretrain_steps: int = 500
    joint_steps: int = 5000
    face_steps: int = 500
    lr_decoder: float = 5e-4
    lr_canonical: float = 5e-3


@dataclass
class LossSection:
    l1: float = 1.0
    perceptual: float = 0.1
    offset: float = 5e-3
    adv: float = 5e-3


@dataclass
class ModelSection:
    n_mlp: int = 3
    cm: int = 1
    activation: str = "silu"
    body_resolution: int = 112
    face_resolution: int = 18
    densify_factor: int = 2
    face_half_size: float = 0.16
    crop_size: int = 64
    attenuation: float = 0.1
    head_threshold: float = 0.5


@dataclass
class DataSection:
    n_frames: int = 30
    n_views: int = 8
    width: int = 128
    height: int = 128
    focal: float = 170.0
    radius: float = 3.0
    heldout_views: str = "7"


@dataclass
class FitSection:
    lam: float = 1.0
    tolerance: float = 1e-4
    max_iter: int = 5000


@dataclass
class Config:
    paths: PathsSection = field(default_factory=PathsSection)
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    loss: LossSection = field(default_factory=LossSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    fit: FitSection = field(default_factory=FitSection)

    # -- derived objects

    def avatar_spec(self) -> AvatarSpec:
        m = self.model
        return AvatarSpec(body_resolution=m.body_resolution, face_resolution=m.face_resolution,
                          face_factor=m.densify_factor, face_half_size=m.face_half_size, n_mlp=m.n_mlp,
                          cm=m.cm, activation=m.activation, head_threshold=m.head_threshold,
                          attenuation=m.attenuation, crop_size=m.crop_size)

    def synth_spec(self) -> SynthSpec:
        d = self.data
        return SynthSpec(n_frames=d.n_frames, n_views=d.n_views, width=d.width, height=d.height, focal=d.focal,
                         radius=d.radius, heldout_views=self.heldout_views())

    def heldout_views(self) -> tuple[int, ...]:
        return parse_int_list(self.data.heldout_views)

    def train_schedule(self) -> TrainSchedule:
        s = self.schedule
        return TrainSchedule(s.pretrain_steps, s.joint_steps, s.face_steps, s.lr_decoder, s.lr_canonical,
                             self.run.seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.l1, self.loss.perceptual, self.loss.offset, self.loss.adv)


def parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _convert(section: str, key: str, typ, raw: str):
    try:
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ}") from None


def from_parser(cp: configparser.ConfigParser, source: str = "<config>") -> Config:
    cfg = Config()
    sections = {f.name: f for f in fields(Config)}
    for name in cp.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
        sec = getattr(cfg, name)
        known = {f.name: f.type for f in fields(sec)}
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            setattr(sec, key, _convert(name, key, known[key], raw))
    # construct derived objects once so bad values fail at load time
    cfg.train_schedule()
    cfg.loss_weights()
    cfg.heldout_views()
    if cfg.model.activation not in ("silu", "tanh", "identity"):
        raise ConfigError(f"{source}: [model] activation must be silu, tanh or identity")
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(p.read_text(), source=str(p))
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    return from_parser(cp, str(p))


def to_text(cfg: Config) -> str:
    lines = []
    for sec in fields(Config):
        lines.append(f"[{sec.name}]")
        obj = getattr(cfg, sec.name)
        for f in fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def save_config(path, cfg: Config) -> None:
    Path(path).write_text(to_text(cfg))
