"""Flat run configuration: ``key = value`` text, CLI flags override file values
override defaults. A copy is written into every output directory."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .loss import LossConfig
from .model import ModelConfig
from .preprocess import PreprocessConfig
from .scene_io import Band
from .train import TrainConfig

ROOT_ENV = "RAMS_DATA_ROOT"


@dataclass(frozen=True)
class RunConfig:
    band: str = "RED"
    seed: int = 0
    root: str = ""
    cache: str = ""
    out: str = ""
    workers: int = 1
    # preprocessing
    T: int = 9
    c_min: float = 0.85
    n_p: int = 7
    max_radius: int = 5
    patches_per_image: int = 16
    lr_patch_size: int = 32
    # model
    F: int = 32
    N: int = 12
    f_h: int = 3
    f_w: int = 3
    f_t: int = 3
    r: int = 8
    s: int = 3
    C: int = 1
    ablate_rta: bool = False
    # loss
    d: int = 3
    use_mask: bool = True
    # training
    batch_size: int = 32
    epochs: int = 100
    lr_initial: float = 5e-4
    lr_final: float = 5e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    # inference
    ensemble: int = 20

    def __post_init__(self):
        Band(self.band)

    @property
    def dataset_root(self) -> str:
        return os.environ.get(ROOT_ENV) or self.root

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(self.T, self.c_min, self.n_p, self.max_radius,
                                self.patches_per_image, self.lr_patch_size, 0.85, self.s, self.seed)

    def model(self) -> ModelConfig:
        return ModelConfig(self.F, self.N, self.f_h, self.f_w, self.f_t, self.r, self.s, self.T, self.C)

    def loss(self) -> LossConfig:
        return LossConfig(self.d, self.use_mask)

    def train(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, self.lr_initial, self.lr_final, self.adam_beta1,
                           self.adam_beta2, self.adam_epsilon, self.seed, Band(self.band), self.lr_patch_size)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / "run_config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def update(self, **values) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        clean = {}
        for k, v in values.items():
            if v is None:
                continue
            if k not in types:
                raise KeyError(f"unknown config key {k!r}")
            clean[k] = _coerce(types[k], v)
        return replace(self, **clean)


def _coerce(typ: str, v):
    if typ == "bool":
        if isinstance(v, bool):
            return v
        s = str(v).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return str(v)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        out[k] = v
    return out


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg = cfg.update(**parse_config_text(Path(path).read_text()))
    return cfg.update(**overrides)
