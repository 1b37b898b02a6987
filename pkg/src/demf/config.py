"""Run configuration: a TOML file of ``key = value`` lines under dotted sections.

Every section and key is optional; unknown ones are rejected. Relative paths
resolve against the config file's directory. ``DEMF_SEED`` in the environment
overrides ``seed``.
"""

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fusion import DeMFConfig
from .toydet.scene import SceneSpec, SpecInvalid
from .toydet.train import ConfigInvalid, TrainConfig

PRECISIONS = ("float64", "float32")


@dataclass
class GradcheckConfig:
    seeds: int = 5
    h: float = 1e-5
    tol: float = 1e-6
    # float32 runs use the largest allowed step and a relaxed tolerance
    h_float32: float = 1e-3
    tol_float32: float = 1e-2
    ops: tuple = ()  # empty: every op


@dataclass
class Paths:
    out_dir: Path = Path("runs")
    checkpoint: Path = None
    metrics: Path = None
    camera: Path = None

    def resolve(self, base):
        def fix(p):
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else Path(base) / p

        out = fix(self.out_dir)
        self.out_dir = out
        self.checkpoint = fix(self.checkpoint) or out / "model.ckpt"
        self.metrics = fix(self.metrics) or out / "metrics.csv"
        self.camera = fix(self.camera)
        if self.camera is not None and not self.camera.parent.is_dir():
            raise ConfigInvalid(f"camera path {self.camera} is in a missing directory")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: DeMFConfig = field(default_factory=DeMFConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    paths: Paths = field(default_factory=Paths)

    def validate(self):
        if self.precision not in PRECISIONS:
            raise ConfigInvalid(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        try:
            self.model.validate()
            self.scene.validate()
        except (ValueError, SpecInvalid) as err:
            raise ConfigInvalid(str(err)) from err
        self.train.seed = self.seed
        self.train.validate()
        if self.model.num_classes != self.scene.num_classes:
            raise ConfigInvalid(
                f"model.num_classes={self.model.num_classes} but scene.num_classes={self.scene.num_classes}"
            )
        g = self.gradcheck
        if g.seeds < 1 or not (0 < g.h <= 1e-3 and 0 < g.h_float32 <= 1e-3) or g.tol < 0 or g.tol_float32 < 0:
            raise ConfigInvalid("gradcheck needs seeds >= 1, h in (0, 1e-3] and tol >= 0")
        return self


_SECTIONS = ("scene", "model", "optim", "train", "eval", "gradcheck", "paths")

# which TrainConfig fields each file section may set
_TRAIN_KEYS = {
    "optim": {"lr", "eps", "weight_decay", "lr_multipliers"},
    "train": {"steps", "train_scenes", "eval_every", "radius", "freeze_image", "assign_radius", "loss_weights"},
    "eval": {"eval_scenes", "iou_thresholds", "ensemble"},
}

_MODEL_ALIASES = {"candidates": "num_candidates"}


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _apply(obj, key, value, where):
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigInvalid(f"unknown key {where}.{key}")
    current = getattr(obj, key)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigInvalid(f"{where}.{key} must be true or false")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return key, _tupled(value)


def from_dict(data, base_dir="."):
    data = dict(data)
    cfg = RunConfig()
    scene_kw, train_kw = {}, {}
    betas = list(cfg.train.betas)
    for key in ("seed", "precision"):
        if key in data:
            setattr(cfg, key, data.pop(key))
    for section, body in data.items():
        if section not in _SECTIONS or not isinstance(body, dict):
            raise ConfigInvalid(f"unknown section or top-level key {section!r}")
        for key, value in body.items():
            if section == "scene":
                k, v = _apply(cfg.scene, key, value, section)
                scene_kw[k] = v
            elif section == "model" and key in _MODEL_ALIASES:
                train_kw[_MODEL_ALIASES[key]] = value
            elif section == "model":
                k, v = _apply(cfg.model, key, value, section)
                setattr(cfg.model, k, v)
            elif section == "optim" and key in ("beta1", "beta2"):
                betas[key == "beta2"] = float(value)
            elif section in _TRAIN_KEYS:
                if key not in _TRAIN_KEYS[section]:
                    raise ConfigInvalid(f"unknown key {section}.{key}")
                k, v = _apply(cfg.train, key, value, section)
                train_kw[k] = v
            elif section == "gradcheck":
                k, v = _apply(cfg.gradcheck, key, value, section)
                setattr(cfg.gradcheck, k, v)
            else:
                k, v = _apply(cfg.paths, key, value, section)
                setattr(cfg.paths, k, v)
    try:
        cfg.scene = SceneSpec(**{**dataclasses.asdict(cfg.scene), **scene_kw})
    except TypeError as err:
        raise ConfigInvalid(str(err)) from err
    train_kw["betas"] = tuple(betas)
    cfg.train = dataclasses.replace(cfg.train, **train_kw)
    if "lr_multipliers" in train_kw and not isinstance(train_kw["lr_multipliers"], dict):
        raise ConfigInvalid("optim.lr_multipliers must be a table of prefix = factor")
    env_seed = os.environ.get("DEMF_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as err:
            raise ConfigInvalid(f"DEMF_SEED must be an integer, got {env_seed!r}") from err
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigInvalid(f"seed must be an integer, got {cfg.seed!r}")
    cfg.paths.resolve(base_dir)
    return cfg.validate()


def load_config(path=None):
    """Parse a run-config file; ``None`` gives the defaults (paths relative to the cwd)."""
    if path is None:
        return from_dict({}, ".")
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as err:
        raise ConfigInvalid(f"config file {path} not found") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigInvalid(f"{path}: {err}") from err
    return from_dict(data, path.parent)
