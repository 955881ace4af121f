"""Run configuration: INI sections with a default for every key.

The same keys are accepted on the command line as ``--section.key=value``.
``resolved_text`` materializes every default so a snapshot fully describes
a run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import ShapeWorldSpec
from .detector import ModelConfig
from .training import Schedule

CONFIG_HEADER = "# icpe-config 1"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    image_size: int = 64
    base_classes: tuple = (0, 1, 2, 3, 4, 5)
    novel_classes: tuple = (6, 7)
    min_objects: int = 1
    max_objects: int = 3
    scene_scale: tuple = (14, 26)
    support_scale: tuple = (24, 40)
    supports_per_class: int = 20
    clutter_blobs: int = 4
    noise: float = 0.06
    n_train: int = 600
    n_test: int = 60


@dataclass
class ModelSection:
    channels: int = 32
    embed_dim: int = 0
    alpha: float = 1.0
    use_cic: bool = True
    use_ccm: bool = True
    use_intra: bool = True
    use_inter: bool = True
    img_proto: str = "gap"
    clamp_condition: bool = True
    normalize_inter: bool = False


@dataclass
class TrainSection:
    iterations: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    k: int = 1
    lam: float = 1.0
    flip: bool = True
    neg_ratio: int = 3
    jitter: int = 1
    n_query: int = 1
    grid_positives: int = 0
    neg_iou: float = 0.3
    decay_at: float = 0.0
    decay: float = 0.1


@dataclass
class EvalSection:
    k: int = 1
    seeds: tuple = (0,)
    score_thresh: float = 0.05
    nms_iou: float = 0.5


@dataclass
class AblateSection:
    arms: tuple = ("baseline", "cic", "pda", "icpe")
    seeds: tuple = (0, 1, 2, 3, 4)
    shots: tuple = (1, 3)
    workers: int = 1
    eval_draws: int = 1  # test-time support draws averaged per training seed


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    meta_train: TrainSection = field(default_factory=TrainSection)
    finetune: TrainSection = field(default_factory=lambda: TrainSection(iterations=400, lr=0.001))
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    SECTIONS = ("data", "model", "meta_train", "finetune", "eval", "ablate")

    def __post_init__(self):
        if self.meta_train.lam < 0 or self.finetune.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.model.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.model.use_ccm and not self.model.use_cic:
            raise ConfigError("model.use_ccm requires model.use_cic")
        for name in ("meta_train", "finetune"):
            sec = getattr(self, name)
            if sec.iterations < 0 or sec.k < 1:
                raise ConfigError(f"{name}: iterations must be >= 0 and k >= 1")
            if sec.n_query < 1 or sec.neg_ratio < 0 or sec.jitter < 0 or sec.grid_positives < 0:
                raise ConfigError(f"{name}: n_query must be >= 1; neg_ratio, jitter, grid_positives >= 0")
            if not 0 <= sec.decay_at <= 1 or sec.decay < 0:
                raise ConfigError(f"{name}: decay_at must lie in [0, 1] and decay >= 0")
        if self.eval.k < 1 or not self.eval.seeds:
            raise ConfigError("eval: k must be >= 1 and seeds non-empty")
        if self.ablate.workers < 1 or self.ablate.eval_draws < 1:
            raise ConfigError("ablate: workers and eval_draws must be >= 1")

    # -- derived objects ------------------------------------------------------

    def world_spec(self) -> ShapeWorldSpec:
        d = self.data
        try:
            return ShapeWorldSpec(seed=self.seed, image_size=d.image_size, base_classes=tuple(d.base_classes),
                                  novel_classes=tuple(d.novel_classes), min_objects=d.min_objects,
                                  max_objects=d.max_objects, scene_scale=tuple(d.scene_scale),
                                  support_scale=tuple(d.support_scale), supports_per_class=d.supports_per_class,
                                  clutter_blobs=d.clutter_blobs, noise=d.noise)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        m = self.model
        n = len(self.data.base_classes) + len(self.data.novel_classes)
        classes = tuple(self.data.base_classes) + tuple(self.data.novel_classes)
        try:
            return ModelConfig(channels=m.channels, embed_dim=m.embed_dim, num_classes=max(max(classes) + 1, n),
                               alpha=m.alpha, use_cic=m.use_cic, use_ccm=m.use_ccm, use_intra=m.use_intra,
                               use_inter=m.use_inter, img_proto=m.img_proto,
                               clamp_condition=m.clamp_condition, normalize_inter=m.normalize_inter)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self, phase: str, k: int | None = None) -> Schedule:
        sec: TrainSection = getattr(self, phase)
        return Schedule(iterations=sec.iterations, lr=sec.lr, momentum=sec.momentum,
                        weight_decay=sec.weight_decay, k=k if k is not None else sec.k, lam=sec.lam,
                        flip=sec.flip, neg_ratio=sec.neg_ratio, jitter=sec.jitter, n_query=sec.n_query,
                        grid_positives=sec.grid_positives, neg_iou=sec.neg_iou, decay_at=sec.decay_at,
                        decay=sec.decay, seed=self.seed)

    def with_model_flags(self, **flags) -> "RunConfig":
        return replace(self, model=replace(self.model, **flags))

    # -- text form ------------------------------------------------------------

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed)}
        for name in self.SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        return cp

    def resolved_text(self) -> str:
        lines = [CONFIG_HEADER]
        cp = self.to_parser()
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)

    def flag_block(self) -> dict:
        return {f.name: getattr(self.model, f.name) for f in fields(self.model)
                if f.name.startswith("use_") or f.name in ("img_proto", "embed_dim")}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if not key.endswith(".arms"):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def apply_overrides(cfg: RunConfig, pairs: list[tuple[str, str]]) -> RunConfig:
    """Apply ``(section.key, value)`` pairs; unknown keys are errors."""
    sections = {name: getattr(cfg, name) for name in RunConfig.SECTIONS}
    seed = cfg.seed
    for dotted, raw in pairs:
        section, _, key = dotted.partition(".")
        if section == "run" and key == "seed":
            seed = _coerce(raw, 0, dotted)
            continue
        if section not in sections or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        sec = sections[section]
        names = {f.name for f in fields(sec)}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        sections[section] = replace(sec, **{key: _coerce(raw, getattr(sec, key), dotted)})
    return RunConfig(seed=seed, **sections)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    pairs = [(f"{s}.{k}", v) for s in cp.sections() for k, v in cp[s].items()]
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())
