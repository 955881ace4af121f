"""Glue between the config and the train/eval building blocks."""

from __future__ import annotations

import logging
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, few_shot_subset, generate_dataset, render_scene
from .detector import ICPEDetector
from .evaluation import EvalReport, evaluate_map
from .rng import Rng, derive_seed
from .training import TrainLog, meta_finetune, meta_train

log = logging.getLogger(__name__)


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training world and a disjoint test split (scene indices after the training ones)."""
    spec = cfg.world_spec()
    train = generate_dataset(spec, cfg.data.n_train)
    start = cfg.data.n_train
    test = Dataset(spec, [render_scene(spec, i) for i in range(start, start + cfg.data.n_test)], [])
    return train, test


def fewshot_set(cfg: RunConfig, train: Dataset, k: int, seed: int) -> Dataset:
    spec = train.spec
    return few_shot_subset(train, spec.base_classes, spec.novel_classes, k, Rng(derive_seed(seed, "fewshot", k)))


def new_model(cfg: RunConfig, seed: int | None = None) -> ICPEDetector:
    return ICPEDetector(cfg.model_config(), seed=cfg.seed if seed is None else seed)


def clone_model(model: ICPEDetector) -> ICPEDetector:
    twin = ICPEDetector(model.cfg, seed=model.seed)
    twin.params.load_state(model.params.state())
    return twin


def load_model(cfg: RunConfig, path) -> ICPEDetector:
    model = new_model(cfg)
    model.params.load_state(load_checkpoint(path))
    return model


def run_meta_train(cfg: RunConfig, train: Dataset, seed: int | None = None) -> tuple[ICPEDetector, TrainLog]:
    seed = cfg.seed if seed is None else seed
    model = new_model(cfg, seed)
    schedule = cfg.schedule("meta_train")
    schedule.seed = seed
    return model, meta_train(model, train, schedule)


def run_finetune(cfg: RunConfig, model: ICPEDetector, fewshot: Dataset, k: int,
                 seed: int | None = None) -> TrainLog:
    schedule = cfg.schedule("finetune", k=k)
    schedule.seed = cfg.seed if seed is None else seed
    return meta_finetune(model, fewshot, schedule)


def run_eval(cfg: RunConfig, model: ICPEDetector, test: Dataset, pool: Dataset, k: int,
             seeds, label: str = "model") -> EvalReport:
    e = cfg.eval
    return evaluate_map(model, test, pool, k, seeds, score_thresh=e.score_thresh, nms_iou=e.nms_iou,
                        label=label, config={"resolved": cfg.resolved_text()})


def write_trace(trace: TrainLog, path) -> None:
    lines = [f"# icpe-trace 1 phase={trace.phase}", "# iteration,loss,cls,reg,meta"]
    for i, (loss, p) in enumerate(zip(trace.losses, trace.parts)):
        lines.append(f"{i},{loss!r},{p['cls']!r},{p['reg']!r},{p['meta']!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_model(model: ICPEDetector, path, roster) -> None:
    save_checkpoint(model.params, path)
    Path(str(path) + ".classes").write_text("".join(f"{c}\n" for c in roster))
