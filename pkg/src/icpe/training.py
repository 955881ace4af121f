"""Episodic two-phase training: meta-training on base classes, then
finetuning on a balanced k-shot set over base + novel classes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import BoxAnnotation, encode_deltas, iou
from .data import Dataset, Episode, SceneImage, SupportInstance, sample_episode
from .detector import (ICPEDetector, anchor_grid, box_to_window, detection_forward,
                       prepare_image, total_loss)
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    iterations: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    k: int = 1
    n_query: int = 1
    lam: float = 1.0
    flip: bool = True
    neg_ratio: int = 3
    jitter: int = 1
    grid_positives: int = 0
    neg_iou: float = 0.3
    decay_at: float = 0.0  # fraction of iterations after which lr is multiplied by ``decay``; 0 = never
    decay: float = 0.1
    seed: int = 0

    def lr_at(self, it: int) -> float:
        if self.decay_at > 0 and it >= self.decay_at * self.iterations:
            return self.lr * self.decay
        return self.lr


@dataclass
class TrainLog:
    phase: str
    losses: list[float] = field(default_factory=list)
    parts: list[dict] = field(default_factory=list)
    visited_images: list[int] = field(default_factory=list)

    def smoothed(self, window: int = 50) -> list[float]:
        out, acc = [], 0.0
        for i, v in enumerate(self.losses):
            acc += v
            if i >= window:
                acc -= self.losses[i - window]
            out.append(acc / min(i + 1, window))
        return out


class TrainingDiverged(RuntimeError):
    pass


def flip_scene(scene: SceneImage) -> SceneImage:
    w = scene.image.shape[1]
    boxes = [BoxAnnotation(w - b.x2, b.y1, w - b.x1, b.y2, b.class_id) for b in scene.boxes]
    return SceneImage(scene.image[:, ::-1].copy(), boxes, scene.index)


def flip_support(s: SupportInstance) -> SupportInstance:
    return SupportInstance(s.image[:, ::-1].copy(), s.mask[:, ::-1].copy(), s.class_id, s.index)


def _jitter(box: BoxAnnotation, rng: Rng, size: int) -> tuple | None:
    w, h = box.x2 - box.x1, box.y2 - box.y1
    for _ in range(20):
        cx = (box.x1 + box.x2) / 2 + rng.uniform(-0.2, 0.2) * w
        cy = (box.y1 + box.y2) / 2 + rng.uniform(-0.2, 0.2) * h
        nw = w * math.exp(rng.uniform(-0.25, 0.25))
        nh = h * math.exp(rng.uniform(-0.25, 0.25))
        cand = (max(cx - nw / 2, 0.0), max(cy - nh / 2, 0.0),
                min(cx + nw / 2, float(size)), min(cy + nh / 2, float(size)))
        if cand[2] > cand[0] and cand[3] > cand[1] and iou(cand, box) >= 0.5:
            return cand
    return None


def sample_rois(gts: list[BoxAnnotation], image_size: int, rng: Rng, grid: list[tuple],
                jitter: int = 1, neg_ratio: int = 3, grid_positives: int = 0,
                neg_iou: float = 0.3) -> list[tuple[tuple, BoxAnnotation | None]]:
    """Positives: each GT box, ``jitter`` perturbed copies with IoU >= 0.5 and up to
    ``grid_positives`` grid boxes with IoU >= 0.5. Negatives: ``neg_ratio`` times as
    many grid boxes whose IoU with every GT is below ``neg_iou``."""
    rois: list[tuple[tuple, BoxAnnotation | None]] = []
    for gt in gts:
        rois.append((gt.coords, gt))
        for _ in range(jitter):
            j = _jitter(gt, rng, image_size)
            if j is not None:
                rois.append((j, gt))
        if grid_positives:
            near = [b for b in grid if iou(b, gt) >= 0.5]
            rois.extend((b, gt) for b in rng.sample(near, min(grid_positives, len(near))))
    negatives = [b for b in grid if all(iou(b, gt) < neg_iou for gt in gts)]
    n_neg = min(len(negatives), neg_ratio * len(rois))
    rois.extend((b, None) for b in rng.sample(negatives, n_neg))
    return rois


def query_loss(model: ICPEDetector, query: SceneImage, support_feats: dict, x_q: T.Tensor,
               rng: Rng, schedule: Schedule, grid: list[tuple]):
    size = query.image.shape[0]
    roster = sorted(support_feats)
    protos, _ = model.class_prototypes(x_q, support_feats)
    rois = sample_rois(query.boxes, size, rng, grid, schedule.jitter, schedule.neg_ratio,
                       schedule.grid_positives, schedule.neg_iou)
    windows = [box_to_window(b, (size, size), x_q.shape[1:]) for b, _ in rois]
    logits, deltas = detection_forward(T.roi_pool(x_q, windows), protos, model.heads, roster)
    m = len(roster)
    labels = [roster.index(gt.class_id) if gt is not None else m for _, gt in rois]
    targets = [encode_deltas(b, gt) if gt is not None else None for b, gt in rois]
    proto_logits, proto_labels = model.meta_logits(protos)
    return total_loss(logits, labels, deltas, targets, proto_logits, proto_labels, schedule.lam)


def episode_loss(model: ICPEDetector, episode: Episode, rng: Rng, schedule: Schedule):
    """Mean loss over the episode's query images (supports encoded once)."""
    roster = episode.classes
    supports = {c: [flip_support(s) if schedule.flip and rng.random() < 0.5 else s
                    for s in episode.supports[c]] for c in roster}
    queries = [flip_scene(q) if schedule.flip and rng.random() < 0.5 else q for q in episode.queries]
    batch = [prepare_image(q.image) for q in queries]
    batch += [prepare_image(s.image, s.mask) for c in roster for s in supports[c]]
    feats = model.features(np.stack(batch))
    nq = len(queries)
    support_feats: dict[int, list] = {}
    i = nq
    for c in roster:
        for _ in supports[c]:
            support_feats.setdefault(c, []).append(T.index(feats, i))
            i += 1
    grid = anchor_grid(queries[0].image.shape[0], model.cfg.grid_scales, model.cfg.grid_ratios)
    total, parts = None, {"cls": 0.0, "reg": 0.0, "meta": 0.0}
    for qi, q in enumerate(queries):
        loss, p = query_loss(model, q, support_feats, T.index(feats, qi), rng, schedule, grid)
        total = loss if total is None else T.add(total, loss)
        for key in parts:
            parts[key] += p[key] / nq
    return T.scale(total, 1.0 / nq), parts


def _run(model: ICPEDetector, phase: str, schedule: Schedule, sample) -> TrainLog:
    trace = TrainLog(phase)
    for it in range(schedule.iterations):
        ep_seed = derive_seed(schedule.seed, phase, it)
        rng = Rng(ep_seed)
        episode = sample(rng, trace.visited_images)
        loss, parts = episode_loss(model, episode, rng, schedule)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"{phase}: non-finite loss at iteration {it} (episode seed {ep_seed})")
        loss.backward()
        T.sgd_step(model.params, schedule.lr_at(it), schedule.momentum, schedule.weight_decay)
        trace.losses.append(value)
        trace.parts.append(parts)
        if (it + 1) % 100 == 0:
            recent = trace.losses[-100:]
            log.info("%s iter=%d loss=%.4f", phase, it + 1, sum(recent) / len(recent))
    return trace


def meta_train(model: ICPEDetector, dataset: Dataset, schedule: Schedule, classes=None) -> TrainLog:
    """Episodes over base classes only; queries never contain another class."""
    pool = tuple(sorted(classes if classes is not None else dataset.spec.base_classes))

    def sample(rng, log_):
        return sample_episode(dataset, pool, schedule.k, schedule.n_query, rng, log_)

    return _run(model, "meta_train", schedule, sample)


def meta_finetune(model: ICPEDetector, fewshot: Dataset, schedule: Schedule, classes=None) -> TrainLog:
    """Episodes over the union roster with exactly ``schedule.k`` supports per class."""
    spec = fewshot.spec
    pool = tuple(sorted(classes if classes is not None else spec.base_classes + spec.novel_classes))

    def sample(rng, log_):
        return sample_episode(fewshot, pool, schedule.k, schedule.n_query, rng, log_)

    return _run(model, "meta_finetune", schedule, sample)
