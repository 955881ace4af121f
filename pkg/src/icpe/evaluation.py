"""Average precision and the episodic mAP protocol."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean

from .boxes import iou
from .data import CLASS_NAMES, Dataset
from .rng import Rng, derive_seed

REPORT_HEADER = "icpe-eval 1"


def voc_ap(detections, gts, iou_thresh: float = 0.5) -> float | None:
    """All-point interpolated AP for one class.

    ``detections``: sequence of ``(image_id, score, box)``; ``gts``: mapping
    image_id -> list of boxes. Detections are ranked by descending score with
    ties kept in insertion order; each GT matches at most once. Returns None
    when there are no ground-truth boxes.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    tp_flags = []
    for i in order:
        img, _, box = detections[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(img, ())):
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        hit = best >= iou_thresh and not used[img][best_j]
        if hit:
            used[img][best_j] = True
        tp_flags.append(hit)
    precision = []
    tp = 0
    for rank, hit in enumerate(tp_flags, start=1):
        tp += hit
        precision.append(tp / rank)
    # precision envelope: running max from the right
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    return math.fsum(p for p, hit in zip(precision, tp_flags) if hit) / n_gt


@dataclass
class EvalReport:
    per_seed: dict[int, dict[int, float]]  # seed -> class -> AP
    base_classes: tuple
    novel_classes: tuple
    gt_counts: dict[int, int]
    det_counts: dict[int, dict[int, int]]
    fingerprint: str
    seed: int
    label: str = "model"
    extra: dict = field(default_factory=dict)

    def seed_map(self, seed: int, split: str) -> float:
        classes = self.novel_classes if split == "novel" else self.base_classes
        aps = [self.per_seed[seed][c] for c in classes if c in self.per_seed[seed]]
        return fmean(aps) if aps else float("nan")

    @property
    def per_class(self) -> dict[int, float]:
        classes = sorted({c for aps in self.per_seed.values() for c in aps})
        return {c: fmean(aps[c] for aps in self.per_seed.values() if c in aps) for c in classes}

    @property
    def map_novel(self) -> float:
        return fmean(self.seed_map(s, "novel") for s in sorted(self.per_seed))

    @property
    def map_base(self) -> float:
        return fmean(self.seed_map(s, "base") for s in sorted(self.per_seed))

    def rows(self) -> list[tuple]:
        out = []
        for s in sorted(self.per_seed):
            for c in sorted(self.per_seed[s]):
                split = "novel" if c in self.novel_classes else "base"
                out.append((self.label, s, split, c, self.per_seed[s][c]))
        return out

    def to_text(self) -> str:
        lines = [REPORT_HEADER, f"fingerprint {self.fingerprint}", f"seed {self.seed}",
                 "# arm,seed,split,class,AP"]
        lines += [f"{a},{s},{sp},{c},{ap!r}" for a, s, sp, c, ap in self.rows()]
        lines.append("# summary")
        for s in sorted(self.per_seed):
            lines.append(f"seed_map seed={s} novel={self.seed_map(s, 'novel')!r} "
                         f"base={self.seed_map(s, 'base')!r}")
        lines.append(f"map novel={self.map_novel!r} base={self.map_base!r}")
        lines.append("gt " + " ".join(f"{c}:{n}" for c, n in sorted(self.gt_counts.items())))
        for s in sorted(self.det_counts):
            lines.append(f"det seed={s} " + " ".join(f"{c}:{n}" for c, n in sorted(self.det_counts[s].items())))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def parse_report_rows(text: str) -> list[tuple]:
    rows = []
    for line in text.splitlines():
        if line.startswith("#") or line.count(",") != 4:
            continue
        a, s, sp, c, ap = line.split(",")
        rows.append((a, int(s), sp, int(c), float(ap)))
    return rows


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate_detector(detect, dataset: Dataset, classes, base, novel, seeds, *,
                      prepare_seed=None, label: str = "model", config: dict | None = None) -> EvalReport:
    """Score a detector callable ``detect(image) -> [Detection]`` over ``dataset``.

    ``prepare_seed(seed)`` is called before each seed's pass (e.g. to draw
    that run's supports).
    """
    classes = sorted(classes)
    gts: dict[int, dict[int, list]] = {c: {} for c in classes}
    for im in dataset.images:
        for b in im.boxes:
            if b.class_id in gts:
                gts[b.class_id].setdefault(im.index, []).append(b.coords)
    per_seed: dict[int, dict[int, float]] = {}
    det_counts: dict[int, dict[int, int]] = {}
    for s in seeds:
        if prepare_seed is not None:
            prepare_seed(s)
        dets: dict[int, list] = {c: [] for c in classes}
        for im in dataset.images:
            for d in detect(im.image):
                if d.class_id in dets:
                    dets[d.class_id].append((im.index, d.score, d.coords))
        aps = {}
        for c in classes:
            ap = voc_ap(dets[c], gts[c])
            if ap is not None:
                aps[c] = ap
        per_seed[s] = aps
        det_counts[s] = {c: len(dets[c]) for c in classes}
    gt_counts = {c: sum(len(v) for v in gts[c].values()) for c in classes}
    fp = fingerprint({"config": config or {}, "seeds": list(seeds), "images": len(dataset.images),
                      "dataset": dataset.spec.to_json()})
    return EvalReport(per_seed, tuple(sorted(base)), tuple(sorted(novel)), gt_counts, det_counts,
                      fp, int(seeds[0]) if seeds else 0, label)


def evaluate_map(model, dataset: Dataset, support_pool: Dataset, k: int, seeds, *,
                 classes=None, score_thresh: float = 0.05, nms_iou: float = 0.5,
                 label: str = "model", config: dict | None = None) -> EvalReport:
    """Episodic evaluation: per seed, draw k supports per class from
    ``support_pool`` once, then detect on every image of ``dataset``."""
    from .detector import predict
    from . import tensor as T

    spec = dataset.spec
    classes = sorted(classes if classes is not None else spec.all_classes)
    state: dict = {}

    def prepare(seed):
        rng = Rng(derive_seed(seed, "eval-supports"))
        supports = {c: rng.sample(support_pool.supports_of(c), k) for c in classes}
        with T.no_grad():
            state["feats"] = model.encode_supports(supports)
        state["supports"] = supports

    def detect(image):
        return predict(image, state["supports"], model, score_thresh, nms_iou,
                       support_feats=state["feats"])

    cfg = dict(config or {})
    cfg.update(k=k, score_thresh=score_thresh, nms_iou=nms_iou, model=model.cfg.to_dict())
    return evaluate_detector(detect, dataset, classes, spec.base_classes, spec.novel_classes, list(seeds),
                             prepare_seed=prepare, label=label, config=cfg)


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if 0 <= c < len(CLASS_NAMES) else str(c)
