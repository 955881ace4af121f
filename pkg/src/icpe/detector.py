"""Two-branch meta detector.

Query and support images share one three-stage backbone. Support maps are
coupled with the query map, aggregated into per-class prototypes, and each
prototype gates the query RoI features channel-wise before the shared
classification and regression heads. Proposals are not learned: training uses
ground-truth-derived boxes, inference a fixed sliding-window grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .aggregation import ClassPrototype, InterDamParams, aggregate_prototypes
from .boxes import BoxAnnotation, Detection, clip_box, decode_deltas
from .coupling import CouplingParams, cic_forward
from .rng import Rng, derive_seed
from .tensor import ParamRegistry, Tensor

STRIDE = 8
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    channels: int = 32
    embed_dim: int = 0  # 0 means "same as channels"
    stage_channels: tuple = (16, 32)
    num_classes: int = 8
    alpha: float = 1.0
    use_cic: bool = True
    use_ccm: bool = True
    use_intra: bool = True
    use_inter: bool = True
    img_proto: str = "gap"
    clamp_condition: bool = True
    normalize_inter: bool = False
    grid_scales: tuple = (14, 20, 28)
    grid_ratios: tuple = (1.0, 2.0)

    def __post_init__(self):
        if self.use_ccm and not self.use_cic:
            raise ValueError("use_ccm requires use_cic")
        if self.img_proto not in ("gap", "gap+gmp"):
            raise ValueError(f"unknown img_proto {self.img_proto!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @property
    def d(self) -> int:
        return self.embed_dim or self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BackboneParams:
    stages: list  # [(weight, bias)] * 3

    @classmethod
    def create(cls, registry: ParamRegistry, rng_for, plan: tuple) -> "BackboneParams":
        stages = []
        for i, (cin, cout) in enumerate(zip(plan[:-1], plan[1:])):
            name = f"backbone.conv{i + 1}"
            bound = math.sqrt(6.0 / (cin * 9))
            w = registry.add(f"{name}.weight", T.uniform_init(rng_for(f"{name}.weight"), (cout, cin, 3, 3), bound))
            b = registry.add(f"{name}.bias", np.zeros(cout))
            stages.append((w, b))
        return cls(stages)


@dataclass
class HeadParams:
    cls_w: Tensor
    cls_b: Tensor
    bg_w: Tensor
    bg_b: Tensor
    reg_w: Tensor
    reg_b: Tensor
    meta_w: Tensor
    meta_b: Tensor

    @classmethod
    def create(cls, registry: ParamRegistry, rng_for, channels: int, num_classes: int) -> "HeadParams":
        bound = 1.0 / math.sqrt(channels)
        out = {}
        for key, name, rows in (("cls", "head.cls", 1), ("bg", "head.bg", 1),
                                ("reg", "head.reg", 4), ("meta", "head.meta", num_classes)):
            out[f"{key}_w"] = registry.add(f"{name}.weight",
                                           T.uniform_init(rng_for(f"{name}.weight"), (rows, channels), bound))
            out[f"{key}_b"] = registry.add(f"{name}.bias", np.zeros(rows))
        return cls(**out)


@dataclass
class SupportInput:
    """A support image prepared for the backbone (normalised, mask appended)."""
    data: np.ndarray  # [4, H, W]
    class_id: int


@dataclass
class RoI:
    box: tuple
    window: tuple  # (y0, y1, x0, x1) in feature cells, half-open
    feature: Tensor | None = None
    label: int = -1  # class id, or -1 for background
    reg_target: tuple | None = None


class ICPEDetector:
    """Parameter container plus the forward passes of the detector."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.seed = seed
        self.params = ParamRegistry()

        def rng_for(name):
            return Rng(derive_seed(seed, "init", name))

        plan = (4,) + tuple(self.cfg.stage_channels) + (self.cfg.channels,)
        self.backbone = BackboneParams.create(self.params, rng_for, plan)
        self.coupling = CouplingParams.create(self.params, rng_for, self.cfg.channels, self.cfg.d)
        self.inter = InterDamParams.create(self.params, rng_for, self.cfg.channels)
        self.heads = HeadParams.create(self.params, rng_for, self.cfg.channels, self.cfg.num_classes)

    # -- feature extraction -------------------------------------------------

    def features(self, inputs: np.ndarray | Tensor) -> Tensor:
        x = inputs if isinstance(inputs, Tensor) else T.tensor(inputs)
        return backbone_forward(x, None, self.backbone)

    def encode_supports(self, supports: dict) -> dict[int, list[Tensor]]:
        """Backbone maps for ``{class_id: [SupportInput | SupportInstance]}`` in one batch."""
        order = [(cid, prepare_support(s)) for cid in sorted(supports) for s in supports[cid]]
        feats = self.features(np.stack([s.data for _, s in order]))
        out: dict[int, list[Tensor]] = {}
        for i, (cid, _) in enumerate(order):
            out.setdefault(cid, []).append(T.index(feats, i))
        return out

    # -- prototypes ---------------------------------------------------------

    def couple_supports(self, x_q: Tensor, support_feats: dict[int, list[Tensor]]) -> dict[int, list]:
        cfg = self.cfg
        if not cfg.use_cic:
            return {cid: list(fs) for cid, fs in support_feats.items()}
        return {cid: [cic_forward(x_q, x_s, self.coupling, use_ccm=cfg.use_ccm,
                                  clamp=cfg.clamp_condition) for x_s in fs]
                for cid, fs in support_feats.items()}

    def class_prototypes(self, x_q: Tensor, support_feats: dict[int, list[Tensor]]
                         ) -> tuple[dict[int, ClassPrototype], dict[int, list]]:
        cfg = self.cfg
        coupled = self.couple_supports(x_q, support_feats)
        protos = aggregate_prototypes(coupled, cfg.alpha, self.inter, use_intra=cfg.use_intra,
                                      use_inter=cfg.use_inter, img_proto=cfg.img_proto,
                                      normalize_inter=cfg.normalize_inter)
        return protos, coupled

    def meta_logits(self, protos: dict[int, ClassPrototype]) -> tuple[Tensor, list[int]]:
        roster = sorted(protos)
        stacked = T.stack([protos[c].v for c in roster])
        return T.linear(stacked, self.heads.meta_w, self.heads.meta_b), roster


# ---------------------------------------------------------------------------
# functional pieces


def prepare_image(image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """uint8 [H, W, 3] (+ optional 0/1 mask) -> normalised float [4, H, W]."""
    x = (np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    m = np.zeros((1,) + x.shape[1:]) if mask is None else np.asarray(mask, dtype=np.float64)[None]
    return np.concatenate([x, m], axis=0)


def prepare_support(s) -> SupportInput:
    if isinstance(s, SupportInput):
        return s
    return SupportInput(prepare_image(s.image, s.mask), s.class_id)


def backbone_forward(image: Tensor, mask: Tensor | None, params: BackboneParams) -> Tensor:
    """Three conv3x3 -> relu -> 2x2 avg-pool stages; stride 8.

    ``image`` is ``[3, H, W]`` (mask appended, or a zero channel when absent),
    ``[4, H, W]`` already carrying the mask channel, or a batch ``[N, 4, H, W]``.
    """
    h, w = image.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise T.ShapeError(f"backbone input {h}x{w} is not divisible by {STRIDE}")
    x = image
    if image.ndim == 3 and image.shape[0] == 3:
        m = mask if mask is not None else T.tensor(np.zeros((1, h, w)))
        x = T.concat([image, m], axis=0)
    for weight, bias in params.stages:
        x = T.avg_pool2(T.relu(T.conv2d(x, weight, bias)))
    return x


def box_to_window(box, image_size: tuple[int, int], feat_size: tuple[int, int]) -> tuple[int, int, int, int]:
    """Image box -> half-open feature window, rounded outward, at least one cell."""
    x1, y1, x2, y2 = box.coords if hasattr(box, "coords") else box
    fh, fw = feat_size
    sy = image_size[0] / fh
    sx = image_size[1] / fw

    def span(a, b, s, n):
        lo = max(0, min(n, math.floor(a / s)))
        hi = max(0, min(n, math.ceil(b / s)))
        if hi <= lo:
            c = min(max(int(math.floor((a + b) / 2 / s)), 0), n - 1)
            lo, hi = c, c + 1
        return lo, hi

    y0, y1_ = span(y1, y2, sy, fh)
    x0, x1_ = span(x1, x2, sx, fw)
    return (y0, y1_, x0, x1_)


def extract_roi_features(feat: Tensor, boxes, image_size: tuple[int, int]) -> list[RoI]:
    """Average-pool ``feat`` under each box (boxes mapped to the stride-8 grid)."""
    windows = [box_to_window(b, image_size, feat.shape[1:]) for b in boxes]
    pooled = T.roi_pool(feat, windows)
    out = []
    for i, (b, win) in enumerate(zip(boxes, windows)):
        coords = b.coords if hasattr(b, "coords") else tuple(b)
        label = b.class_id if isinstance(b, BoxAnnotation) else -1
        out.append(RoI(coords, win, T.index(pooled, i), label))
    return out


def channel_attention(roi: Tensor, proto: Tensor) -> Tensor:
    if roi.shape != proto.shape:
        raise T.ShapeError(f"channel_attention: roi {roi.shape} vs prototype {proto.shape}")
    return T.hadamard(roi, T.sigmoid(proto))


def detection_forward(rois, prototypes: dict[int, ClassPrototype], heads: HeadParams,
                      classes: list[int] | None = None) -> tuple[Tensor, Tensor]:
    """Logits ``[R, M+1]`` (background last) and per-class deltas ``[R, M, 4]``.

    ``rois`` is a list of :class:`RoI` or an ``[R, C]`` feature tensor.
    """
    classes = sorted(prototypes) if classes is None else list(classes)
    missing = [c for c in classes if c not in prototypes]
    if missing:
        raise KeyError(f"no prototype for classes {missing}")
    feats = rois if isinstance(rois, Tensor) else T.stack([r.feature for r in rois])
    gates = T.sigmoid(T.stack([prototypes[c].v for c in classes]))  # [M, C]
    modulated = T.modulate(feats, gates)  # [R, M, C]
    r, m = feats.shape[0], len(classes)
    cls_logits = T.reshape(T.linear(modulated, heads.cls_w, heads.cls_b), (r, m))
    bg_logit = T.linear(feats, heads.bg_w, heads.bg_b)  # [R, 1]
    logits = T.concat([cls_logits, bg_logit], axis=1)
    deltas = T.linear(modulated, heads.reg_w, heads.reg_b)
    return logits, deltas


def total_loss(cls_logits: Tensor, labels, deltas: Tensor, reg_targets, proto_logits: Tensor,
               proto_labels, lam: float = 1.0) -> tuple[Tensor, dict]:
    """Classification CE + L1 regression over positives + lam * meta CE.

    ``labels`` index the columns of ``cls_logits`` (background = last column);
    ``reg_targets`` holds a 4-tuple per positive RoI and None otherwise.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    m = cls_logits.shape[1] - 1
    labels = [int(v) for v in labels]
    if any(not 0 <= v <= m for v in labels):
        raise ValueError(f"classification labels must lie in [0, {m}]")
    l_cls = T.cross_entropy(cls_logits, labels)
    pos = [i for i, v in enumerate(labels) if v < m]
    if pos:
        missing = [i for i in pos if reg_targets[i] is None]
        if missing:
            raise ValueError(f"positive RoIs {missing} lack regression targets")
        picked = T.index(deltas, (np.array(pos), np.array([labels[i] for i in pos])))
        l_reg = T.l1_loss(picked, np.array([reg_targets[i] for i in pos], dtype=np.float64))
    else:
        l_reg = T.tensor(0.0)
    l_meta = T.cross_entropy(proto_logits, list(proto_labels))
    loss = T.add(T.add(l_cls, l_reg), T.scale(l_meta, lam))
    return loss, {"cls": l_cls.item(), "reg": l_reg.item(), "meta": l_meta.item()}


# ---------------------------------------------------------------------------
# inference


def anchor_grid(image_size: int, scales=(14, 20, 28), ratios=(1.0, 2.0),
                stride: int = STRIDE) -> list[tuple]:
    """Sliding-window boxes (width/height ratio ``r``) centred on the stride grid, clipped."""
    boxes = []
    n = image_size // stride
    for iy in range(n):
        for ix in range(n):
            cx, cy = (ix + 0.5) * stride, (iy + 0.5) * stride
            for s in scales:
                for r in ratios:
                    w, h = s * math.sqrt(r), s / math.sqrt(r)
                    boxes.append(clip_box((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2),
                                          image_size, image_size))
    return boxes


def nms_numpy(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Same contract as :func:`icpe.boxes.nms`, vectorised over the survivors."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    x1, y1, x2, y2 = boxes.T
    area = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        union = area[i] + area[rest] - inter
        ov = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        order = rest[ov < iou_thresh]
    return keep


def detections_from_outputs(logits: np.ndarray, deltas: np.ndarray, proposals, classes: list[int],
                            image_size: int, score_thresh: float = 0.05, nms_iou: float = 0.5,
                            max_per_class: int = 100) -> list[Detection]:
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    out: list[Detection] = []
    for m, cid in enumerate(classes):
        idx = np.nonzero(probs[:, m] >= score_thresh)[0]
        if idx.size == 0:
            continue
        boxes = np.array([clip_box(decode_deltas(proposals[i], deltas[i, m]), image_size, image_size)
                          for i in idx])
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        idx, boxes = idx[valid], boxes[valid]
        scores = probs[idx, m]
        for j in nms_numpy(boxes, scores, nms_iou)[:max_per_class]:
            out.append(Detection(*(float(v) for v in boxes[j]), cid, float(scores[j])))
    return out


def predict(query_image: np.ndarray, episode_supports, model: ICPEDetector,
            score_thresh: float = 0.05, nms_iou: float = 0.5, support_feats=None,
            return_extras: bool = False):
    """Detections on one query image given ``{class_id: [support, ...]}``.

    ``support_feats`` may carry precomputed backbone maps for the supports.
    """
    cfg = model.cfg
    size = query_image.shape[0]
    with T.no_grad():
        if support_feats is None:
            support_feats = model.encode_supports(episode_supports)
        x_q = T.index(model.features(prepare_image(query_image)[None]), 0)
        protos, coupled = model.class_prototypes(x_q, support_feats)
        proposals = anchor_grid(size, cfg.grid_scales, cfg.grid_ratios)
        windows = [box_to_window(b, (size, size), x_q.shape[1:]) for b in proposals]
        classes = sorted(protos)
        logits, deltas = detection_forward(T.roi_pool(x_q, windows), protos, model.heads, classes)
        dets = detections_from_outputs(logits.data, deltas.data, proposals, classes, size,
                                       score_thresh, nms_iou)
    if return_extras:
        return dets, {"prototypes": protos, "coupled": coupled}
    return dets
